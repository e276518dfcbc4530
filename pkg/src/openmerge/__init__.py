"""Merge-traffic microsimulation with mixed human and autonomous vehicles,
plus PPO training of centralized and distributed AV controllers."""

__version__ = "0.1.0"
