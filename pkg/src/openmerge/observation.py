"""Agent observations.

Every component is normalized into [0, 1].  A missing leader or follower
reads as a fast vehicle at maximal headway (speed 1, headway 1), so the
vector changes continuously as neighbours come into range.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .engine import POST, RAMP, WorldState
from .network import ScenarioConfig


@dataclass(frozen=True)
class NormConstants:
    V_max: float
    h_max: float
    d_max: float

    def __post_init__(self):
        if not (self.V_max > 0 and self.h_max > 0 and self.d_max > 0):
            raise ValueError("normalization constants must be > 0")

    @classmethod
    def from_config(cls, config: ScenarioConfig) -> "NormConstants":
        return cls(config.speed_limit, config.h_max, config.network.d_max)


class Feature(enum.Enum):
    DIST = "dist"
    MERGE_INFO = "merge_info"
    CONGESTION = "congestion"


_WIDTH = {Feature.DIST: 1, Feature.MERGE_INFO: 2, Feature.CONGESTION: 1}
_ORDER = (Feature.DIST, Feature.MERGE_INFO, Feature.CONGESTION)


@dataclass(frozen=True)
class FeatureSet:
    flags: frozenset = frozenset()

    @classmethod
    def of(cls, *names: str) -> "FeatureSet":
        return cls(frozenset(Feature(n) for n in names))

    @classmethod
    def full(cls) -> "FeatureSet":
        return cls(frozenset(Feature))

    @classmethod
    def parse(cls, text: str) -> "FeatureSet":
        """``"none"``, ``"full"`` or a ``+``-separated list such as ``dist+merge_info``."""
        text = text.strip().lower()
        if text in ("", "none"):
            return cls()
        if text == "full":
            return cls.full()
        try:
            return cls.of(*text.split("+"))
        except ValueError:
            raise ValueError(f"unknown feature in {text!r}; choose from "
                             f"{[f.value for f in Feature]}") from None

    @property
    def size(self) -> int:
        return sum(_WIDTH[f] for f in self.flags)

    @property
    def names(self) -> list[str]:
        return [f.value for f in _ORDER if f in self.flags]

    def __str__(self) -> str:
        return "+".join(self.names) or "none"


def local_state_5(vid: int, world: WorldState, norms: NormConstants) -> np.ndarray:
    """[v, v_leader, h_leader, v_follower, h_follower], normalized."""
    i = world.index_of[int(vid)]
    nb = world.neighbors
    speed = world.speed
    out = np.ones(5)
    out[0] = speed[i] / norms.V_max
    if nb.leader[i] >= 0:
        out[1] = speed[nb.leader[i]] / norms.V_max
        out[2] = min(nb.leader_gap[i], norms.h_max) / norms.h_max
    if nb.follower[i] >= 0:
        out[3] = speed[nb.follower[i]] / norms.V_max
        out[4] = min(nb.follower_gap[i], norms.h_max) / norms.h_max
    return np.clip(out, 0.0, 1.0)


@dataclass(frozen=True)
class CentralizedRoster:
    """Fixed-position assignment of AVs to the centralized policy's slots."""

    slots: tuple  # vehicle id or None per slot

    @classmethod
    def empty(cls, n_slots: int) -> "CentralizedRoster":
        return cls((None,) * n_slots)

    def updated(self, world: WorldState, eligible: Optional[Iterable[int]] = None
                ) -> "CentralizedRoster":
        """Drop departed AVs and fill free slots with the oldest unassigned ones.

        ``eligible`` restricts which AVs may hold a slot (all live AVs by
        default); a rostered AV that is no longer eligible loses its slot.
        """
        live = set(world.av_ids() if eligible is None else eligible)
        slots = [v if v in live else None for v in self.slots]
        if None in slots:
            taken = {v for v in slots if v is not None}
            waiting = sorted(
                (v for v in live if v not in taken),
                key=lambda v: (int(world.entry[world.index_of[v]]), v),
            )
            it = iter(waiting)
            for k, v in enumerate(slots):
                if v is None:
                    slots[k] = next(it, None)
        return CentralizedRoster(tuple(slots))

    @property
    def active(self) -> list[tuple[int, int]]:
        """(slot index, vehicle id) for occupied slots."""
        return [(k, v) for k, v in enumerate(self.slots) if v is not None]


def centralized_state(world: WorldState, roster: CentralizedRoster, n_av: int,
                      norms: NormConstants) -> np.ndarray:
    if len(roster.slots) != n_av:
        raise ValueError(f"roster has {len(roster.slots)} slots, expected {n_av}")
    out = np.zeros(5 * n_av)
    for k, vid in roster.active:
        out[5 * k:5 * k + 5] = local_state_5(vid, world, norms)
    return out


def distributed_state(vid: int, world: WorldState, features: FeatureSet,
                      norms: NormConstants) -> np.ndarray:
    """Local 5-vector followed by the enabled augmentations in fixed order."""
    base = local_state_5(vid, world, norms)
    if not features.flags:
        return base
    i = world.index_of[int(vid)]
    x = world.x
    e = world.edge
    d_next = max(-x[i], 0.0)
    extra = []
    for f in _ORDER:
        if f not in features.flags:
            continue
        if f is Feature.DIST:
            extra.append(d_next / norms.d_max)
        elif f is Feature.MERGE_INFO:
            ramp = np.flatnonzero(e == RAMP)
            if len(ramp):
                j = ramp[0]  # canonical order puts the one nearest the junction first
                extra += [world.speed[j] / norms.V_max, -x[j] / norms.d_max]
            else:
                extra += [1.0, 1.0]
        else:
            extra.append(_congestion(world, i, norms))
    return np.clip(np.concatenate([base, extra]), 0.0, 1.0)


def _congestion(world: WorldState, i: int, norms: NormConstants) -> float:
    """Mean speed of the vehicles between vehicle ``i`` and the junction."""
    if world.edge[i] == POST:
        return 1.0
    e = world.edge
    ahead = (e == e[i]) & (world.x > world.x[i])
    if not ahead.any():
        return 1.0
    return float(world.speed[ahead].mean() / norms.V_max)


def observation_size(kind: str, n_av: int = 5, features: FeatureSet = FeatureSet()) -> int:
    if kind == "centralized":
        return 5 * n_av
    if kind == "distributed":
        return 5 + features.size
    raise ValueError(f"unknown policy kind {kind!r}")


__all__ = [
    "CentralizedRoster", "Feature", "FeatureSet", "NormConstants", "centralized_state",
    "distributed_state", "local_state_5", "observation_size",
]
