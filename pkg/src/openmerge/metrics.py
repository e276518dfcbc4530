"""Evaluation metrics, reward functions and confidence-interval aggregation."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .engine import EpisodeLog, StepEvents, WorldState


# ---------------------------------------------------------------------------
# metrics on episode logs

def per_step_avg_speed(log: EpisodeLog) -> np.ndarray:
    """Mean speed of the vehicles present at each step (0 for empty steps)."""
    n = np.asarray(log.n, dtype=float)
    s = np.asarray(log.sum_speed, dtype=float)
    out = np.zeros(len(n))
    np.divide(s, n, out=out, where=n > 0)
    return out


def metric_avg_speed(log: EpisodeLog) -> float:
    """Time average of the per-step sample-average speed, in m/s."""
    if log.steps == 0:
        return 0.0
    return float(per_step_avg_speed(log).sum() / log.steps)


def _per_hour(count: int, log: EpisodeLog) -> float:
    if log.steps == 0:
        return 0.0
    return count / (log.steps * log.dt) * 3600.0


def metric_outflow(log: EpisodeLog) -> float:
    """Exits per hour over the episode."""
    return _per_hour(log.total_exited, log)


def metric_inflow(log: EpisodeLog) -> float:
    """Entries per hour over the episode."""
    return _per_hour(log.total_entered, log)


# ---------------------------------------------------------------------------
# rewards

@dataclass(frozen=True)
class FlowReward:
    V_d: float = 25.0
    alpha: float = 0.1
    h_expected: float = 10.0

    name = "flow"


@dataclass(frozen=True)
class AvgSpeed:
    name = "avg_speed"


@dataclass(frozen=True)
class Outflow:
    name = "outflow"


@dataclass(frozen=True)
class DistributedMixed:
    eta1: float = 0.9
    eta2: float = 0.1
    bonus: float = 20.0

    name = "mixed"

    def __post_init__(self):
        if self.eta1 < 0 or self.eta2 < 0 or not math.isclose(self.eta1 + self.eta2, 1.0,
                                                                 abs_tol=1e-12):
            raise ValueError(f"need eta1, eta2 >= 0 with eta1 + eta2 = 1, got "
                             f"{self.eta1}, {self.eta2}")


RewardSpec = Union[FlowReward, AvgSpeed, Outflow, DistributedMixed]


def parse_reward(text: str) -> RewardSpec:
    """Parse ``outflow``, ``avg_speed``, ``flow[:V_d,alpha,h]`` or ``mixed[:eta1,eta2,bonus]``."""
    name, _, args = text.strip().partition(":")
    vals = [float(a) for a in args.split(",")] if args else []
    kinds = {"flow": FlowReward, "avg_speed": AvgSpeed, "outflow": Outflow,
             "mixed": DistributedMixed}
    if name not in kinds:
        raise ValueError(f"unknown reward {name!r}; choose from {sorted(kinds)}")
    try:
        return kinds[name](*vals)
    except TypeError:
        raise ValueError(f"wrong number of parameters for reward {name!r}") from None


def reward_to_str(spec: RewardSpec) -> str:
    if isinstance(spec, FlowReward):
        return f"flow:{spec.V_d!r},{spec.alpha!r},{spec.h_expected!r}"
    if isinstance(spec, DistributedMixed):
        return f"mixed:{spec.eta1!r},{spec.eta2!r},{spec.bonus!r}"
    return spec.name


def flow_reward(world: WorldState, spec: FlowReward) -> float:
    """Closeness of all speeds to ``V_d`` minus a penalty on short AV headways."""
    n = len(world)
    if n == 0:
        return 0.0
    v = world.speed
    ideal = spec.V_d * math.sqrt(n)
    first = max(ideal - float(np.linalg.norm(spec.V_d - v)), 0.0) / ideal
    av = world.is_av
    if not av.any():
        return first
    h = world.neighbors.leader_gap[av]
    return first - spec.alpha * float(np.maximum(spec.h_expected - h, 0.0).sum())


def avg_speed_reward(world: WorldState, v_max: Optional[float] = None) -> float:
    n = len(world)
    if n == 0:
        return 0.0
    v_max = v_max if v_max is not None else world.config.speed_limit
    return float(world.speed.sum() / (n * v_max))


def outflow_reward(events: StepEvents) -> float:
    return float(events.exits)


def distributed_reward(agent: int, world: WorldState, events: StepEvents,
                       spec: DistributedMixed) -> float:
    """Per-agent reward: bonus on the exit step, else time penalty plus shared speed term."""
    if agent in events.exit_ids:
        return float(spec.bonus)
    if int(agent) not in world.index_of:
        raise KeyError(f"agent {agent} is neither in the network nor exiting")
    return -spec.eta1 + spec.eta2 * avg_speed_reward(world)


def global_reward(spec: RewardSpec, world: WorldState, events: StepEvents) -> float:
    """Single team reward for the centralized controller."""
    if isinstance(spec, FlowReward):
        return flow_reward(world, spec)
    if isinstance(spec, AvgSpeed):
        return avg_speed_reward(world)
    if isinstance(spec, Outflow):
        return outflow_reward(events)
    raise ValueError(f"{type(spec).__name__} is a per-agent reward")


# ---------------------------------------------------------------------------
# aggregation

def aggregate_ci(values: Sequence[float]) -> tuple[float, float]:
    """Sample mean and 95% normal-approximation half-width."""
    a = np.asarray(values, dtype=float)
    if len(a) < 2:
        raise ValueError("need at least 2 values for a confidence interval")
    return float(a.mean()), float(1.96 * a.std(ddof=1) / math.sqrt(len(a)))


@dataclass(frozen=True)
class MetricsReport:
    avg_outflow: tuple[float, float]
    avg_inflow: tuple[float, float]
    avg_speed: tuple[float, float]
    n: int

    @classmethod
    def from_logs(cls, logs: Sequence[EpisodeLog]) -> "MetricsReport":
        return cls(
            avg_outflow=aggregate_ci([metric_outflow(g) for g in logs]),
            avg_inflow=aggregate_ci([metric_inflow(g) for g in logs]),
            avg_speed=aggregate_ci([metric_avg_speed(g) for g in logs]),
            n=len(logs),
        )

    def as_row(self) -> Mapping[str, float]:
        return {
            "outflow": self.avg_outflow[0], "outflow_ci": self.avg_outflow[1],
            "inflow": self.avg_inflow[0], "inflow_ci": self.avg_inflow[1],
            "avg_speed": self.avg_speed[0], "avg_speed_ci": self.avg_speed[1],
            "n": self.n,
        }


def intervals_disjoint(a: tuple[float, float], b: tuple[float, float]) -> bool:
    """True when the two mean +- half-width intervals do not overlap."""
    return a[0] + a[1] < b[0] - b[1] or b[0] + b[1] < a[0] - a[1]
