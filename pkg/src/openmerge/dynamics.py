"""Longitudinal vehicle dynamics.

Everything here works on plain floats and on numpy arrays alike, so the
engine can evaluate a whole timestep in one vectorized pass while the scalar
API stays usable for tests and scripted controllers.

Safety rule
-----------
A follower is "safe" when, even if its leader brakes at ``decel_max`` from
now on, the follower can also brake at ``decel_max`` and still stop at least
``MIN_GAP`` behind it.  Stopping distances are the exact ones produced by the
semi-implicit Euler update used in :func:`integrate`, so the condition is
preserved from one step to the next under mutual full braking.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

VEHICLE_LENGTH = 5.0
MIN_GAP = 0.1


@dataclass(frozen=True)
class IdmParams:
    # v0=None means "use the edge speed limit"
    v0: Optional[float] = None
    T_headway: float = 1.0
    a_max: float = 2.6
    b_comf: float = 4.5
    delta: float = 4.0
    s0: float = 2.0

    def __post_init__(self):
        for name in ("T_headway", "a_max", "b_comf", "delta", "s0"):
            if not getattr(self, name) > 0:
                raise ValueError(f"IdmParams.{name} must be > 0")
        if self.v0 is not None and not self.v0 > 0:
            raise ValueError("IdmParams.v0 must be > 0")


@dataclass(frozen=True)
class ActionBounds:
    accel_max: float = 2.6
    decel_max: float = 4.5

    def __post_init__(self):
        if not (self.accel_max > 0 and self.decel_max > 0):
            raise ValueError("action bounds must be positive")


@dataclass(frozen=True)
class Vehicle:
    id: int
    cls: str  # "human" | "av"
    route: int
    edge: int
    position: float
    speed: float
    entry_time: int = 0
    controlled: bool = False

    @property
    def is_av(self) -> bool:
        return self.cls == "av"


def idm_acceleration(speed, leader_speed, gap, params: IdmParams, v0: Optional[float] = None):
    """IDM acceleration.  ``gap=None`` (or ``inf``) means free road.

    Non-positive gaps are treated as a tiny positive gap, which yields a
    very large braking demand that the clamps then bound.
    """
    v0 = v0 if v0 is not None else params.v0
    if v0 is None:
        raise ValueError("desired speed v0 is unset")
    scalar = np.isscalar(speed) and (gap is None or np.isscalar(gap))
    v = np.asarray(speed, dtype=float)
    free = 1.0 - (v / v0) ** params.delta
    if gap is None:
        out = params.a_max * free
        return float(out) if scalar else out
    s = np.maximum(np.asarray(gap, dtype=float), 1e-3)
    vl = np.asarray(leader_speed if leader_speed is not None else 0.0, dtype=float)
    dyn = v * params.T_headway + v * (v - vl) / (2.0 * math.sqrt(params.a_max * params.b_comf))
    s_star = params.s0 + np.maximum(0.0, dyn)
    # inf gap -> zero interaction
    with np.errstate(invalid="ignore"):
        inter = np.where(np.isinf(s), 0.0, (s_star / s) ** 2)
    out = params.a_max * (free - inter)
    return float(out) if scalar else out


def clamp_action(accel, bounds: ActionBounds, speed=None, dt: Optional[float] = None,
                 speed_limit: Optional[float] = None):
    """Clip an acceleration to the vehicle's limits.

    With ``speed`` and ``dt`` the result is also kept from reversing the
    vehicle; with ``speed_limit`` as well it cannot push speed over the limit.
    """
    a = np.asarray(accel, dtype=float)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"non-finite acceleration {accel!r}")
    lo = np.full_like(a, -bounds.decel_max)
    hi = np.full_like(a, bounds.accel_max)
    if speed is not None and dt is not None:
        v = np.asarray(speed, dtype=float)
        lo = np.maximum(lo, -v / dt)
        if speed_limit is not None:
            hi = np.minimum(hi, (speed_limit - v) / dt)
        hi = np.maximum(hi, lo)
    out = np.clip(a, lo, hi)
    return float(out) if np.ndim(out) == 0 else out


def stopping_distance(speed, decel: float, dt: float):
    """Distance covered when braking at ``decel`` until standstill.

    Exact for the semi-implicit update v' = max(0, v - decel*dt), x' = x + v'*dt.
    """
    u = decel * dt
    v = np.asarray(speed, dtype=float)
    m = np.maximum(np.ceil(v / u - 1e-12) - 1.0, 0.0)
    out = dt * m * (v - u * (m + 1.0) / 2.0)
    out = np.maximum(out, 0.0)
    return float(out) if np.ndim(out) == 0 else out


def _max_speed_with_travel(budget, decel: float, dt: float):
    """Largest v with v*dt + stopping_distance(v) <= budget (0 if none)."""
    u = decel * dt
    r = np.asarray(budget, dtype=float) / dt
    r_pos = np.maximum(r, 0.0)
    with np.errstate(invalid="ignore"):
        k = np.floor((-1.0 + np.sqrt(1.0 + 8.0 * r_pos / u)) / 2.0)
        v = r_pos / (k + 1.0) + u * k / 2.0
    v = np.where(np.isinf(r_pos), np.inf, v)
    return np.where(r > 0.0, v, 0.0)


def safe_next_speed(gap, leader_speed, decel: float, dt: float, margin: float = MIN_GAP):
    """Largest follower speed for the next step that keeps the safety rule.

    ``gap`` is the current bumper-to-bumper gap; the leader is assumed to
    brake at ``decel`` during the step.  ``inf`` gaps give ``inf``.
    """
    gap = np.asarray(gap, dtype=float)
    vl = np.asarray(leader_speed, dtype=float)
    vl_next = np.maximum(vl - decel * dt, 0.0)
    with np.errstate(invalid="ignore"):
        budget = gap + vl_next * dt + stopping_distance(vl_next, decel, dt) - margin
        by_stop = _max_speed_with_travel(budget, decel, dt)
        by_gap = (gap + vl_next * dt - margin) / dt
        out = np.minimum(by_stop, np.maximum(by_gap, 0.0))
    out = np.where(np.isinf(gap), np.inf, out)
    return float(out) if np.ndim(out) == 0 else out


def safe_current_speed(gap, leader_speed, decel: float, dt: float, margin: float = MIN_GAP):
    """Largest speed a vehicle may *have* now behind this leader (insertion)."""
    gap = np.asarray(gap, dtype=float)
    budget = gap + stopping_distance(leader_speed, decel, dt) - margin
    # stopping_distance(v) == travel-inclusive bound evaluated one braking step earlier
    v = _max_speed_with_travel(budget, decel, dt) + decel * dt
    v = np.where(budget >= 0.0, v, -1.0)
    out = np.where(np.isinf(gap), np.inf, v)
    return float(out) if np.ndim(out) == 0 else out


def safety_accel_bound(speed, gap, leader_speed, bounds: ActionBounds, dt: float):
    """Upper bound on acceleration imposed by the safety rule."""
    v_next = safe_next_speed(gap, leader_speed, bounds.decel_max, dt)
    return (np.asarray(v_next) - np.asarray(speed, dtype=float)) / dt


def safety_clamp(accel: float, vehicle: Vehicle, leader: Optional[Vehicle], dt: float,
                 bounds: ActionBounds = ActionBounds(), gap: Optional[float] = None) -> float:
    """Reduce ``accel`` so the follower stays safe behind ``leader``.

    ``gap`` defaults to the positional gap when both vehicles share an edge;
    pass it explicitly for cross-edge leaders.  Never raises the acceleration
    and never asks for more than ``decel_max`` of braking.
    """
    if leader is None:
        return float(accel)
    if gap is None:
        if leader.edge != vehicle.edge:
            raise ValueError("gap must be given for a leader on another edge")
        gap = leader.position - vehicle.position - VEHICLE_LENGTH
    bound = float(safety_accel_bound(vehicle.speed, gap, leader.speed, bounds, dt))
    lower = -min(bounds.decel_max, vehicle.speed / dt)
    return float(max(min(accel, bound), lower))


@dataclass(frozen=True)
class MergeOrder:
    proceeds: Optional[Vehicle]
    yields: Optional[Vehicle]


def resolve_merge_priority(main_candidate: Optional[Vehicle],
                           ramp_candidate: Optional[Vehicle]) -> MergeOrder:
    """Equal-priority junction: the slower vehicle yields; ties go to the main road."""
    if main_candidate is None or ramp_candidate is None:
        return MergeOrder(proceeds=main_candidate or ramp_candidate, yields=None)
    if ramp_candidate.speed > main_candidate.speed:
        return MergeOrder(proceeds=ramp_candidate, yields=main_candidate)
    return MergeOrder(proceeds=main_candidate, yields=ramp_candidate)


def integrate(vehicle: Vehicle, accel: float, dt: float, network=None) -> Vehicle:
    """Semi-implicit Euler step with edge carry-over.

    Without ``network`` the vehicle stays on its edge.  A vehicle that runs
    past the end of the post-merge edge keeps its overshooting position; the
    engine treats that as leaving the network.
    """
    speed = max(0.0, vehicle.speed + accel * dt)
    pos = vehicle.position + speed * dt
    edge = vehicle.edge
    if network is not None:
        length = network.edges[edge].length
        # 2 == EdgeKind.POST_MERGE
        if edge != 2 and pos > length:
            pos -= length
            edge = 2
    return replace(vehicle, speed=speed, position=pos, edge=edge)
