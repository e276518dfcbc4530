import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from openmerge import _kernel
from openmerge.dynamics import (
    MIN_GAP, VEHICLE_LENGTH, ActionBounds, IdmParams, Vehicle, _max_speed_with_travel,
    clamp_action, idm_acceleration, integrate, resolve_merge_priority, safe_current_speed,
    safe_next_speed, safety_clamp, stopping_distance,
)
from openmerge.network import build_simple_merge

P = IdmParams(v0=30.0)
B = ActionBounds()
DT = 0.5

speeds = st.floats(0, 30)
gaps = st.floats(0.01, 300)


def idm_oracle(v, vl, s, v0=30.0, T=1.0, a=2.6, b=4.5, delta=4.0, s0=2.0):
    s_star = s0 + max(0.0, v * T + v * (v - vl) / (2 * math.sqrt(a * b)))
    return a * (1 - (v / v0) ** delta - (s_star / s) ** 2)


def brake_trace(v, decel, dt):
    """Positions reached while braking from speed v (semi-implicit), oracle by simulation."""
    x, out = 0.0, []
    while v > 0:
        v = max(0.0, v - decel * dt)
        x += v * dt
        out.append(x)
    return x


# -- IDM

def test_idm_free_equilibrium():
    assert idm_acceleration(30.0, None, None, P) == 0.0


def test_idm_from_rest_free_road():
    assert idm_acceleration(0.0, None, None, P) == 2.6


def test_idm_oracle_example():
    assert math.isclose(idm_acceleration(10.0, 10.0, 15.0, P), idm_oracle(10, 10, 15),
                        rel_tol=1e-12)


@given(speeds, speeds, gaps)
def test_idm_matches_oracle(v, vl, s):
    assert math.isclose(idm_acceleration(v, vl, s, P), idm_oracle(v, vl, s),
                        rel_tol=1e-9, abs_tol=1e-9)


def test_idm_uses_explicit_v0():
    with pytest.raises(ValueError):
        idm_acceleration(1.0, None, None, IdmParams())
    assert idm_acceleration(20.0, None, None, IdmParams(), v0=20.0) == 0.0


def test_idm_vectorized():
    v = np.array([0.0, 10.0, 20.0])
    out = idm_acceleration(v, np.array([5.0, 5.0, 5.0]), np.array([10.0, 20.0, np.inf]), P)
    for k in range(3):
        ref = idm_acceleration(float(v[k]), 5.0, [10.0, 20.0, None][k], P)
        assert math.isclose(out[k], ref, rel_tol=1e-12)


def test_idm_params_validation():
    with pytest.raises(ValueError):
        IdmParams(T_headway=0)
    with pytest.raises(ValueError):
        ActionBounds(accel_max=-1)


# -- clamps

@pytest.mark.parametrize("a,expected", [(5.0, 2.6), (-10.0, -4.5), (1.0, 1.0)])
def test_clamp_examples(a, expected):
    assert clamp_action(a, B) == expected


def test_clamp_no_reverse():
    assert clamp_action(-4.5, B, speed=1.0, dt=DT) == -2.0


def test_clamp_rejects_non_finite():
    with pytest.raises(ValueError):
        clamp_action(float("nan"), B)


@given(st.floats(-100, 100), speeds)
def test_clamp_idempotent(a, v):
    once = clamp_action(a, B, speed=v, dt=DT, speed_limit=30.0)
    assert clamp_action(once, B, speed=v, dt=DT, speed_limit=30.0) == once
    assert -4.5 <= once <= 2.6
    assert v + once * DT >= -1e-12


def _veh(pos, speed, edge=0):
    return Vehicle(id=0, cls="av", route=0, edge=edge, position=pos, speed=speed)


def test_safety_clamp_free_road():
    assert safety_clamp(2.6, _veh(0, 10), None, DT) == 2.6
    assert safety_clamp(2.6, _veh(0, 10), _veh(1000, 10), DT) == 2.6


def test_safety_clamp_full_brake_allowed():
    for gap in (0.2, 3.0, 50.0):
        v = 20.0
        lead = _veh(10 + VEHICLE_LENGTH + gap, 0.0)
        assert safety_clamp(-4.5, _veh(10, v), lead, DT) == -4.5


def _safe_by_simulation(v, a, gap, vl, margin=MIN_GAP):
    """Follower takes a for one step, then both brake fully; gap must stay >= margin."""
    vf = max(0.0, v + a * DT)
    vln = max(0.0, vl - B.decel_max * DT)
    g = gap + vln * DT - vf * DT
    return g + brake_trace(vln, B.decel_max, DT) - brake_trace(vf, B.decel_max, DT) \
        >= margin - 1e-9 and g >= margin - 1e-9


def test_safety_clamp_closing_fast_example():
    v, gap, vl = 20.0, 0.5, 0.0
    out = safety_clamp(2.6, _veh(0, v), _veh(gap + VEHICLE_LENGTH, vl), DT)
    # one-step bound cannot be met: brake fully
    assert out == -4.5


@given(speeds, st.floats(0.2, 200), speeds, st.floats(-4.5, 2.6))
def test_safety_clamp_against_simulation(v, gap, vl, a):
    assume(_safe_by_simulation(v, -B.decel_max, gap, vl))  # current state already safe
    a = clamp_action(a, B, speed=v, dt=DT)  # precondition: bounds already applied
    out = safety_clamp(a, _veh(0, v), _veh(gap + VEHICLE_LENGTH, vl), DT)
    assert out <= a + 1e-12
    assert _safe_by_simulation(v, out, gap, vl)
    if out < a - 1e-6 and v + out * DT > 0:
        # the bound is tight: a bit more acceleration is unsafe
        assert not _safe_by_simulation(v, out + 1e-4, gap, vl)


def test_safety_clamp_needs_gap_across_edges():
    with pytest.raises(ValueError):
        safety_clamp(1.0, _veh(0, 10, edge=0), _veh(5, 10, edge=2), DT)


@given(speeds)
def test_stopping_distance_matches_simulation(v):
    assert math.isclose(stopping_distance(v, 4.5, DT), brake_trace(v, 4.5, DT), abs_tol=1e-9)


@given(st.floats(0, 500))
def test_max_speed_with_travel_is_max(budget):
    v = float(_max_speed_with_travel(budget, 4.5, DT))
    assert v * DT + stopping_distance(v, 4.5, DT) <= budget + 1e-9
    w = v + 1e-6
    assert w * DT + stopping_distance(w, 4.5, DT) > budget - 1e-9


@given(gaps, speeds)
def test_safe_current_speed_is_safe(gap, vl):
    v = float(safe_current_speed(gap, vl, 4.5, DT))
    if v >= 0:
        assert gap + stopping_distance(vl, 4.5, DT) - stopping_distance(v, 4.5, DT) \
            >= MIN_GAP - 1e-9


# -- merge priority

def test_priority_faster_proceeds():
    m, r = _veh(590, 12.0), _veh(190, 8.0, edge=1)
    order = resolve_merge_priority(m, r)
    assert order.proceeds is m and order.yields is r
    order = resolve_merge_priority(_veh(590, 5.0), r)
    assert order.proceeds is r


def test_priority_single_and_tie():
    m = _veh(590, 10.0)
    assert resolve_merge_priority(m, None).proceeds is m
    assert resolve_merge_priority(None, m).proceeds is m
    assert resolve_merge_priority(m, _veh(190, 10.0, edge=1)).proceeds is m
    assert resolve_merge_priority(None, None).proceeds is None


# -- integration

def test_integrate_examples():
    net = build_simple_merge()
    assert integrate(_veh(100, 10), 0.0, DT).position == 105
    assert integrate(_veh(100, 1), -4.5, DT).speed == 0.0
    out = integrate(_veh(599, 10), 0.0, DT, net)
    assert out.edge == 2 and out.position == 4


def test_idm_platoon_equilibrium():
    """A platoon at the IDM steady state keeps its speed for 100 steps."""
    v = 15.0
    s_eq = (2.0 + v * 1.0) / math.sqrt(1 - (v / 30.0) ** 4)
    n = 6
    pos = -np.arange(n) * (s_eq + VEHICLE_LENGTH)
    speed = np.full(n, v)
    for _ in range(100):
        gap = pos[:-1] - pos[1:] - VEHICLE_LENGTH
        acc = np.zeros(n)  # the head drives at constant speed
        acc[1:] = idm_acceleration(speed[1:], speed[:-1], gap, P)
        speed = np.maximum(speed + acc * DT, 0.0)
        pos = pos + speed * DT
    assert np.max(np.abs(speed - v)) < 1e-6


# -- compiled kernel agrees with the reference functions

@given(speeds)
def test_kernel_stopping_distance(v):
    assert _kernel.stopping_distance(v, 4.5, DT) == pytest.approx(stopping_distance(v, 4.5, DT),
                                                                 abs=1e-12)


@given(st.floats(-10, 1000) | st.just(math.inf))
def test_kernel_max_speed(budget):
    ref = float(_max_speed_with_travel(budget, 4.5, DT))
    got = _kernel.max_speed_with_travel(budget, 4.5, DT)
    assert got == ref or math.isclose(got, ref, rel_tol=1e-12)


@given(st.floats(-1, 300) | st.just(math.inf), speeds)
def test_kernel_safe_next_speed(gap, vl):
    ref = float(safe_next_speed(gap, vl, 4.5, DT))
    got = _kernel.safe_next_speed(gap, vl, 4.5, DT, MIN_GAP)
    assert got == ref or math.isclose(got, ref, rel_tol=1e-12, abs_tol=1e-12)


@given(speeds, speeds, st.floats(-5, 300) | st.just(math.inf))
def test_kernel_idm(v, vl, gap):
    ref = idm_acceleration(v, vl, None if math.isinf(gap) else gap, P)
    got = _kernel.idm(v, vl, gap, 30.0, 1.0, 2.6, 4.5, 4.0, 2.0)
    assert math.isclose(got, ref, rel_tol=1e-12, abs_tol=1e-12)


@given(speeds, speeds, st.floats(0.2, 200), st.none() | st.floats(-20, 20),
       st.floats(0, 599))
def test_kernel_advance_matches_composition(v, vl, gap, action, pos):
    """One follower step equals clamp, IDM, safety rule and integration composed."""
    net = build_simple_merge()
    lead = np.array([-1, 0])
    lgap = np.array([np.inf, gap])
    act = np.array([np.nan, np.nan if action is None else action])
    new_speed, new_pos, new_edge = _kernel.advance(
        np.array([min(pos + gap + VEHICLE_LENGTH, 600.0), pos]), np.array([vl, v]),
        np.array([0, 0]), lead, lgap, np.full(2, np.inf), act,
        np.array([600.0, 200.0, np.inf]), 100.0,
        30.0, 1.0, 2.6, 4.5, 4.0, 2.0, 2.6, 4.5, DT, 30.0, MIN_GAP)
    a = idm_acceleration(v, vl, gap, P) if action is None else action
    a = clamp_action(a, B, speed=v, dt=DT, speed_limit=30.0)
    a = safety_clamp(a, _veh(0, v), _veh(gap + VEHICLE_LENGTH, vl), DT, B, gap=gap)
    ref = integrate(_veh(pos, v), a, DT, net)
    assert math.isclose(new_speed[1], min(ref.speed, 30.0), rel_tol=1e-9, abs_tol=1e-9)
    assert new_edge[1] == ref.edge
    assert math.isclose(new_pos[1], ref.position, rel_tol=1e-9, abs_tol=1e-9)
