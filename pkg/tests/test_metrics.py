import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from _world import make_world
from openmerge.engine import MAIN, EpisodeLog, IdmOnly, StepEvents, run_episode
from openmerge.metrics import (
    AvgSpeed, DistributedMixed, FlowReward, MetricsReport, Outflow, aggregate_ci,
    avg_speed_reward, distributed_reward, flow_reward, global_reward, intervals_disjoint,
    metric_avg_speed, metric_inflow, metric_outflow, outflow_reward, parse_reward,
    reward_to_str,
)
from openmerge.network import simple_merge_config

CFG = simple_merge_config()


def log_of(n, sum_speed, exits=None, entries=None, dt=0.5):
    T = len(n)
    return EpisodeLog(dt=dt, horizon=T, n=list(n), sum_speed=list(sum_speed),
                      entries=list(entries or [0] * T), exits=list(exits or [0] * T),
                      min_gap=[math.inf] * T)


def test_avg_speed_constant():
    assert metric_avg_speed(log_of([1] * 10, [10.0] * 10)) == 10.0


def test_avg_speed_empty_steps_count_zero():
    assert metric_avg_speed(log_of([0] * 5 + [1] * 5, [0.0] * 5 + [10.0] * 5)) == 5.0


def test_outflow_example():
    exits = [0] * 2000
    exits[:450] = [1] * 450
    log = log_of([1] * 2000, [1.0] * 2000, exits=exits)
    assert metric_outflow(log) == pytest.approx(1620.0)
    assert metric_outflow(log_of([1] * 10, [1.0] * 10)) == 0.0


def test_inflow_symmetric():
    log = log_of([1] * 100, [1.0] * 100, entries=[1] * 100)
    assert metric_inflow(log) == pytest.approx(7200.0)


def _world(speeds, avs=(), gaps=None):
    vs = []
    x = 500.0
    for k, v in enumerate(speeds):
        vs.append((k, 0, MAIN, x, v, k in avs))
        x -= VLEN + (gaps[k] if gaps else 50.0)
    return make_world(CFG, vs)


VLEN = 5.0


def test_flow_reward_perfect():
    w = _world([25.0] * 4, avs=(1,), gaps=[20.0] * 4)
    assert flow_reward(w, FlowReward()) == pytest.approx(1.0)


def test_flow_reward_stationary():
    assert flow_reward(_world([0.0] * 3), FlowReward(alpha=0.0)) == 0.0


def test_flow_reward_oracle():
    # vehicle 2 (an AV) trails vehicle 1 by a 5 m gap
    w = _world([5.0, 10.0, 15.0], avs=(2,), gaps=[50.0, 5.0, 50.0])
    v = np.array([5.0, 10.0, 15.0])
    ideal = math.sqrt(3 * 10.0 ** 2)
    dev = math.sqrt(np.sum((10.0 - v) ** 2))
    expected = max(ideal - dev, 0) / ideal - 0.1 * (10.0 - 5.0)
    assert flow_reward(w, FlowReward(V_d=10.0, alpha=0.1, h_expected=10.0)) == \
        pytest.approx(expected, rel=1e-12)


def test_flow_reward_empty():
    assert flow_reward(make_world(CFG, []), FlowReward()) == 0.0


@given(st.lists(st.floats(0, 30), min_size=1, max_size=20))
def test_reward_ranges(speeds):
    w = _world(speeds)
    assert 0.0 <= flow_reward(w, FlowReward(alpha=0.0)) <= 1.0 + 1e-12
    assert 0.0 <= avg_speed_reward(w) <= 1.0 + 1e-12


def test_avg_speed_reward_cases():
    assert avg_speed_reward(_world([30.0, 30.0])) == 1.0
    assert avg_speed_reward(make_world(CFG, [])) == 0.0
    assert avg_speed_reward(_world([15.0, 0.0])) == 0.25


def test_outflow_reward():
    assert outflow_reward(StepEvents(exits=2, exit_ids=(1, 2))) == 2.0
    assert outflow_reward(StepEvents()) == 0.0


def test_distributed_reward_cases():
    w = _world([30.0, 30.0], avs=(0, 1))
    assert distributed_reward(0, w, StepEvents(), DistributedMixed(1.0, 0.0, 0.0)) == -1.0
    assert distributed_reward(0, w, StepEvents(), DistributedMixed(0.9, 0.1, 20)) == \
        pytest.approx(-0.8)
    assert distributed_reward(7, w, StepEvents(exits=1, exit_ids=(7,)),
                              DistributedMixed(0.9, 0.1, 20.0)) == 20.0
    with pytest.raises(KeyError):
        distributed_reward(9, w, StepEvents(), DistributedMixed())


@given(st.floats(0, 1), st.lists(st.floats(0, 30), min_size=1, max_size=10))
def test_distributed_reward_range(eta1, speeds):
    spec = DistributedMixed(eta1, 1.0 - eta1, 20.0)
    r = distributed_reward(0, _world(speeds, avs=(0,)), StepEvents(), spec)
    assert -spec.eta1 - 1e-12 <= r <= spec.eta2 + 1e-12


def test_mixed_validation():
    with pytest.raises(ValueError):
        DistributedMixed(0.5, 0.6, 0)
    with pytest.raises(ValueError):
        DistributedMixed(-0.1, 1.1, 0)


def test_global_reward_dispatch():
    w = _world([15.0])
    ev = StepEvents(exits=3, exit_ids=(4, 5, 6))
    assert global_reward(Outflow(), w, ev) == 3.0
    assert global_reward(AvgSpeed(), w, ev) == 0.5
    with pytest.raises(ValueError):
        global_reward(DistributedMixed(), w, ev)


def test_parse_reward_round_trip():
    for text in ("outflow", "avg_speed", "flow:25.0,0.1,10.0", "mixed:0.0,1.0,0.0"):
        assert reward_to_str(parse_reward(text)) == text
    assert parse_reward("mixed") == DistributedMixed()
    with pytest.raises(ValueError):
        parse_reward("speed")
    with pytest.raises(ValueError):
        parse_reward("mixed:1,2,3,4")


def test_aggregate_ci_examples():
    assert aggregate_ci([10, 10, 10]) == (10.0, 0.0)
    m, h = aggregate_ci([0, 10])
    assert m == 5.0 and h == pytest.approx(1.96 * (math.sqrt(50) / math.sqrt(2)))
    with pytest.raises(ValueError):
        aggregate_ci([1.0])


def test_intervals_disjoint():
    assert intervals_disjoint((0, 1), (3, 1))
    assert not intervals_disjoint((0, 1), (1.5, 1))


@pytest.fixture(scope="module")
def logged():
    """A short IDM episode plus the per-step rewards computed alongside it."""
    cfg = simple_merge_config(horizon=500)
    speed_r, out_r = [], []

    def on_step(world, events):
        speed_r.append(avg_speed_reward(world))
        out_r.append(outflow_reward(events))

    log = run_episode(IdmOnly(), cfg, 1, on_step=on_step)
    return cfg, log, speed_r, out_r


def test_reward_metric_identities(logged):
    cfg, log, speed_r, out_r = logged
    assert math.isclose(sum(speed_r) / log.steps, metric_avg_speed(log) / cfg.speed_limit,
                        rel_tol=1e-9)
    assert sum(out_r) == log.total_exited
    assert log.total_exited == round(metric_outflow(log) * log.steps * log.dt / 3600)


def test_metrics_report(logged):
    cfg, log, _, _ = logged
    rep = MetricsReport.from_logs([log, log])
    assert rep.n == 2 and rep.avg_outflow == (metric_outflow(log), 0.0)
    assert set(rep.as_row()) >= {"outflow", "outflow_ci", "inflow", "avg_speed", "n"}
