import numpy as np
import pytest
from hypothesis import given, strategies as st

from _world import make_world
from openmerge.engine import MAIN, POST, RAMP, run_episode
from openmerge.network import simple_merge_config
from openmerge.observation import (
    CentralizedRoster, Feature, FeatureSet, NormConstants, centralized_state, distributed_state,
    local_state_5, observation_size,
)

CFG = simple_merge_config()
NORMS = NormConstants.from_config(CFG)


def test_norms_from_config():
    assert NORMS == NormConstants(30.0, 120.0, 600.0)
    with pytest.raises(ValueError):
        NormConstants(0.0, 1.0, 1.0)


def test_lone_vehicle_at_rest():
    w = make_world(CFG, [(0, 0, MAIN, 100.0, 0.0, True)])
    assert local_state_5(0, w, NORMS).tolist() == [0, 1, 1, 1, 1]


def test_saturated_state():
    norms = NormConstants(30.0, 100.0, 600.0)
    w = make_world(CFG, [(0, 0, MAIN, 100.0, 30.0, True), (1, 0, MAIN, 205.0, 30.0, False)])
    assert local_state_5(0, w, norms).tolist() == [1, 1, 1, 1, 1]


def test_arithmetic_example():
    norms = NormConstants(30.0, 100.0, 600.0)
    w = make_world(CFG, [(1, 0, MAIN, 100.0, 15.0, True), (0, 0, MAIN, 155.0, 10.0, False),
                         (2, 0, MAIN, 70.0, 20.0, False)])
    np.testing.assert_allclose(local_state_5(1, w, norms), [0.5, 1 / 3, 0.5, 2 / 3, 0.25],
                               rtol=1e-12)


def test_neighbours_cross_the_junction():
    w = make_world(CFG, [(0, 0, POST, 10.0, 12.0, False), (1, 0, MAIN, 590.0, 6.0, True)])
    s = local_state_5(1, w, NORMS)
    assert s[1] == pytest.approx(12 / 30) and s[2] == pytest.approx((20 - 5) / 120)


def test_headway_capped():
    w = make_world(CFG, [(0, 0, MAIN, 400.0, 0.0, False), (1, 0, MAIN, 10.0, 5.0, True)])
    assert local_state_5(1, w, NORMS)[2] == 1.0


def test_centralized_padding():
    roster = CentralizedRoster.empty(5)
    assert np.array_equal(centralized_state(make_world(CFG, []), roster, 5, NORMS), np.zeros(25))
    w = make_world(CFG, [(0, 0, MAIN, 300.0, 10.0, True), (1, 0, MAIN, 100.0, 10.0, True)])
    roster = roster.updated(w)
    s = centralized_state(w, roster, 5, NORMS)
    assert s.shape == (25,) and np.all(s[10:] == 0) and np.all(s[:10] > 0)
    vs = [(k, 0, MAIN, 500.0 - 60 * k, 10.0, True) for k in range(5)]
    w = make_world(CFG, vs)
    s = centralized_state(w, CentralizedRoster.empty(5).updated(w), 5, NORMS)
    assert s.shape == (25,) and np.count_nonzero(s.reshape(5, 5).any(axis=1)) == 5


def test_roster_fifo_by_entry_and_refill():
    vs = [(k, 0, MAIN, 500.0 - 60 * k, 10.0, True, 10 - k) for k in range(7)]
    w = make_world(CFG, vs)
    r = CentralizedRoster.empty(5).updated(w)
    # oldest entries first: vehicles 6, 5, 4, 3, 2
    assert r.slots == (6, 5, 4, 3, 2)
    w2 = make_world(CFG, [v for v in vs if v[0] != 4])
    r2 = r.updated(w2)
    assert r2.slots == (6, 5, 1, 3, 2)


def test_roster_eligible_filter():
    vs = [(k, 0, MAIN, 500.0 - 60 * k, 10.0, True, k) for k in range(3)]
    w = make_world(CFG, vs)
    r = CentralizedRoster.empty(5).updated(w, eligible=[1])
    assert r.slots == (1, None, None, None, None)
    assert r.updated(w, eligible=[]).slots == (None,) * 5


def test_roster_slot_mismatch():
    with pytest.raises(ValueError):
        centralized_state(make_world(CFG, []), CentralizedRoster.empty(3), 5, NORMS)


def test_merge_info_missing():
    w = make_world(CFG, [(0, 0, MAIN, 100.0, 10.0, True)])
    s = distributed_state(0, w, FeatureSet.of("merge_info"), NORMS)
    assert s[5:].tolist() == [1.0, 1.0]


def test_merge_info_nearest_ramp_vehicle():
    w = make_world(CFG, [(0, 0, MAIN, 100.0, 10.0, True), (1, 1, RAMP, 150.0, 6.0, False),
                         (2, 1, RAMP, 20.0, 9.0, False)])
    s = distributed_state(0, w, FeatureSet.of("merge_info"), NORMS)
    np.testing.assert_allclose(s[5:], [6 / 30, 50 / 600])


def test_dist_feature():
    w = make_world(CFG, [(0, 0, MAIN, 450.0, 10.0, True), (1, 0, MAIN, 600.0, 10.0, True),
                         (2, 0, POST, 50.0, 10.0, True)])
    f = FeatureSet.of("dist")
    assert distributed_state(0, w, f, NORMS)[5] == pytest.approx(0.25)
    assert distributed_state(1, w, f, NORMS)[5] == 0.0
    assert distributed_state(2, w, f, NORMS)[5] == 0.0


def test_congestion_feature():
    w = make_world(CFG, [(0, 0, MAIN, 100.0, 10.0, True), (1, 0, MAIN, 300.0, 6.0, False),
                         (2, 0, MAIN, 500.0, 12.0, False), (3, 0, POST, 50.0, 30.0, False)])
    f = FeatureSet.of("congestion")
    assert distributed_state(0, w, f, NORMS)[5] == pytest.approx(9 / 30)
    assert distributed_state(2, w, f, NORMS)[5] == 1.0  # nothing ahead before the junction


def test_feature_order_and_sizes():
    full = FeatureSet.full()
    assert full.names == ["dist", "merge_info", "congestion"] and full.size == 4
    assert FeatureSet.parse("none") == FeatureSet()
    assert FeatureSet.parse("congestion+dist").names == ["dist", "congestion"]
    assert str(FeatureSet.parse("dist+merge_info")) == "dist+merge_info"
    with pytest.raises(ValueError):
        FeatureSet.parse("speed")
    assert observation_size("distributed", features=FeatureSet.of("dist")) == 6
    assert observation_size("distributed", features=FeatureSet.of("dist", "merge_info")) == 8
    assert observation_size("distributed", features=full) == 9
    assert observation_size("centralized", 5) == 25


vehicle = st.tuples(st.sampled_from([(0, MAIN), (1, RAMP), (0, POST), (1, POST)]),
                    st.floats(0, 1), st.floats(0, 35), st.booleans(), st.integers(0, 50))


@st.composite
def worlds(draw):
    raw = draw(st.lists(vehicle, min_size=1, max_size=25))
    lengths = {MAIN: 600.0, RAMP: 200.0, POST: 100.0}
    vs = [(k, r, e, u * lengths[e], v, av, ent) for k, ((r, e), u, v, av, ent)
          in enumerate(raw)]
    return make_world(CFG, vs)


@given(worlds(), st.integers(1, 8),
       st.sets(st.sampled_from(list(Feature))))
def test_fuzzed_observations_in_unit_box(w, n_av, flags):
    roster = CentralizedRoster.empty(n_av).updated(w)
    s = centralized_state(w, roster, n_av, NORMS)
    assert s.shape == (5 * n_av,) and np.all((s >= 0) & (s <= 1))
    blocks = s.reshape(n_av, 5)
    for k, v in enumerate(roster.slots):
        if v is None:
            assert np.all(blocks[k] == 0)
    assert len(roster.active) == min(n_av, int(w.is_av.sum()))
    features = FeatureSet(frozenset(flags))
    for v in w.av_ids():
        d = distributed_state(v, w, features, NORMS)
        assert d.shape == (5 + features.size,) and np.all((d >= 0) & (d <= 1))


class RosterProbe:
    """IDM driving that tracks the centralized roster every step."""

    def __init__(self):
        self.history = []

    def reset(self, config):
        self.roster = CentralizedRoster.empty(config.n_av_max)

    def act(self, world, rng):
        self.roster = self.roster.updated(world)
        self.history.append((set(world.av_ids()), self.roster.slots))
        return {}


def test_fifo_slot_stability_over_episode():
    probe = RosterProbe()
    run_episode(probe, simple_merge_config(), 0)
    assigned = {}
    for live, slots in probe.history:
        for k, v in enumerate(slots):
            if v is not None:
                assert v in live
                assert assigned.setdefault(v, k) == k  # never moves
        # full roster whenever enough AVs are present
        assert sum(v is not None for v in slots) == min(len(slots), len(live))
    assert len(assigned) > 5
