"""Hand-built world states for tests."""
import numpy as np

from openmerge.engine import InflowSchedule, WorldState, _sorted_cols


def empty_schedule(n=0):
    return InflowSchedule(times=np.zeros(n), steps=np.zeros(n, dtype=np.int64),
                          routes=np.zeros(n, dtype=np.int64), is_av=np.zeros(n, dtype=bool),
                          rng_seed=0)


def make_world(cfg, vehicles, queues=((), ()), schedule=None):
    """vehicles: (vid, route, edge, pos, speed, is_av[, entry]) tuples."""
    n = len(vehicles)
    cols = {
        "vid": np.array([v[0] for v in vehicles], dtype=np.int64),
        "route": np.array([v[1] for v in vehicles], dtype=np.int64),
        "edge": np.array([v[2] for v in vehicles], dtype=np.int64),
        "pos": np.array([v[3] for v in vehicles], dtype=float),
        "speed": np.array([v[4] for v in vehicles], dtype=float),
        "entry": np.array([v[6] if len(v) > 6 else 0 for v in vehicles], dtype=np.int64),
        "is_av": np.array([v[5] for v in vehicles], dtype=bool),
    }
    sched = schedule if schedule is not None else empty_schedule(
        max([v[0] for v in vehicles] + [q for qq in queues for q in qq] + [-1]) + 1)
    return WorldState(cfg, sched, 0, len(sched), queues, _sorted_cols(cols), n, 0)
