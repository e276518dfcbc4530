"""Discrete-time world evolution for the merge network.

Per step: queue scheduled arrivals, insert from the entry queues, arbitrate
the junction, compute accelerations (IDM for humans and uncontrolled AVs,
clamped commands for controlled AVs), integrate, and remove vehicles that
leave the end of the post-merge edge.

Vehicle state is stored column-wise in numpy arrays sorted by edge
(post-merge, main, ramp) and, within an edge, by decreasing position.  A
common longitudinal coordinate ``x`` is used for gaps across the junction:
``x = position`` on the post-merge edge and ``x = position - edge.length``
(negative) before it, so every gap is ``x_leader - x_follower - L``.

Junction model
--------------
Both incoming edges have equal priority.  Vehicles within
:func:`arbitration_zone` meters of the junction are served first come, first
served in the order they entered that zone (the *zone order*); vehicles from
both edges entering in the same step are settled by
:func:`~openmerge.dynamics.resolve_merge_priority`.  A vehicle may cross only
once every earlier vehicle of the other edge has crossed with its rear
bumper; until then it treats a point one vehicle length before the junction
as a standing virtual leader.  The zone is at least one full stopping distance long, so a yielding
vehicle can always hold that line.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, Optional, Protocol

import numpy as np

from . import _kernel
from .dynamics import (
    MIN_GAP,
    VEHICLE_LENGTH,
    Vehicle,
    resolve_merge_priority,
    safe_current_speed,
)
from .network import EdgeKind, Route, ScenarioConfig

L = VEHICLE_LENGTH
POST, MAIN, RAMP = int(EdgeKind.POST_MERGE), int(EdgeKind.MAIN_PRE_MERGE), int(EdgeKind.RAMP)
# canonical sort rank per edge kind: post first, then main, then ramp
_RANK = np.array([1, 2, 0])


class SimulationError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# inflows

@dataclass(frozen=True)
class InflowSchedule:
    """Arrivals sorted by time; vehicle id == index in this schedule."""

    times: np.ndarray  # seconds
    steps: np.ndarray  # timestep of arrival
    routes: np.ndarray
    is_av: np.ndarray
    rng_seed: int

    def __len__(self):
        return len(self.steps)

    @property
    def arrivals(self) -> list[tuple[int, int, str]]:
        return [
            (int(s), int(r), "av" if a else "human")
            for s, r, a in zip(self.steps, self.routes, self.is_av)
        ]


JITTER = (0.8, 1.2)


def av_period(av_fraction: float) -> int:
    if av_fraction <= 0:
        return 0
    return max(1, int(np.floor(1.0 / av_fraction + 1e-9)))


def schedule_inflows(config: ScenarioConfig, seed: int) -> InflowSchedule:
    """Jittered arrivals for both routes; every k-th main arrival is an AV."""
    main_ss, ramp_ss = np.random.SeedSequence(seed).spawn(2)
    t_end = config.horizon * config.dt
    times, routes, avs = [], [], []
    for route, rate, ss in ((Route.MAIN, config.main_inflow, main_ss),
                            (Route.RAMP, config.ramp_inflow, ramp_ss)):
        if rate <= 0:
            continue
        headway = 3600.0 / rate
        rng = np.random.default_rng(ss)
        n_max = int(t_end / (JITTER[0] * headway)) + 2
        t = np.cumsum(headway * rng.uniform(*JITTER, size=n_max))
        t = t[t < t_end]
        av = np.zeros(len(t), dtype=bool)
        period = av_period(config.av_fraction)
        if route == Route.MAIN and period:
            av[period - 1::period] = True
        times.append(t)
        routes.append(np.full(len(t), int(route), dtype=np.int64))
        avs.append(av)
    if times:
        t = np.concatenate(times)
        r = np.concatenate(routes)
        a = np.concatenate(avs)
        order = np.lexsort((r, t))
        t, r, a = t[order], r[order], a[order]
    else:
        t, r, a = np.zeros(0), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=bool)
    steps = np.floor(t / config.dt + 1e-9).astype(np.int64)
    return InflowSchedule(times=t, steps=steps, routes=r, is_av=a, rng_seed=seed)


# ---------------------------------------------------------------------------
# world state

_COLUMNS = ("vid", "route", "edge", "pos", "speed", "entry", "is_av")


_CACHED = ("index_of", "x", "neighbors")


class WorldState:
    """Immutable-by-convention snapshot of the network at one timestep."""

    def __init__(self, config: ScenarioConfig, schedule: InflowSchedule, time: int,
                 next_arrival: int, queues: tuple[tuple[int, ...], tuple[int, ...]],
                 cols: dict, cumulative_entered: int, cumulative_exited: int,
                 zone_order: tuple[int, ...] = (), controlled: frozenset = frozenset()):
        self.config = config
        self.schedule = schedule
        self.time = time
        self.next_arrival = next_arrival
        self.entry_queues = queues
        self.cols = cols
        self.cumulative_entered = cumulative_entered
        self.cumulative_exited = cumulative_exited
        self.zone_order = zone_order
        self.controlled = controlled

    # column shortcuts
    vid = property(lambda self: self.cols["vid"])
    route = property(lambda self: self.cols["route"])
    edge = property(lambda self: self.cols["edge"])
    pos = property(lambda self: self.cols["pos"])
    speed = property(lambda self: self.cols["speed"])
    entry = property(lambda self: self.cols["entry"])
    is_av = property(lambda self: self.cols["is_av"])

    def __len__(self) -> int:
        return len(self.cols["vid"])

    @property
    def n_vehicles(self) -> int:
        return len(self)

    @cached_property
    def index_of(self) -> dict[int, int]:
        return {int(v): i for i, v in enumerate(self.cols["vid"])}

    @cached_property
    def x(self) -> np.ndarray:
        """Signed coordinate relative to the junction (negative before it)."""
        net = self.config.network
        pre_len = np.array([net.main_pre_merge.length, net.ramp.length, 0.0])
        return self.cols["pos"] - pre_len[self.cols["edge"]]

    def vehicle(self, vid: int) -> Vehicle:
        i = self.index_of[int(vid)]
        c = self.cols
        return Vehicle(
            id=int(c["vid"][i]),
            cls="av" if c["is_av"][i] else "human",
            route=int(c["route"][i]),
            edge=int(c["edge"][i]),
            position=float(c["pos"][i]),
            speed=float(c["speed"][i]),
            entry_time=int(c["entry"][i]),
            controlled=int(c["vid"][i]) in self.controlled,
        )

    @property
    def vehicles(self) -> list[Vehicle]:
        return [self.vehicle(v) for v in self.cols["vid"]]

    def vehicles_on(self, edge: int) -> list[Vehicle]:
        return [self.vehicle(v) for v, e in zip(self.cols["vid"], self.cols["edge"]) if e == edge]

    def av_ids(self) -> list[int]:
        return [int(v) for v in self.cols["vid"][self.cols["is_av"]]]

    @cached_property
    def neighbors(self) -> "Neighbors":
        return _route_neighbors(self)

    def min_gap(self) -> float:
        g = self.neighbors.leader_gap
        return float(g.min()) if len(g) else float("inf")


def initial_world(config: ScenarioConfig, seed: int,
                  schedule: Optional[InflowSchedule] = None) -> WorldState:
    schedule = schedule if schedule is not None else schedule_inflows(config, seed)
    cols = {
        "vid": np.zeros(0, dtype=np.int64),
        "route": np.zeros(0, dtype=np.int64),
        "edge": np.zeros(0, dtype=np.int64),
        "pos": np.zeros(0),
        "speed": np.zeros(0),
        "entry": np.zeros(0, dtype=np.int64),
        "is_av": np.zeros(0, dtype=bool),
    }
    return WorldState(config, schedule, 0, 0, ((), ()), cols, 0, 0)


def _sorted_cols(cols: dict) -> dict:
    order = np.lexsort((-cols["pos"], _RANK[cols["edge"]]))
    return {k: v[order] for k, v in cols.items()}


@dataclass(frozen=True)
class Neighbors:
    """Route neighbours: nearest vehicle ahead / behind along the route."""

    leader: np.ndarray  # index or -1
    leader_gap: np.ndarray  # inf when no leader
    follower: np.ndarray
    follower_gap: np.ndarray


def _route_neighbors(world: WorldState) -> Neighbors:
    cnt = np.bincount(world.edge, minlength=3)
    return Neighbors(*_kernel.route_neighbors(world.x, int(cnt[POST]), int(cnt[MAIN]), L))


@dataclass(frozen=True)
class StepEvents:
    entries: int = 0
    exits: int = 0
    entered_ids: tuple[int, ...] = ()
    exit_ids: tuple[int, ...] = ()


# ---------------------------------------------------------------------------
# insertion

def _queue_arrivals(world: WorldState) -> tuple[int, tuple]:
    s = world.schedule
    k = world.next_arrival
    queues = [list(world.entry_queues[0]), list(world.entry_queues[1])]
    while k < len(s) and s.steps[k] <= world.time:
        queues[int(s.routes[k])].append(k)
        k += 1
    return k, (tuple(queues[0]), tuple(queues[1]))


def insertion_speed(world: WorldState, route: int) -> Optional[float]:
    """Speed a vehicle would enter with on ``route`` now, or None if blocked."""
    cfg = world.config
    net = cfg.network
    first = MAIN if route == int(Route.MAIN) else RAMP
    e = world.edge
    on_edge = np.flatnonzero(e == first)
    if len(on_edge):
        i = on_edge[-1]  # smallest position on the entry edge
        gap = world.pos[i] - L
        vl = world.speed[i]
    else:
        on_post = np.flatnonzero(e == POST)
        if len(on_post):
            i = on_post[-1]
            gap = net.edges[first].length + world.pos[i] - L
            vl = world.speed[i]
        else:
            gap, vl = np.inf, 0.0
    idm = cfg.idm
    if gap < idm.s0:
        return None
    v = min(net.edges[first].speed_limit, (gap - idm.s0) / idm.T_headway)
    v = min(v, safe_current_speed(gap, vl, cfg.bounds.decel_max, cfg.dt))
    if v < 0:
        return None
    return float(v)


def try_insert(world: WorldState, route: int) -> WorldState:
    """Insert the head of ``route``'s entry queue if the entry is clear."""
    q = world.entry_queues[route]
    if not q:
        return world
    v = insertion_speed(world, route)
    if v is None:
        return world
    vid = q[0]
    queues = list(world.entry_queues)
    queues[route] = q[1:]
    first = MAIN if route == int(Route.MAIN) else RAMP
    new = {
        "vid": np.array([vid], dtype=np.int64),
        "route": np.array([route], dtype=np.int64),
        "edge": np.array([first], dtype=np.int64),
        "pos": np.array([0.0]),
        "speed": np.array([v]),
        "entry": np.array([world.time], dtype=np.int64),
        "is_av": np.array([bool(world.schedule.is_av[vid])]),
    }
    cols = _sorted_cols({k: np.concatenate([world.cols[k], new[k]]) for k in _COLUMNS})
    return WorldState(world.config, world.schedule, world.time, world.next_arrival,
                      tuple(queues), cols, world.cumulative_entered + 1,
                      world.cumulative_exited, world.zone_order, world.controlled)


# ---------------------------------------------------------------------------
# junction arbitration

JUNCTION_CLEAR = L


def arbitration_zone(config: ScenarioConfig) -> float:
    """Length of the approach zone in which both incoming edges interact."""
    v = config.speed_limit
    return L + _kernel.stopping_distance(v, config.bounds.decel_max, config.dt) + v * config.dt + 1.0


def _update_zone_order(world: WorldState, zone: float) -> tuple[int, ...]:
    """First-come-first-served order of vehicles in the approach zone."""
    e = world.edge
    idx = world.index_of
    x = world.x
    # a crossed vehicle holds the junction until its rear has cleared it
    keep = [v for v in world.zone_order if v in idx and x[idx[v]] < JUNCTION_CLEAR]
    kept = set(keep)
    dj = -world.x
    pre = np.flatnonzero((e != POST) & (dj <= zone))
    new = [int(world.vid[i]) for i in pre if int(world.vid[i]) not in kept]
    if not new:
        return tuple(keep)
    if len(new) > 1:
        new = _order_simultaneous(world, new)
    return tuple(keep + new)


def _order_simultaneous(world: WorldState, new: list[int]) -> list[int]:
    """Order vehicles entering the zone in the same step.

    Each edge keeps its own order; across edges the head-to-head contest is
    decided by :func:`resolve_merge_priority`.
    """
    idx = world.index_of
    e = world.edge
    dj = -world.x
    lanes = {
        k: sorted((v for v in new if e[idx[v]] == k), key=lambda v: dj[idx[v]])
        for k in (MAIN, RAMP)
    }
    out = []
    m, r = lanes[MAIN], lanes[RAMP]
    while m and r:
        first = resolve_merge_priority(world.vehicle(m[0]), world.vehicle(r[0])).proceeds
        out.append((m if first.id == m[0] else r).pop(0))
    return out + m + r


def _stop_lines(world: WorldState, zone_order: tuple[int, ...]) -> np.ndarray:
    """Gap to the junction stop line per vehicle (inf when free to cross).

    A zone vehicle must hold a stop line one vehicle length before the
    junction while any vehicle of the other route is ahead of it in the zone
    order.  Vehicles already past the junction keep their place in the order
    until their rear has cleared it, but never get a stop line themselves.
    """
    stop_gap = np.full(len(world), np.inf)
    if zone_order:
        idx = world.index_of
        e = world.edge
        r = world.route
        x = world.x
        seen = [False, False]
        for v in zone_order:
            i = idx[v]
            k = int(r[i])
            if e[i] != POST and seen[1 - k]:
                stop_gap[i] = -x[i] - L
            seen[k] = True
    return stop_gap


def step(world: WorldState, av_actions: Mapping[int, float],
         config: Optional[ScenarioConfig] = None) -> tuple[WorldState, StepEvents]:
    """Advance the world by one timestep."""
    cfg = config if config is not None else world.config
    for vid in av_actions:
        i = world.index_of.get(int(vid))
        if i is None or not world.is_av[i]:
            raise SimulationError(f"action for unknown or non-AV vehicle id {vid}")

    # (1) arrivals and insertion
    k, queues = _queue_arrivals(world)
    w = WorldState(cfg, world.schedule, world.time, k, queues, world.cols,
                   world.cumulative_entered, world.cumulative_exited, world.zone_order)
    # same columns, so the derived caches carry over
    for name in _CACHED:
        if name in world.__dict__:
            w.__dict__[name] = world.__dict__[name]
    entered = []
    for route in (int(Route.MAIN), int(Route.RAMP)):
        q = w.entry_queues[route]
        before = w.cumulative_entered
        w = try_insert(w, route)
        if w.cumulative_entered > before:
            entered.append(int(q[0]))

    n = len(w)
    dt = cfg.dt
    bounds = cfg.bounds
    vlim = cfg.speed_limit
    zone_order = _update_zone_order(w, arbitration_zone(cfg)) if n else ()

    if n:
        # (2)-(5) IDM with stop lines, AV commands, clamps, safety rule, integration
        action = np.full(n, np.nan)
        controlled = []
        for vid, acc in av_actions.items():
            if not np.isfinite(acc):
                raise SimulationError(f"non-finite action {acc!r} for vehicle {vid}")
            action[w.index_of[int(vid)]] = acc
            controlled.append(int(vid))
        nb = w.neighbors
        idm = cfg.idm
        net = cfg.network
        new_speed, new_pos, edge = _kernel.advance(
            w.pos, w.speed, w.edge, nb.leader, nb.leader_gap,
            _stop_lines(w, zone_order), action,
            np.array([net.main_pre_merge.length, net.ramp.length, np.inf]),
            net.post_merge.length,
            idm.v0 if idm.v0 is not None else vlim, idm.T_headway, idm.a_max, idm.b_comf,
            idm.delta, idm.s0, bounds.accel_max, bounds.decel_max, dt, vlim, MIN_GAP,
        )
        # (6) exits
        gone = (edge == POST) & (new_pos > net.post_merge.length)
        exit_ids = tuple(int(v) for v in w.vid[gone])
        keep = ~gone
        cols = {
            "vid": w.vid[keep], "route": w.route[keep], "edge": edge[keep],
            "pos": new_pos[keep], "speed": new_speed[keep], "entry": w.entry[keep],
            "is_av": w.is_av[keep],
        }
        cols = _sorted_cols(cols)
        controlled_set = frozenset(controlled)
    else:
        cols = w.cols
        exit_ids = ()
        controlled_set = frozenset()

    nxt = WorldState(cfg, w.schedule, w.time + 1, w.next_arrival, w.entry_queues, cols,
                     w.cumulative_entered, w.cumulative_exited + len(exit_ids),
                     zone_order, controlled_set)
    events = StepEvents(entries=len(entered), exits=len(exit_ids),
                        entered_ids=tuple(entered), exit_ids=exit_ids)
    return nxt, events


# ---------------------------------------------------------------------------
# episodes

class Controller(Protocol):
    def reset(self, config: ScenarioConfig) -> None: ...

    def act(self, world: WorldState, rng: np.random.Generator) -> dict[int, float]: ...


@dataclass
class EpisodeLog:
    """Per-step aggregates of one episode; the only input the metrics need."""

    dt: float
    horizon: int
    n: list = field(default_factory=list)
    sum_speed: list = field(default_factory=list)
    entries: list = field(default_factory=list)
    exits: list = field(default_factory=list)
    min_gap: list = field(default_factory=list)
    # vehicle id -> [entry_step, exit_step or None]
    vehicles: dict = field(default_factory=dict)

    def record(self, world: WorldState, events: StepEvents) -> None:
        self.n.append(len(world))
        self.sum_speed.append(float(world.speed.sum()))
        self.entries.append(events.entries)
        self.exits.append(events.exits)
        self.min_gap.append(world.min_gap())
        t = world.time - 1
        for v in events.entered_ids:
            self.vehicles[v] = [t, None]
        for v in events.exit_ids:
            self.vehicles[v][1] = t

    @property
    def steps(self) -> int:
        return len(self.n)

    @property
    def total_entered(self) -> int:
        return int(sum(self.entries))

    @property
    def total_exited(self) -> int:
        return int(sum(self.exits))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time", "n_t", "sum_speed", "entries", "exits"])
        for t, row in enumerate(zip(self.n, self.sum_speed, self.entries, self.exits)):
            w.writerow([t, row[0], repr(row[1]), row[2], row[3]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, dt: float) -> "EpisodeLog":
        rows = list(csv.DictReader(io.StringIO(text)))
        log = cls(dt=dt, horizon=len(rows))
        for r in rows:
            log.n.append(int(r["n_t"]))
            log.sum_speed.append(float(r["sum_speed"]))
            log.entries.append(int(r["entries"]))
            log.exits.append(int(r["exits"]))
        return log


class IdmOnly:
    """Every vehicle, AVs included, drives with the IDM."""

    def reset(self, config: ScenarioConfig) -> None:
        pass

    def act(self, world: WorldState, rng) -> dict[int, float]:
        return {}


def action_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))


def run_episode(controller, config: ScenarioConfig, seed: int,
                on_step=None) -> EpisodeLog:
    """Run ``config.horizon`` steps; deterministic in (controller, config, seed)."""
    if hasattr(controller, "reset"):
        controller.reset(config)
    rng = action_rng(seed)
    world = initial_world(config, seed)
    log = EpisodeLog(dt=config.dt, horizon=config.horizon)
    for _ in range(config.horizon):
        actions = controller.act(world, rng)
        world, events = step(world, actions, config)
        log.record(world, events)
        if on_step is not None:
            on_step(world, events)
    return log
