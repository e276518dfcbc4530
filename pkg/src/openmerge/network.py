"""Road-network topology, benchmark scenarios and scenario config files.

A merge network is three single-lane edges: the main road before the
junction, the on-ramp, and the shared segment after the junction.  The
junction sits at position 0 of the post-merge edge.  Positions on an edge are
measured from its upstream end to the front bumper of a vehicle.
"""
from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

try:
    import tomllib as tomli
except ImportError:  # Python < 3.11
    import tomli
import tomli_w

from .dynamics import ActionBounds, IdmParams

DEFAULT_SPEED_LIMIT = 30.0


class EdgeKind(enum.IntEnum):
    MAIN_PRE_MERGE = 0
    RAMP = 1
    POST_MERGE = 2


class Route(enum.IntEnum):
    MAIN = 0
    RAMP = 1


class ScenarioError(ValueError):
    """Raised for malformed or invalid scenario files."""


@dataclass(frozen=True)
class Edge:
    id: str
    length: float
    speed_limit: float
    kind: EdgeKind

    def __post_init__(self):
        if not self.length > 0:
            raise ScenarioError(f"edge {self.id!r}: length must be > 0, got {self.length}")
        if not self.speed_limit > 0:
            raise ScenarioError(
                f"edge {self.id!r}: speed_limit must be > 0, got {self.speed_limit}"
            )


@dataclass(frozen=True)
class RoadNetwork:
    """Single-lane merge: main_pre_merge and ramp join into post_merge."""

    name: str
    main_pre_merge: Edge
    ramp: Edge
    post_merge: Edge

    def __post_init__(self):
        kinds = [e.kind for e in self.edges]
        if sorted(kinds) != sorted(EdgeKind):
            raise ScenarioError(f"network {self.name!r} needs exactly one edge of each kind")
        if len({e.id for e in self.edges}) != 3:
            raise ScenarioError(f"network {self.name!r}: duplicate edge ids")

    @property
    def edges(self) -> tuple[Edge, Edge, Edge]:
        # indexable by EdgeKind
        return (self.main_pre_merge, self.ramp, self.post_merge)

    @property
    def routes(self) -> dict[Route, tuple[str, str]]:
        return {
            Route.MAIN: (self.main_pre_merge.id, self.post_merge.id),
            Route.RAMP: (self.ramp.id, self.post_merge.id),
        }

    def edge(self, edge_id: Union[str, EdgeKind]) -> Edge:
        if isinstance(edge_id, EdgeKind):
            return self.edges[edge_id]
        for e in self.edges:
            if e.id == edge_id:
                return e
        raise KeyError(f"unknown edge id {edge_id!r}")

    def first_edge(self, route: Route) -> Edge:
        return self.main_pre_merge if route == Route.MAIN else self.ramp

    def route_length(self, route: Route) -> float:
        return self.first_edge(route).length + self.post_merge.length

    @property
    def speed_limit(self) -> float:
        return max(e.speed_limit for e in self.edges)

    @property
    def d_max(self) -> float:
        """Distance from the main entry to the junction."""
        return self.main_pre_merge.length


def _merge_network(name, main, ramp, post, speed_limit=DEFAULT_SPEED_LIMIT) -> RoadNetwork:
    return RoadNetwork(
        name=name,
        main_pre_merge=Edge("main", float(main), float(speed_limit), EdgeKind.MAIN_PRE_MERGE),
        ramp=Edge("ramp", float(ramp), float(speed_limit), EdgeKind.RAMP),
        post_merge=Edge("post", float(post), float(speed_limit), EdgeKind.POST_MERGE),
    )


def build_simple_merge(speed_limit: float = DEFAULT_SPEED_LIMIT) -> RoadNetwork:
    """600 m main road, 200 m on-ramp, 100 m after the junction."""
    return _merge_network("simple_merge", 600.0, 200.0, 100.0, speed_limit)


def build_i696_merge(speed_limit: float = DEFAULT_SPEED_LIMIT) -> RoadNetwork:
    """Straightened single-lane version of the I-696 merge."""
    return _merge_network("i696_merge", 3131.0, 1878.56, 5077.7, speed_limit)


NETWORKS = {
    "simple_merge": build_simple_merge,
    "i696_merge": build_i696_merge,
}


def distance_to_junction(network: RoadNetwork, edge: Union[str, EdgeKind], position: float) -> float:
    """Remaining distance along the route to the merge junction (0 once past it)."""
    e = network.edge(edge)
    if not 0.0 <= position <= e.length:
        raise ValueError(f"position {position} outside edge {e.id!r} [0, {e.length}]")
    if e.kind == EdgeKind.POST_MERGE:
        return 0.0
    return e.length - position


@dataclass(frozen=True)
class ScenarioConfig:
    network: RoadNetwork
    main_inflow: float
    ramp_inflow: float
    av_fraction: float
    horizon: int = 2000
    dt: float = 0.5
    n_av_max: int = 5
    # (meters before the junction, meters after it)
    window: Optional[tuple[float, float]] = None
    seeds: tuple[int, ...] = tuple(range(100))
    h_max: float = 120.0
    idm: IdmParams = field(default_factory=IdmParams)
    bounds: ActionBounds = field(default_factory=ActionBounds)

    def __post_init__(self):
        _check(self.main_inflow >= 0, "main_inflow must be >= 0")
        _check(self.ramp_inflow >= 0, "ramp_inflow must be >= 0")
        _check(0.0 <= self.av_fraction <= 1.0, "av_fraction must lie in [0, 1]")
        _check(self.horizon > 0, "horizon must be > 0")
        _check(self.dt > 0, "dt must be > 0")
        _check(self.n_av_max >= 1, "n_av_max must be >= 1")
        _check(self.h_max > 0, "h_max must be > 0")
        _check(len(self.seeds) > 0, "seeds must be nonempty")
        _check(len(set(self.seeds)) == len(self.seeds), "seeds must be duplicate-free")
        if self.window is not None:
            before, after = self.window
            _check(before >= 0 and after >= 0, "window offsets must be nonnegative")
            _check(
                before <= self.network.main_pre_merge.length
                and after <= self.network.post_merge.length,
                "window must lie within the network",
            )

    @property
    def speed_limit(self) -> float:
        return self.network.speed_limit

    def with_(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)


def _check(cond: bool, message: str) -> None:
    if not cond:
        raise ScenarioError(f"invalid scenario: {message}")


def simple_merge_config(**overrides) -> ScenarioConfig:
    base = dict(
        network=build_simple_merge(), main_inflow=2000.0, ramp_inflow=200.0, av_fraction=0.1
    )
    base.update(overrides)
    return ScenarioConfig(**base)


def i696_config(**overrides) -> ScenarioConfig:
    base = dict(
        network=build_i696_merge(),
        main_inflow=2000.0,
        ramp_inflow=200.0,
        av_fraction=0.1,
        window=(600.0, 100.0),
    )
    base.update(overrides)
    return ScenarioConfig(**base)


# ---------------------------------------------------------------------------
# config files

_KNOWN_KEYS = {
    "network", "main_inflow", "ramp_inflow", "av_fraction", "horizon", "dt",
    "n_av_max", "window", "seeds", "h_max", "idm", "bounds",
}
_NETWORK_KEYS = {"name", "main_pre_merge", "ramp", "post_merge", "speed_limit"}


def parse_scenario(text: str, source: str = "<string>") -> ScenarioConfig:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ScenarioError(f"{source}: parse error: {exc}") from exc
    return _from_dict(raw, source)


def load_scenario(path: Union[str, Path]) -> ScenarioConfig:
    path = Path(path)
    return parse_scenario(path.read_text(), source=str(path))


def _field_error(source, key, message):
    return ScenarioError(f"{source}: field {key!r}: {message}")


def _from_dict(raw: dict, source: str) -> ScenarioConfig:
    unknown = set(raw) - _KNOWN_KEYS
    if unknown:
        raise _field_error(source, sorted(unknown)[0], "unknown key")
    for key in ("network", "main_inflow", "ramp_inflow", "av_fraction"):
        if key not in raw:
            raise _field_error(source, key, "missing required key")

    net_raw = raw["network"]
    if isinstance(net_raw, str):
        if net_raw not in NETWORKS:
            raise _field_error(source, "network", f"unknown network {net_raw!r}")
        network = NETWORKS[net_raw]()
    elif isinstance(net_raw, dict):
        bad = set(net_raw) - _NETWORK_KEYS
        if bad:
            raise _field_error(source, f"network.{sorted(bad)[0]}", "unknown key")
        try:
            network = _merge_network(
                net_raw.get("name", "custom"),
                net_raw["main_pre_merge"],
                net_raw["ramp"],
                net_raw["post_merge"],
                net_raw.get("speed_limit", DEFAULT_SPEED_LIMIT),
            )
        except KeyError as exc:
            raise _field_error(source, f"network.{exc.args[0]}", "missing required key") from None
    else:
        raise _field_error(source, "network", "expected a name or a table of edge lengths")

    kwargs: dict = {"network": network}
    for key, conv in (
        ("main_inflow", float), ("ramp_inflow", float), ("av_fraction", float),
        ("horizon", int), ("dt", float), ("n_av_max", int), ("h_max", float),
    ):
        if key in raw:
            try:
                kwargs[key] = conv(raw[key])
            except (TypeError, ValueError):
                raise _field_error(source, key, f"expected a number, got {raw[key]!r}") from None
    if "window" in raw:
        w = raw["window"]
        if not (isinstance(w, list) and len(w) == 2):
            raise _field_error(source, "window", "expected [before, after] in meters")
        kwargs["window"] = (float(w[0]), float(w[1]))
    if "seeds" in raw:
        kwargs["seeds"] = _parse_seeds(raw["seeds"], source)
    if "idm" in raw:
        kwargs["idm"] = IdmParams(**{k: float(v) for k, v in raw["idm"].items()})
    if "bounds" in raw:
        kwargs["bounds"] = ActionBounds(**{k: float(v) for k, v in raw["bounds"].items()})
    return ScenarioConfig(**kwargs)


def _parse_seeds(value, source) -> tuple[int, ...]:
    if isinstance(value, list):
        return tuple(int(s) for s in value)
    if isinstance(value, dict) and {"start", "stop"} <= set(value):
        return tuple(range(int(value["start"]), int(value["stop"])))
    raise _field_error(source, "seeds", "expected a list or {start, stop}")


def scenario_to_dict(config: ScenarioConfig) -> dict:
    net = config.network
    out = {
        "network": {
            "name": net.name,
            "main_pre_merge": net.main_pre_merge.length,
            "ramp": net.ramp.length,
            "post_merge": net.post_merge.length,
            "speed_limit": net.speed_limit,
        },
        "main_inflow": config.main_inflow,
        "ramp_inflow": config.ramp_inflow,
        "av_fraction": config.av_fraction,
        "horizon": config.horizon,
        "dt": config.dt,
        "n_av_max": config.n_av_max,
        "seeds": _seeds_to_toml(config.seeds),
        "h_max": config.h_max,
        # v0 = None (follow the speed limit) is expressed by leaving it out
        "idm": {k: v for k, v in dataclasses.asdict(config.idm).items() if v is not None},
        "bounds": dataclasses.asdict(config.bounds),
    }
    if config.window is not None:
        out["window"] = list(config.window)
    return out


def _seeds_to_toml(seeds: tuple[int, ...]):
    if seeds and seeds == tuple(range(seeds[0], seeds[0] + len(seeds))):
        return {"start": seeds[0], "stop": seeds[0] + len(seeds)}
    return list(seeds)


def dump_scenario(config: ScenarioConfig) -> str:
    return tomli_w.dumps(scenario_to_dict(config))
