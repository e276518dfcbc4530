"""Neural policies, controllers and the checkpoint format.

A policy is a tanh MLP whose last layer gives the mean of a diagonal
Gaussian over accelerations, with a state-independent ``log_std``.  The value
function is either a separate MLP of the same shape or a linear head on the
policy's last hidden layer (``share_layers``).

Checkpoint blob layout (all integers little-endian)::

    b"OMPP" | u32 version | u32 header length | header (UTF-8 JSON)
    | float64 arrays in the order listed under "arrays" in the header
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

import numpy as np

from .engine import MAIN, WorldState
from .network import ScenarioConfig
from .observation import (
    CentralizedRoster,
    FeatureSet,
    NormConstants,
    centralized_state,
    distributed_state,
)

HIDDEN = (100, 50, 25)
MAGIC = b"OMPP"
FORMAT_VERSION = 1
LOG_2PI = math.log(2.0 * math.pi)


class ParamsError(ValueError):
    """Malformed checkpoint or dimension mismatch."""


@dataclass(frozen=True, eq=False)
class PolicyParams:
    layer_sizes: tuple[int, ...]
    weights: tuple[np.ndarray, ...]  # (fan_in, fan_out) per layer
    biases: tuple[np.ndarray, ...]
    log_std: np.ndarray
    vf_weights: tuple[np.ndarray, ...]
    vf_biases: tuple[np.ndarray, ...]
    share_layers: bool = False
    # free-form description carried through checkpoints (kind, norms, ...)
    meta: Mapping = field(default_factory=dict)

    def __post_init__(self):
        sizes = self.layer_sizes
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise ParamsError("layer count does not match layer_sizes")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[k], sizes[k + 1]) or b.shape != (sizes[k + 1],):
                raise ParamsError(f"layer {k} has shapes {w.shape}, {b.shape}")
        if self.log_std.shape != (sizes[-1],) or not np.all(np.isfinite(self.log_std)):
            raise ParamsError("log_std must be finite with one entry per action")
        vf_in = sizes[-2] if self.share_layers else sizes[0]
        if self.vf_weights[0].shape[0] != vf_in or self.vf_weights[-1].shape[1] != 1:
            raise ParamsError("value function shapes do not fit the policy")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def arrays(self) -> list[np.ndarray]:
        """All parameter arrays in checkpoint order."""
        return [*self.weights, *self.biases, self.log_std, *self.vf_weights, *self.vf_biases]

    def with_arrays(self, arrays: list[np.ndarray]) -> "PolicyParams":
        nl = len(self.weights)
        nv = len(self.vf_weights)
        return PolicyParams(
            self.layer_sizes,
            tuple(arrays[:nl]),
            tuple(arrays[nl:2 * nl]),
            arrays[2 * nl],
            tuple(arrays[2 * nl + 1:2 * nl + 1 + nv]),
            tuple(arrays[2 * nl + 1 + nv:]),
            self.share_layers,
            self.meta,
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays])

    def from_flat(self, vec: np.ndarray) -> "PolicyParams":
        out, k = [], 0
        for a in self.arrays:
            out.append(np.array(vec[k:k + a.size], dtype=float).reshape(a.shape))
            k += a.size
        if k != len(vec):
            raise ParamsError(f"flat vector has {len(vec)} entries, expected {k}")
        return self.with_arrays(out)

    def with_meta(self, **meta) -> "PolicyParams":
        return PolicyParams(self.layer_sizes, self.weights, self.biases, self.log_std,
                            self.vf_weights, self.vf_biases, self.share_layers,
                            {**self.meta, **meta})


def _layer(rng, fan_in, fan_out, scale=1.0):
    w = rng.normal(0.0, scale / math.sqrt(fan_in), size=(fan_in, fan_out))
    return w, np.zeros(fan_out)


def init_params(input_dim: int, output_dim: int, rng: np.random.Generator,
                share_layers: bool = False, hidden: Iterable[int] = HIDDEN,
                log_std: float = 0.0, meta: Optional[Mapping] = None) -> PolicyParams:
    """Fresh parameters; the output layers start small so the initial policy is near zero."""
    sizes = (input_dim, *hidden, output_dim)
    ws, bs = [], []
    for k in range(len(sizes) - 1):
        last = k == len(sizes) - 2
        w, b = _layer(rng, sizes[k], sizes[k + 1], 0.01 if last else 1.0)
        ws.append(w)
        bs.append(b)
    if share_layers:
        vsizes = (sizes[-2], 1)
    else:
        vsizes = (input_dim, *hidden, 1)
    vws, vbs = [], []
    for k in range(len(vsizes) - 1):
        w, b = _layer(rng, vsizes[k], vsizes[k + 1])
        vws.append(w)
        vbs.append(b)
    return PolicyParams(sizes, tuple(ws), tuple(bs), np.full(output_dim, float(log_std)),
                        tuple(vws), tuple(vbs), share_layers, dict(meta or {}))


# ---------------------------------------------------------------------------
# forward pass

def _mlp(ws, bs, x):
    """Returns the output and the list of layer inputs (for backprop)."""
    acts = [x]
    for w, b in zip(ws[:-1], bs[:-1]):
        x = np.tanh(x @ w + b)
        acts.append(x)
    return x @ ws[-1] + bs[-1], acts


def forward(params: PolicyParams, obs: np.ndarray):
    """Batched forward pass: (means [B, out], values [B], cache)."""
    obs = np.asarray(obs, dtype=float)
    if obs.ndim != 2 or obs.shape[1] != params.input_dim:
        raise ParamsError(f"observation shape {obs.shape} does not match input_dim "
                          f"{params.input_dim}")
    mean, acts = _mlp(params.weights, params.biases, obs)
    if params.share_layers:
        vin = acts[-1]
    else:
        vin = obs
    value, vacts = _mlp(params.vf_weights, params.vf_biases, vin)
    return mean, value[:, 0], (acts, vacts)


def mlp_forward(params: PolicyParams, obs) -> tuple[np.ndarray, float]:
    """Single observation: (action mean, value)."""
    obs = np.asarray(obs, dtype=float)
    if obs.shape != (params.input_dim,):
        raise ParamsError(f"observation length {obs.shape} does not match input_dim "
                          f"{params.input_dim}")
    mean, value, _ = forward(params, obs[None, :])
    return mean[0], float(value[0])


def gaussian_log_prob(action, mean, log_std) -> np.ndarray:
    """Log-density per row, summed over the last axis."""
    z = (np.asarray(action) - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * LOG_2PI, axis=-1)


def sample_action(params: PolicyParams, obs, rng: np.random.Generator):
    mean, _ = mlp_forward(params, obs)
    action = mean + np.exp(params.log_std) * rng.standard_normal(len(mean))
    return action, float(gaussian_log_prob(action, mean, params.log_std))


def backward(params: PolicyParams, cache, d_mean: np.ndarray, d_value: np.ndarray,
             d_log_std: np.ndarray) -> PolicyParams:
    """Gradients of a scalar loss given its derivatives w.r.t. the outputs.

    Returned as a :class:`PolicyParams` whose arrays hold the gradients.
    """
    acts, vacts = cache
    d_value = np.asarray(d_value, dtype=float)[:, None]

    def back(ws, acts, d_out):
        gws, gbs = [None] * len(ws), [None] * len(ws)
        d = d_out
        for k in range(len(ws) - 1, -1, -1):
            gws[k] = acts[k].T @ d
            gbs[k] = d.sum(axis=0)
            d = d @ ws[k].T
            if k > 0:
                # acts[k] = tanh(pre_{k-1})
                d = d * (1.0 - acts[k] ** 2)
        # d is now the gradient w.r.t. the network input
        return gws, gbs, d

    gvw, gvb, d_vin = back(params.vf_weights, vacts, d_value)
    if params.share_layers:
        # the value head reads the last hidden layer; fold its gradient in there
        ws = params.weights
        gws, gbs = [None] * len(ws), [None] * len(ws)
        d = d_mean
        k = len(ws) - 1
        gws[k] = acts[k].T @ d
        gbs[k] = d.sum(axis=0)
        d = d @ ws[k].T + d_vin
        d = d * (1.0 - acts[k] ** 2)
        for k in range(len(ws) - 2, -1, -1):
            gws[k] = acts[k].T @ d
            gbs[k] = d.sum(axis=0)
            if k > 0:
                d = (d @ ws[k].T) * (1.0 - acts[k] ** 2)
    else:
        gws, gbs, _ = back(params.weights, acts, d_mean)
    return params.with_arrays([*gws, *gbs, np.asarray(d_log_std, dtype=float), *gvw, *gvb])


# ---------------------------------------------------------------------------
# serialization

def save_params(params: PolicyParams) -> bytes:
    arrays = params.arrays
    header = {
        "format_version": FORMAT_VERSION,
        "layer_sizes": list(params.layer_sizes),
        "flags": {"share_layers": params.share_layers},
        "arrays": [list(a.shape) for a in arrays],
        "n_weights": len(params.weights),
        "n_vf": len(params.vf_weights),
        "meta": dict(params.meta),
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    return MAGIC + struct.pack("<II", FORMAT_VERSION, len(hb)) + hb + body


def read_header(blob: bytes) -> dict:
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise ParamsError("not a policy checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != FORMAT_VERSION:
        raise ParamsError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParamsError(f"corrupt checkpoint header: {exc}") from None
    header["_offset"] = 12 + hlen
    return header


def load_params(blob: bytes, expected_input_dim: Optional[int] = None) -> PolicyParams:
    header = read_header(blob)
    sizes = tuple(int(s) for s in header["layer_sizes"])
    if expected_input_dim is not None and sizes[0] != expected_input_dim:
        raise ParamsError(f"checkpoint expects {sizes[0]} inputs, controller provides "
                          f"{expected_input_dim}")
    shapes = [tuple(s) for s in header["arrays"]]
    need = sum(int(np.prod(s)) for s in shapes) * 8
    body = blob[header["_offset"]:]
    if len(body) != need:
        raise ParamsError(f"checkpoint body has {len(body)} bytes, expected {need}")
    arrays, k = [], 0
    for s in shapes:
        n = int(np.prod(s)) * 8
        arrays.append(np.frombuffer(body[k:k + n], dtype="<f8").astype(float).reshape(s))
        k += n
    nl, nv = header["n_weights"], header["n_vf"]
    return PolicyParams(
        sizes,
        tuple(arrays[:nl]),
        tuple(arrays[nl:2 * nl]),
        arrays[2 * nl],
        tuple(arrays[2 * nl + 1:2 * nl + 1 + nv]),
        tuple(arrays[2 * nl + 1 + nv:]),
        bool(header["flags"]["share_layers"]),
        header.get("meta", {}),
    )


def params_equal(a: PolicyParams, b: PolicyParams) -> bool:
    """Bitwise equality of every array plus the structure."""
    if (a.layer_sizes, a.share_layers, dict(a.meta)) != (b.layer_sizes, b.share_layers,
                                                          dict(b.meta)):
        return False
    xa, xb = a.arrays, b.arrays
    return len(xa) == len(xb) and all(
        x.shape == y.shape and x.tobytes() == y.tobytes() for x, y in zip(xa, xb)
    )


def norms_from_meta(meta: Mapping) -> Optional[NormConstants]:
    n = meta.get("norms")
    return NormConstants(**n) if n else None


# ---------------------------------------------------------------------------
# controllers

@dataclass
class Decision:
    """What a learning controller did this step, for rollout collection."""

    obs: np.ndarray  # [agents, input_dim]
    action: np.ndarray  # [agents, output_dim]
    log_prob: np.ndarray  # [agents]
    value: np.ndarray  # [agents]
    agents: tuple  # vehicle ids (distributed) or ("team",)
    mask: Optional[np.ndarray] = None  # [output_dim] live slots (centralized)


class _Learned:
    """Shared machinery of the learned controllers."""

    def __init__(self, params: PolicyParams, norms: Optional[NormConstants],
                 deterministic: bool):
        self.params = params
        self._norms = norms
        self.deterministic = deterministic
        self.last: Optional[Decision] = None
        self.norms: Optional[NormConstants] = norms

    def reset(self, config: ScenarioConfig) -> None:
        self.norms = self._norms or norms_from_meta(self.params.meta) or \
            NormConstants.from_config(config)
        self.last = None

    def _draw(self, mean: np.ndarray, rng, mask=None):
        if self.deterministic:
            action = mean.copy()
        else:
            action = mean + np.exp(self.params.log_std) * rng.standard_normal(mean.shape)
        if mask is None:
            logp = gaussian_log_prob(action, mean, self.params.log_std)
        else:
            z = (action - mean) * np.exp(-self.params.log_std)
            terms = -0.5 * z * z - self.params.log_std - 0.5 * LOG_2PI
            logp = np.sum(terms * mask, axis=-1)
        return action, logp


class Centralized(_Learned):
    """One network maps the stacked states of up to ``n_av`` AVs to their actions.

    Slots are assigned first in, first out; AVs beyond ``n_av`` drive with the
    IDM until a slot frees up.  Log-probabilities cover the occupied slots
    only, since padded outputs never reach the road.
    """

    kind = "centralized"

    def __init__(self, params: PolicyParams, n_av: Optional[int] = None,
                 norms: Optional[NormConstants] = None, deterministic: bool = False):
        n_av = n_av if n_av is not None else params.output_dim
        if params.input_dim != 5 * n_av or params.output_dim != n_av:
            raise ParamsError(f"centralized controller for {n_av} AVs needs a "
                              f"{5 * n_av}->{n_av} policy, got "
                              f"{params.input_dim}->{params.output_dim}")
        super().__init__(params, norms, deterministic)
        self.n_av = n_av
        self.roster = CentralizedRoster.empty(n_av)

    def reset(self, config: ScenarioConfig) -> None:
        super().reset(config)
        self.roster = CentralizedRoster.empty(self.n_av)

    def act(self, world: WorldState, rng, eligible: Optional[Iterable[int]] = None
            ) -> dict[int, float]:
        self.roster = self.roster.updated(world, eligible)
        active = self.roster.active
        if not active:
            self.last = None
            return {}
        obs = centralized_state(world, self.roster, self.n_av, self.norms)[None, :]
        mean, value, _ = forward(self.params, obs)
        mask = np.zeros(self.n_av)
        for k, _v in active:
            mask[k] = 1.0
        action, logp = self._draw(mean, rng, mask)
        self.last = Decision(obs, action, logp, value, ("team",), mask)
        return {vid: float(action[0, k]) for k, vid in active}


class DistributedShared(_Learned):
    """The same network runs independently on each AV's own observation."""

    kind = "distributed"

    def __init__(self, params: PolicyParams, features: FeatureSet = FeatureSet(),
                 norms: Optional[NormConstants] = None, deterministic: bool = False):
        if params.input_dim != 5 + features.size or params.output_dim != 1:
            raise ParamsError(f"distributed controller with features {features} needs a "
                              f"{5 + features.size}->1 policy, got "
                              f"{params.input_dim}->{params.output_dim}")
        super().__init__(params, norms, deterministic)
        self.features = features

    def act(self, world: WorldState, rng, eligible: Optional[Iterable[int]] = None
            ) -> dict[int, float]:
        ids = world.av_ids()
        if eligible is not None:
            keep = set(eligible)
            ids = [v for v in ids if v in keep]
        if not ids:
            self.last = None
            return {}
        obs = np.stack([distributed_state(v, world, self.features, self.norms) for v in ids])
        mean, value, _ = forward(self.params, obs)
        action, logp = self._draw(mean, rng)
        self.last = Decision(obs, action, logp, value, tuple(ids))
        return {v: float(action[j, 0]) for j, v in enumerate(ids)}


class Windowed:
    """Runs ``inner`` only for AVs inside a window around the junction.

    The window spans ``before`` meters upstream of the junction to ``after``
    meters downstream (half-open, so ``(0, 0)`` is empty).  AVs outside it
    drive with the IDM.
    """

    def __init__(self, inner, window: tuple[float, float]):
        if not isinstance(inner, (Centralized, DistributedShared)):
            raise TypeError("Windowed wraps a Centralized or DistributedShared controller")
        before, after = window
        if before < 0 or after < 0:
            raise ValueError("window offsets must be nonnegative")
        self.inner = inner
        self.window = (float(before), float(after))

    @property
    def kind(self) -> str:
        return self.inner.kind

    @property
    def last(self) -> Optional[Decision]:
        return self.inner.last

    def reset(self, config: ScenarioConfig) -> None:
        before, after = self.window
        net = config.network
        if before > net.main_pre_merge.length or after > net.post_merge.length:
            raise ValueError(f"window {self.window} exceeds network {net.name!r}")
        self.inner.reset(config)

    def inside(self, world: WorldState) -> list[int]:
        before, after = self.window
        x = world.x
        mask = world.is_av & (world.route == MAIN) & (x >= -before) & (x < after)
        return [int(v) for v in world.vid[mask]]

    def act(self, world: WorldState, rng) -> dict[int, float]:
        return self.inner.act(world, rng, eligible=self.inside(world))


class EntryBlocker:
    """Scripted manipulation: the first AV stops near the entrance for a while.

    The first AV to enter brakes as hard as allowed right after entering,
    waits ``dwell`` seconds at standstill, then accelerates at the maximum
    rate for the rest of its trip (speed limit and safety rule still apply).
    ``dwell=0`` leaves it to the IDM, so the run equals the baseline.
    """

    def __init__(self, dwell: float = 100.0):
        if dwell < 0:
            raise ValueError("dwell must be >= 0")
        self.dwell = float(dwell)

    def reset(self, config: ScenarioConfig) -> None:
        self.config = config
        self.target: Optional[int] = None
        self.stopped_at: Optional[int] = None

    def act(self, world: WorldState, rng) -> dict[int, float]:
        if self.dwell == 0:
            return {}
        if self.target is None:
            avs = world.av_ids()
            if not avs:
                return {}
            self.target = min(avs, key=lambda v: (int(world.entry[world.index_of[v]]), v))
        i = world.index_of.get(self.target)
        if i is None:
            return {}
        bounds = self.config.bounds
        if self.stopped_at is None and world.speed[i] == 0.0:
            self.stopped_at = world.time
        if self.stopped_at is not None and \
                (world.time - self.stopped_at) * self.config.dt >= self.dwell:
            return {self.target: bounds.accel_max}
        return {self.target: -bounds.decel_max}
