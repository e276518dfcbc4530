"""PPO with generalized advantage estimation, written directly on numpy.

Rollouts are whole episodes.  A centralized controller produces one
trajectory per episode with the team reward; a distributed controller
produces one trajectory per AV, ending when the AV leaves (terminal) or when
the episode hits its horizon (truncated, bootstrapped from the value).
"""
from __future__ import annotations

import dataclasses
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .engine import InflowSchedule, WorldState, action_rng, initial_world, step
from .metrics import DistributedMixed, RewardSpec, distributed_reward, global_reward
from .network import ScenarioConfig
from .observation import FeatureSet, NormConstants, distributed_state
from .policy import (
    LOG_2PI,
    Centralized,
    DistributedShared,
    PolicyParams,
    backward,
    forward,
    init_params,
)

log = logging.getLogger(__name__)

WORKERS_ENV = "OPENMERGE_WORKERS"


@dataclass(frozen=True)
class PpoConfig:
    lr: float = 5e-4
    # "constant", or "piecewise": halved at 50% and again at 80% of the iterations
    lr_schedule: str = "constant"
    gamma: float = 0.99
    gae_lambda: float = 0.97
    clip_param: float = 0.3
    vf_clip_param: float = 1e6
    vf_loss_coeff: float = 1.0
    kl_coeff: float = 0.2
    kl_target: float = 0.01
    entropy_coeff: float = 0.0
    sgd_minibatch_size: int = 128
    train_batch_size: int = 40000
    num_sgd_iter: int = 10
    iterations: int = 500
    # evaluate the mean action every this many iterations and keep the best
    # evaluated params; 0 selects by training return instead
    eval_every: int = 0
    eval_episodes: int = 4
    share_layers: bool = False
    init_log_std: float = 0.0
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0 <= self.gae_lambda <= 1:
            raise ValueError("gae_lambda must lie in [0, 1]")
        if not self.clip_param > 0:
            raise ValueError("clip_param must be > 0")
        if self.sgd_minibatch_size <= 0 or self.train_batch_size <= 0:
            raise ValueError("batch sizes must be positive")
        if self.sgd_minibatch_size > self.train_batch_size:
            raise ValueError("sgd_minibatch_size must not exceed train_batch_size")
        if self.lr_schedule not in ("constant", "piecewise"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.iterations < 0 or self.num_sgd_iter <= 0:
            raise ValueError("iterations must be >= 0 and num_sgd_iter > 0")

    def lr_at(self, iteration: int) -> float:
        if self.lr_schedule == "constant" or self.iterations == 0:
            return self.lr
        frac = iteration / self.iterations
        return self.lr * (0.25 if frac >= 0.8 else 0.5 if frac >= 0.5 else 1.0)

    def with_(self, **changes) -> "PpoConfig":
        return dataclasses.replace(self, **changes)


_CENTRAL_PAPER = PpoConfig()
_DIST_PAPER = PpoConfig(
    lr_schedule="piecewise", gamma=0.998, gae_lambda=0.95, clip_param=0.2,
    vf_clip_param=1e8, vf_loss_coeff=0.5, kl_coeff=0.01, entropy_coeff=1e-3,
    sgd_minibatch_size=4096, train_batch_size=60000, share_layers=True,
)

PROFILES = {
    ("centralized", "paper"): _CENTRAL_PAPER,
    ("centralized", "desk"): _CENTRAL_PAPER.with_(train_batch_size=4000, iterations=100,
                                                  eval_every=5),
    ("distributed", "paper"): _DIST_PAPER,
    ("distributed", "desk"): _DIST_PAPER.with_(train_batch_size=4000, sgd_minibatch_size=1024,
                                               iterations=100, eval_every=5),
    ("centralized", "smoke"): _CENTRAL_PAPER.with_(
        train_batch_size=400, sgd_minibatch_size=64, iterations=20, lr=3e-3),
    ("distributed", "smoke"): _DIST_PAPER.with_(
        train_batch_size=400, sgd_minibatch_size=64, iterations=20, lr=3e-3),
}


def profile(kind: str, name: str) -> PpoConfig:
    try:
        return PROFILES[(kind, name)]
    except KeyError:
        raise ValueError(f"no {name!r} profile for {kind!r} policies") from None


# ---------------------------------------------------------------------------
# rollouts

@dataclass
class Trajectory:
    obs: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    values: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    masks: list = field(default_factory=list)
    done: bool = False
    last_value: float = 0.0

    def __len__(self):
        return len(self.rewards)


@dataclass
class RolloutBatch:
    obs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray  # True on the last transition of a terminated trajectory
    masks: np.ndarray  # live action dimensions
    advantages: np.ndarray
    returns: np.ndarray
    episode_returns: list  # one per episode (team return, or mean over agents)
    episode_seeds: list

    def __len__(self):
        return len(self.rewards)


def make_controller(kind: str, params: PolicyParams, features: FeatureSet = FeatureSet(),
                    norms: Optional[NormConstants] = None, deterministic: bool = False):
    if kind == "centralized":
        return Centralized(params, norms=norms, deterministic=deterministic)
    if kind == "distributed":
        return DistributedShared(params, features, norms=norms, deterministic=deterministic)
    raise ValueError(f"unknown policy kind {kind!r}")


def single_av_world(config: ScenarioConfig, seed: int) -> WorldState:
    """Smoke-task world: exactly one AV, arriving at t = 0 on the main road."""
    schedule = InflowSchedule(
        times=np.zeros(1), steps=np.zeros(1, dtype=np.int64),
        routes=np.zeros(1, dtype=np.int64), is_av=np.ones(1, dtype=bool), rng_seed=seed,
    )
    return initial_world(config, seed, schedule)


def run_training_episode(kind: str, params: PolicyParams, config: ScenarioConfig,
                         reward: RewardSpec, seed: int, features: FeatureSet = FeatureSet(),
                         world_factory: Optional[Callable] = None,
                         deterministic: bool = False) -> tuple[list[Trajectory], float]:
    """One episode; returns the trajectories and the episode return.

    The episode return is the team return for a centralized controller and
    the mean return over agents for a distributed one.
    """
    ctrl = make_controller(kind, params, features, deterministic=deterministic)
    ctrl.reset(config)
    rng = action_rng(seed)
    world = (world_factory or initial_world)(config, seed)
    per_agent = not isinstance(reward, DistributedMixed) and kind == "distributed"

    if kind == "centralized":
        traj = Trajectory()
        total = 0.0
        for _ in range(config.horizon):
            actions = ctrl.act(world, rng)
            d = ctrl.last
            world, events = step(world, actions, config)
            r = global_reward(reward, world, events)
            total += r
            if d is not None:
                traj.obs.append(d.obs[0])
                traj.actions.append(d.action[0])
                traj.log_probs.append(float(d.log_prob[0]))
                traj.values.append(float(d.value[0]))
                traj.masks.append(d.mask)
                traj.rewards.append(r)
            elif len(traj):
                # no AV to act this step; credit the reward to the last decision
                traj.rewards[-1] += r
        if len(traj):
            ctrl.act(world, rng)
            traj.last_value = float(ctrl.last.value[0]) if ctrl.last is not None else 0.0
        return ([traj] if len(traj) else []), total

    open_: dict[int, Trajectory] = {}
    finished: list[Trajectory] = []
    ones = np.ones(params.output_dim)
    for _ in range(config.horizon):
        actions = ctrl.act(world, rng)
        d = ctrl.last
        world, events = step(world, actions, config)
        team = None if not per_agent else global_reward(reward, world, events)
        if d is None:
            continue
        exited = set(events.exit_ids)
        for j, vid in enumerate(d.agents):
            t = open_.setdefault(vid, Trajectory())
            t.obs.append(d.obs[j])
            t.actions.append(d.action[j])
            t.log_probs.append(float(d.log_prob[j]))
            t.values.append(float(d.value[j]))
            t.masks.append(ones)
            if per_agent:
                r = team
            else:
                r = distributed_reward(vid, world, events, reward)
            t.rewards.append(r)
            if vid in exited:
                t.done = True
                finished.append(open_.pop(vid))
    # truncated agents bootstrap from the value of their final observation
    if open_:
        live = [v for v in open_ if v in world.index_of]
        if live:
            obs = np.stack([distributed_state(v, world, features, ctrl.norms) for v in live])
            _, vals, _ = forward(params, obs)
            for v, val in zip(live, vals):
                open_[v].last_value = float(val)
        finished.extend(open_[v] for v in sorted(open_))
    rets = [sum(t.rewards) for t in finished]
    return finished, (float(np.mean(rets)) if rets else 0.0)


def _episode_job(args):
    return run_training_episode(*args)


def n_workers() -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        return max(1, int(env))
    return max(1, os.cpu_count() or 1)


def compute_gae(rewards, values, last_value: float, done: bool, gamma: float,
                lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Advantages and returns for one trajectory.

    ``done`` means the trajectory terminated, so nothing is bootstrapped past
    its end; otherwise ``last_value`` stands in for the value after it.
    """
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    if r.shape != v.shape:
        raise ValueError(f"rewards and values differ in length: {len(r)} vs {len(v)}")
    n = len(r)
    adv = np.zeros(n)
    next_v = 0.0 if done else float(last_value)
    acc = 0.0
    for t in range(n - 1, -1, -1):
        delta = r[t] + gamma * next_v - v[t]
        acc = delta + gamma * lam * acc
        adv[t] = acc
        next_v = v[t]
    return adv, adv + v


def collect_rollouts(kind: str, params: PolicyParams, config: ScenarioConfig,
                     reward: RewardSpec, n_transitions: int, seed_base: int,
                     ppo: PpoConfig, features: FeatureSet = FeatureSet(),
                     world_factory: Optional[Callable] = None,
                     workers: Optional[int] = None) -> RolloutBatch:
    """Run episodes with seeds ``seed_base, seed_base+1, ...`` until enough transitions."""
    workers = workers or n_workers()
    trajs: list[Trajectory] = []
    ep_returns, seeds = [], []
    seed = seed_base
    count = 0
    while count < n_transitions:
        if workers > 1 and world_factory is None:
            # guess how many episodes are still needed; extra ones are kept
            per_ep = max(1, count // max(1, len(seeds))) if seeds else config.horizon
            k = max(1, min(workers, math.ceil((n_transitions - count) / per_ep)))
            jobs = [(kind, params, config, reward, seed + j, features) for j in range(k)]
            with ProcessPoolExecutor(max_workers=workers) as ex:
                results = list(ex.map(_episode_job, jobs))
        else:
            k = 1
            results = [run_training_episode(kind, params, config, reward, seed, features,
                                            world_factory)]
        for j, (ts, ret) in enumerate(results):
            trajs.extend(ts)
            count += sum(len(t) for t in ts)
            ep_returns.append(ret)
            seeds.append(seed + j)
        seed += k
        if count == 0 and len(seeds) >= 50:
            raise RuntimeError("episodes produce no decisions; is any AV ever present?")
    return _assemble(trajs, ep_returns, seeds, ppo)


def _assemble(trajs, ep_returns, seeds, ppo: PpoConfig) -> RolloutBatch:
    advs, rets, dones = [], [], []
    for t in trajs:
        a, r = compute_gae(t.rewards, t.values, t.last_value, t.done, ppo.gamma,
                           ppo.gae_lambda)
        advs.append(a)
        rets.append(r)
        d = np.zeros(len(t), dtype=bool)
        d[-1] = t.done
        dones.append(d)
    cat = np.concatenate
    return RolloutBatch(
        obs=np.array([o for t in trajs for o in t.obs]),
        actions=np.array([a for t in trajs for a in t.actions]),
        log_probs=np.array([lp for t in trajs for lp in t.log_probs]),
        values=np.array([v for t in trajs for v in t.values]),
        rewards=np.array([r for t in trajs for r in t.rewards]),
        dones=cat(dones),
        masks=np.array([m for t in trajs for m in t.masks]),
        advantages=cat(advs),
        returns=cat(rets),
        episode_returns=ep_returns,
        episode_seeds=seeds,
    )


# ---------------------------------------------------------------------------
# loss and gradients

@dataclass(frozen=True)
class LossTerms:
    total: float
    policy: float
    value: float
    entropy: float
    kl: float


def ppo_loss_and_grad(params: PolicyParams, obs, actions, old_logp, old_mean, old_log_std,
                      advantages, returns, old_values, masks, ppo: PpoConfig,
                      kl_coeff: float) -> tuple[LossTerms, PolicyParams]:
    """Mean PPO loss over the given transitions and its exact gradient."""
    B = len(obs)
    mean, value, cache = forward(params, obs)
    ls = params.log_std
    inv_std = np.exp(-ls)
    z = (actions - mean) * inv_std
    logp = np.sum(masks * (-0.5 * z * z - ls - 0.5 * LOG_2PI), axis=1)
    ratio = np.exp(logp - old_logp)
    eps = ppo.clip_param
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps)
    unclipped_wins = ratio * advantages <= clipped * advantages
    surr = np.where(unclipped_wins, ratio * advantages, clipped * advantages)
    # d(-surr)/d logp
    g_logp = -np.where(unclipped_wins, ratio * advantages, 0.0)

    # KL(old || new), diagonal Gaussians, live dims only
    var_old = np.exp(2.0 * old_log_std)
    var_new = np.exp(2.0 * ls)
    dmu = mean - old_mean
    kl_dims = ls - old_log_std + (var_old + dmu * dmu) / (2.0 * var_new) - 0.5
    kl = np.sum(masks * kl_dims, axis=1)

    entropy = np.sum(masks * (ls + 0.5 * (1.0 + LOG_2PI)), axis=1)

    c = ppo.vf_clip_param
    v_clipped = old_values + np.clip(value - old_values, -c, c)
    l1 = (value - returns) ** 2
    l2 = (v_clipped - returns) ** 2
    first = l1 >= l2
    vf_loss = np.where(first, l1, l2)
    inside = np.abs(value - old_values) < c
    g_value = np.where(first, 2.0 * (value - returns), 2.0 * (v_clipped - returns) * inside)

    total = np.mean(-surr + kl_coeff * kl + ppo.vf_loss_coeff * vf_loss
                    - ppo.entropy_coeff * entropy)

    # gradients w.r.t. the mean and log_std
    dlogp_dmu = masks * z * inv_std
    dlogp_dls = masks * (z * z - 1.0)
    dkl_dmu = masks * dmu / var_new
    dkl_dls = masks * (1.0 - (var_old + dmu * dmu) / var_new)
    d_mean = (g_logp[:, None] * dlogp_dmu + kl_coeff * dkl_dmu) / B
    d_ls = (np.sum(g_logp[:, None] * dlogp_dls + kl_coeff * dkl_dls, axis=0)
            - ppo.entropy_coeff * masks.sum(axis=0)) / B
    d_value = ppo.vf_loss_coeff * g_value / B
    grad = backward(params, cache, d_mean, d_value, d_ls)
    terms = LossTerms(float(total), float(np.mean(-surr)), float(np.mean(vf_loss)),
                      float(np.mean(entropy)), float(np.mean(kl)))
    return terms, grad


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(theta: np.ndarray, grad: np.ndarray, state: AdamState, lr: float,
              betas=(0.9, 0.999), eps=1e-8) -> np.ndarray:
    state.t += 1
    b1, b2 = betas
    state.m = b1 * state.m + (1 - b1) * grad
    state.v = b2 * state.v + (1 - b2) * grad * grad
    mhat = state.m / (1 - b1 ** state.t)
    vhat = state.v / (1 - b2 ** state.t)
    return theta - lr * mhat / (np.sqrt(vhat) + eps)


@dataclass(frozen=True)
class UpdateStats:
    kl: float
    kl_coeff: float
    policy_loss: float
    value_loss: float
    entropy: float
    explained_variance: float
    lr: float


class NonFiniteLoss(FloatingPointError):
    pass


def normalized_advantages(adv: np.ndarray) -> np.ndarray:
    std = adv.std()
    return (adv - adv.mean()) / (std if std > 1e-8 else 1.0)


def ppo_update(params: PolicyParams, batch: RolloutBatch, ppo: PpoConfig, kl_coeff: float,
               adam: AdamState, rng: np.random.Generator, lr: Optional[float] = None
               ) -> tuple[PolicyParams, UpdateStats, float]:
    """Several epochs of minibatch Adam on the PPO loss.

    Returns the new params, statistics, and the adapted KL coefficient.
    """
    lr = ppo.lr if lr is None else lr
    n = len(batch)
    adv = normalized_advantages(batch.advantages)
    old_mean, _, _ = forward(params, batch.obs)
    old_ls = params.log_std.copy()
    theta = params.flat()
    cur = params
    for _ in range(ppo.num_sgd_iter):
        order = rng.permutation(n)
        for lo in range(0, n, ppo.sgd_minibatch_size):
            idx = order[lo:lo + ppo.sgd_minibatch_size]
            terms, grad = ppo_loss_and_grad(
                cur, batch.obs[idx], batch.actions[idx], batch.log_probs[idx],
                old_mean[idx], old_ls, adv[idx], batch.returns[idx], batch.values[idx],
                batch.masks[idx], ppo, kl_coeff,
            )
            g = grad.flat()
            if not (math.isfinite(terms.total) and np.all(np.isfinite(g))):
                raise NonFiniteLoss(f"non-finite PPO loss {terms} on minibatch of {len(idx)}")
            theta = adam_step(theta, g, adam, lr, ppo.adam_betas, ppo.adam_eps)
            cur = cur.from_flat(theta)
    final, _ = ppo_loss_and_grad(cur, batch.obs, batch.actions, batch.log_probs, old_mean,
                                 old_ls, adv, batch.returns, batch.values, batch.masks, ppo,
                                 kl_coeff)
    if final.kl > 2.0 * ppo.kl_target:
        new_coeff = kl_coeff * 2.0
    elif final.kl < ppo.kl_target / 2.0:
        new_coeff = kl_coeff * 0.5
    else:
        new_coeff = kl_coeff
    _, values, _ = forward(cur, batch.obs)
    var = np.var(batch.returns)
    ev = float(1.0 - np.var(batch.returns - values) / var) if var > 0 else 0.0
    stats = UpdateStats(final.kl, new_coeff, final.policy, final.value, final.entropy, ev, lr)
    return cur, stats, new_coeff


# ---------------------------------------------------------------------------
# training loop

@dataclass(frozen=True)
class CurveRow:
    iteration: int
    mean_return: float
    kl: float
    kl_coeff: float
    policy_loss: float
    value_loss: float
    entropy: float
    explained_variance: float
    transitions: int
    eval_return: float = math.nan


@dataclass
class TrainResult:
    best_params: PolicyParams
    best_return: float
    best_iteration: int
    final_params: PolicyParams
    curve: list

    def curve_csv(self) -> str:
        cols = [f.name for f in dataclasses.fields(CurveRow)]
        lines = [",".join(cols)]
        for row in self.curve:
            lines.append(",".join(repr(getattr(row, c)) for c in cols))
        return "\n".join(lines) + "\n"


TRAIN_SEED_OFFSET = 1_000_000
# checkpoint selection seeds; disjoint from training seeds and the usual 0..99
SELECT_SEED_OFFSET = 900_000


def evaluate_return(kind: str, params: PolicyParams, config: ScenarioConfig,
                    reward: RewardSpec, seeds, features: FeatureSet = FeatureSet(),
                    world_factory: Optional[Callable] = None) -> float:
    """Mean return of the mean-action policy over ``seeds``."""
    rets = [run_training_episode(kind, params, config, reward, s, features, world_factory,
                                 deterministic=True)[1] for s in seeds]
    return float(np.mean(rets))


def policy_dims(kind: str, config: ScenarioConfig, features: FeatureSet) -> tuple[int, int]:
    if kind == "centralized":
        return 5 * config.n_av_max, config.n_av_max
    if kind == "distributed":
        return 5 + features.size, 1
    raise ValueError(f"unknown policy kind {kind!r}")


def train(kind: str, config: ScenarioConfig, reward: RewardSpec, ppo: PpoConfig, seed: int,
          features: FeatureSet = FeatureSet(), world_factory: Optional[Callable] = None,
          workers: Optional[int] = None, on_iteration: Optional[Callable] = None
          ) -> TrainResult:
    """Collect, estimate advantages, update; keep the params with the best return.

    Training episodes use seeds far above the usual evaluation range.  Each
    iteration's return is that of the params that generated its rollouts.
    With ``ppo.eval_every`` set, the kept params are instead the ones with
    the best mean-action return on a fixed set of selection seeds.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7A11]))
    in_dim, out_dim = policy_dims(kind, config, features)
    norms = NormConstants.from_config(config)
    meta = {
        "kind": kind,
        "features": features.names,
        "n_av": config.n_av_max if kind == "centralized" else None,
        "norms": dataclasses.asdict(norms),
    }
    params = init_params(in_dim, out_dim, rng, share_layers=ppo.share_layers,
                         log_std=ppo.init_log_std, meta=meta)
    adam = AdamState.zeros(len(params.flat()))
    kl_coeff = ppo.kl_coeff
    curve = []
    best = (params, -math.inf, -1)
    seed_base = TRAIN_SEED_OFFSET * (seed + 1)
    select_seeds = range(SELECT_SEED_OFFSET, SELECT_SEED_OFFSET + ppo.eval_episodes)
    if ppo.eval_every and ppo.iterations:
        best = (params, evaluate_return(kind, params, config, reward, select_seeds, features,
                                        world_factory), -1)
    for it in range(ppo.iterations):
        batch = collect_rollouts(kind, params, config, reward, ppo.train_batch_size,
                                 seed_base, ppo, features, world_factory, workers)
        seed_base += len(batch.episode_seeds)
        mean_ret = float(np.mean(batch.episode_returns))
        if not ppo.eval_every and mean_ret > best[1]:
            best = (params, mean_ret, it)
        params, stats, kl_coeff = ppo_update(params, batch, ppo, kl_coeff, adam, rng,
                                             lr=ppo.lr_at(it))
        eval_ret = math.nan
        if ppo.eval_every and ((it + 1) % ppo.eval_every == 0 or it + 1 == ppo.iterations):
            eval_ret = evaluate_return(kind, params, config, reward, select_seeds, features,
                                       world_factory)
            if eval_ret > best[1]:
                best = (params, eval_ret, it + 1)
        row = CurveRow(it, mean_ret, stats.kl, stats.kl_coeff, stats.policy_loss,
                       stats.value_loss, stats.entropy, stats.explained_variance, len(batch),
                       eval_ret)
        curve.append(row)
        log.info("iter %d return %.4f kl %.4f ev %.3f", it, mean_ret, stats.kl,
                 stats.explained_variance)
        if on_iteration is not None:
            on_iteration(row, params)
    return TrainResult(best[0], best[1], best[2], params, curve)
