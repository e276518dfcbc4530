"""Experiment harness: ``baseline``, ``train``, ``eval`` and ``manipulate``.

Every command writes a machine-readable CSV and a rendered text table into
``--out``.  Files are written atomically and contain no timestamps, so a
rerun with identical inputs reproduces them byte for byte.  Each table row
carries the scenario, checkpoint and seed-list hashes plus a config echo.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import os
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .engine import IdmOnly, run_episode
from .metrics import (
    DistributedMixed, MetricsReport, Outflow, RewardSpec, intervals_disjoint, metric_avg_speed,
    metric_inflow, metric_outflow, parse_reward, reward_to_str,
)
from .network import (
    ScenarioConfig, dump_scenario, i696_config, parse_scenario,
    simple_merge_config,
)
from .observation import FeatureSet, observation_size
from .policy import (
    Centralized, DistributedShared, EntryBlocker, PolicyParams, Windowed, load_params,
    save_params,
)
from .trainer import PpoConfig, n_workers, profile, train

BUILTIN_SCENARIOS = {"simple_merge": simple_merge_config, "i696": i696_config}
CONTROLLER_KINDS = ("idm", "blocker", "centralized", "distributed")
EVAL_NOTE = "evaluation uses the mean action of the policy (no sampling)"


class CliError(ValueError):
    pass


# ---------------------------------------------------------------------------
# experiment description


@dataclass(frozen=True)
class ControllerSpec:
    """``idm``, ``blocker[:DWELL]``, ``centralized[:CKPT]`` or ``distributed[:CKPT]``."""

    kind: str
    arg: Optional[str] = None

    @classmethod
    def parse(cls, text: str) -> "ControllerSpec":
        kind, _, arg = text.strip().partition(":")
        if kind not in CONTROLLER_KINDS:
            raise CliError(f"unknown controller {kind!r}; choose from {list(CONTROLLER_KINDS)}")
        if kind == "idm" and arg:
            raise CliError("the idm controller takes no argument")
        if kind == "blocker" and arg:
            try:
                float(arg)
            except ValueError:
                raise CliError(f"blocker dwell must be a number of seconds, got {arg!r}") from None
        return cls(kind, arg or None)

    def __str__(self) -> str:
        return self.kind if self.arg is None else f"{self.kind}:{self.arg}"


@dataclass(frozen=True)
class ExperimentSpec:
    scenario_path: str
    scenario_text: str
    config: ScenarioConfig
    controller: ControllerSpec
    reward: Optional[RewardSpec]
    seeds: tuple
    out: Path
    features: FeatureSet = FeatureSet()
    window: Optional[tuple] = None

    @property
    def scenario_hash(self) -> str:
        return sha256(self.scenario_text.encode())

    @property
    def seeds_hash(self) -> str:
        return sha256(",".join(map(str, self.seeds)).encode())


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def parse_seeds(text: str) -> tuple:
    """``"0-99"`` (inclusive), ``"0:100"`` (half-open) or a comma list ``"1,4,7"``."""
    seeds: list[int] = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        m = re.fullmatch(r"(\d+)([:-])(\d+)|(\d+)", part)
        if m is None:
            raise CliError(f"cannot parse seed list {text!r}")
        if m.group(4) is not None:
            seeds.append(int(m.group(4)))
        else:
            lo, hi = int(m.group(1)), int(m.group(3))
            seeds += range(lo, hi + (m.group(2) == "-"))
    if not seeds:
        raise CliError("seed list is empty")
    if len(set(seeds)) != len(seeds):
        raise CliError("seed list has duplicates")
    return tuple(seeds)


def read_scenario(name: str) -> tuple[str, ScenarioConfig]:
    """Load a scenario TOML file, or a built-in scenario by name."""
    if name in BUILTIN_SCENARIOS and not Path(name).exists():
        cfg = BUILTIN_SCENARIOS[name]()
        return dump_scenario(cfg), cfg
    path = Path(name)
    if not path.is_file():
        raise CliError(f"scenario file {name!r} not found (built-ins: "
                       f"{sorted(BUILTIN_SCENARIOS)})")
    text = path.read_text()
    return text, parse_scenario(text, source=str(path))


def parse_window(text: Optional[str], config: ScenarioConfig) -> Optional[tuple]:
    """``None``/``"auto"`` takes the scenario window, ``"none"`` disables it."""
    if text is None or text == "auto":
        return config.window
    if text == "none":
        return None
    try:
        before, after = (float(v) for v in text.split(","))
    except ValueError:
        raise CliError(f"window must be BEFORE,AFTER in meters, got {text!r}") from None
    return (before, after)


def spec_from_args(args) -> ExperimentSpec:
    text, cfg = read_scenario(args.scenario)
    seeds = parse_seeds(args.seeds) if args.seeds else tuple(cfg.seeds)
    controller = ControllerSpec.parse(args.controller)
    reward = parse_reward(args.reward) if args.reward else None
    if controller.arg and controller.kind in ("centralized", "distributed") \
            and args.command != "train" and not Path(controller.arg).is_file():
        raise CliError(f"checkpoint {controller.arg!r} not found")
    return ExperimentSpec(
        scenario_path=args.scenario, scenario_text=text, config=cfg, controller=controller,
        reward=reward, seeds=seeds, out=Path(args.out),
        features=FeatureSet.parse(args.features),
        window=parse_window(args.window, cfg),
    )


# ---------------------------------------------------------------------------
# output


def write_atomic(path: Path, data: str | bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data.encode() if isinstance(data, str) else data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def read_csv(path: Path) -> list[dict]:
    if not path.exists():
        return []
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def render_table(rows: Sequence[dict], title: str, notes: Sequence[str] = ()) -> str:
    """Text table with outflow, inflow and average speed as mean +- 95% CI."""
    header = ["controller", "outflow (veh/h)", "inflow (veh/h)", "avg speed (m/s)", "n"]
    body = []
    for r in rows:
        f = {k: float(r[k]) for k in ("outflow", "outflow_ci", "inflow", "inflow_ci",
                                      "avg_speed", "avg_speed_ci")}
        body.append([r["label"],
                     f"{f['outflow']:.2f} ± {f['outflow_ci']:.2f}",
                     f"{f['inflow']:.2f} ± {f['inflow_ci']:.2f}",
                     f"{f['avg_speed']:.2f} ± {f['avg_speed_ci']:.2f}",
                     str(r["n"])])
    widths = [max(len(c), *(len(b[k]) for b in body)) for k, c in enumerate(header)]
    line = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    out = [title, line(header), line(["-" * w for w in widths])]
    out += [line(b) for b in body]
    out += [""] + [f"# {n}" for n in notes]
    for r in rows:
        out.append(f"# {r['label']}: scenario {r['scenario_sha256'][:12]}, "
                   f"checkpoint {(r['checkpoint_sha256'] or '-')[:12]}, "
                   f"seeds {r['seeds_sha256'][:12]}")
    return "\n".join(out) + "\n"


def report_row(label: str, report: MetricsReport, spec: ExperimentSpec,
               checkpoint_hash: str = "", extra: Optional[dict] = None) -> dict:
    row = {"label": label, **report.as_row()}
    row.update({
        "scenario": spec.scenario_path,
        "scenario_sha256": spec.scenario_hash,
        "checkpoint_sha256": checkpoint_hash,
        "seeds": f"{spec.seeds[0]}..{spec.seeds[-1]} ({len(spec.seeds)})",
        "seeds_sha256": spec.seeds_hash,
        "config": json.dumps(extra or {}, sort_keys=True),
    })
    return row


def upsert_results(out: Path, rows: Sequence[dict], title: str,
                   notes: Sequence[str] = ()) -> list[dict]:
    """Add rows to ``results.csv``/``results.txt``, replacing rows with the same label."""
    old = [r for r in read_csv(out / "results.csv") if r["label"] not in {r["label"] for r in rows}]
    merged = old + [dict(r) for r in rows]
    write_atomic(out / "results.csv", to_csv(merged))
    write_atomic(out / "results.txt", render_table(merged, title, notes))
    return merged


def per_seed_rows(seeds, logs) -> list[dict]:
    return [{"seed": s, "outflow": metric_outflow(g), "inflow": metric_inflow(g),
             "avg_speed": metric_avg_speed(g), "entered": g.total_entered,
             "exited": g.total_exited} for s, g in zip(seeds, logs)]


# ---------------------------------------------------------------------------
# evaluation


def _episode(job):
    controller, config, seed = job
    return run_episode(controller, config, seed)


def evaluate(controller, config: ScenarioConfig, seeds: Sequence[int], workers: Optional[int] = None):
    """Episode logs for ``seeds``, in seed order; parallel over seeds when workers > 1."""
    workers = n_workers() if workers is None else workers
    order = sorted(seeds)
    jobs = [(controller, config, s) for s in order]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            logs = list(pool.map(_episode, jobs))
    else:
        logs = [_episode(j) for j in jobs]
    return order, logs


def load_checkpoint(path: str) -> tuple[PolicyParams, str]:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"checkpoint {path!r} not found")
    blob = p.read_bytes()
    return load_params(blob), sha256(blob)


def build_learned(spec: ExperimentSpec, params: PolicyParams, deterministic: bool = True):
    """Centralized or distributed controller from a checkpoint, windowed when requested."""
    kind = spec.controller.kind
    meta_kind = params.meta.get("kind")
    if meta_kind and meta_kind != kind:
        raise CliError(f"checkpoint holds a {meta_kind} policy, not {kind}")
    if kind == "centralized":
        expected = observation_size("centralized", spec.config.n_av_max)
        if params.input_dim != expected:
            raise CliError(f"checkpoint input dim {params.input_dim} does not match "
                           f"{spec.config.n_av_max} AV slots ({expected})")
        inner = Centralized(params, n_av=spec.config.n_av_max, deterministic=deterministic)
    else:
        features = FeatureSet.of(*params.meta["features"]) if "features" in params.meta \
            else spec.features
        expected = observation_size("distributed", features=features)
        if params.input_dim != expected:
            raise CliError(f"checkpoint input dim {params.input_dim} does not match features "
                           f"{features} ({expected})")
        inner = DistributedShared(params, features, deterministic=deterministic)
    return Windowed(inner, spec.window) if spec.window is not None else inner


def cmd_baseline(spec: ExperimentSpec, workers: Optional[int] = None) -> MetricsReport:
    seeds, logs = evaluate(IdmOnly(), spec.config, spec.seeds, workers)
    report = MetricsReport.from_logs(logs)
    write_atomic(spec.out / "baseline_per_seed.csv", to_csv(per_seed_rows(seeds, logs)))
    upsert_results(spec.out, [report_row("idm", report, spec, extra={"controller": "idm"})],
                   f"Baseline on {spec.config.network.name}")
    return report


def cmd_eval(spec: ExperimentSpec, workers: Optional[int] = None) -> MetricsReport:
    kind = spec.controller.kind
    ckpt_hash = ""
    extra = {"controller": str(spec.controller)}
    if kind == "idm":
        controller = IdmOnly()
    elif kind == "blocker":
        controller = EntryBlocker(float(spec.controller.arg or 100.0))
    else:
        if spec.controller.arg is None:
            raise CliError(f"eval of a {kind} controller needs a checkpoint: {kind}:PATH")
        params, ckpt_hash = load_checkpoint(spec.controller.arg)
        controller = build_learned(spec, params)
        extra.update(obs_dim=params.input_dim, window=spec.window,
                     features=params.meta.get("features"), deterministic=True)
    label = f"{kind}" + (f"@{ckpt_hash[:8]}" if ckpt_hash else "") \
        + (f"[window {spec.window[0]:g},{spec.window[1]:g}]" if spec.window and ckpt_hash else "")
    seeds, logs = evaluate(controller, spec.config, spec.seeds, workers)
    report = MetricsReport.from_logs(logs)
    safe = label.replace("@", "_").replace("[", "_").replace("]", "").replace(" ", "_") \
        .replace(",", "_")
    write_atomic(spec.out / f"eval_{safe}_per_seed.csv", to_csv(per_seed_rows(seeds, logs)))
    upsert_results(spec.out, [report_row(label, report, spec, ckpt_hash, extra)],
                   f"Evaluation on {spec.config.network.name}", [EVAL_NOTE])
    return report


@dataclass(frozen=True)
class ManipulationResult:
    human: MetricsReport
    manipulated: MetricsReport

    @property
    def speed_up(self) -> bool:
        return self.manipulated.avg_speed[0] > self.human.avg_speed[0] \
            and intervals_disjoint(self.manipulated.avg_speed, self.human.avg_speed)

    @property
    def outflow_down(self) -> bool:
        return self.manipulated.avg_outflow[0] < self.human.avg_outflow[0] \
            and intervals_disjoint(self.manipulated.avg_outflow, self.human.avg_outflow)

    @property
    def passed(self) -> bool:
        return self.speed_up and self.outflow_down


def cmd_manipulate(spec: ExperimentSpec, dwell: float = 100.0,
                   workers: Optional[int] = None) -> ManipulationResult:
    seeds, human = evaluate(IdmOnly(), spec.config, spec.seeds, workers)
    _, manip = evaluate(EntryBlocker(dwell), spec.config, spec.seeds, workers)
    result = ManipulationResult(MetricsReport.from_logs(human), MetricsReport.from_logs(manip))
    per_seed = []
    for label, logs in (("idm", human), ("blocker", manip)):
        per_seed += [{"controller": label, **r} for r in per_seed_rows(seeds, logs)]
    write_atomic(spec.out / "manipulate_per_seed.csv", to_csv(per_seed))
    rows = [report_row("idm", result.human, spec, extra={"controller": "idm"}),
            report_row("blocker", result.manipulated, spec,
                       extra={"controller": "blocker", "dwell_s": dwell})]
    verdict = (f"{'PASS' if result.passed else 'FAIL'}: avg speed up "
               f"{'yes' if result.speed_up else 'no'}, outflow down "
               f"{'yes' if result.outflow_down else 'no'} (95% CIs disjoint)")
    write_atomic(spec.out / "manipulate.csv", to_csv(
        [{**r, "verdict": "PASS" if result.passed else "FAIL"} for r in rows]))
    write_atomic(spec.out / "manipulate.txt", render_table(
        rows, f"Entry blocking vs. human driving on {spec.config.network.name}", [verdict]))
    return result


@dataclass(frozen=True)
class TrainSummary:
    best_path: Path
    run_dirs: tuple
    best_returns: tuple


def cmd_train(spec: ExperimentSpec, ppo: PpoConfig, profile_name: str, runs: int = 3,
              seed: int = 0, workers: Optional[int] = None, log=None) -> TrainSummary:
    """Independent runs with seeds ``seed .. seed+runs-1``; marks the best one."""
    kind = spec.controller.kind
    if kind not in ("centralized", "distributed"):
        raise CliError("train needs a centralized or distributed controller")
    reward = spec.reward or (DistributedMixed() if kind == "distributed" else Outflow())
    if kind == "centralized" and isinstance(reward, DistributedMixed):
        raise CliError("the mixed reward is per agent; use it with a distributed controller")
    echo = {
        "kind": kind, "profile": profile_name, "ppo": dataclasses.asdict(ppo),
        "reward": reward_to_str(reward), "features": spec.features.names,
        "obs_dim": observation_size(kind, spec.config.n_av_max, spec.features),
        "scenario_sha256": spec.scenario_hash, "seeds": list(range(seed, seed + runs)),
    }
    write_atomic(spec.out / "train_config.json", json.dumps(echo, indent=2, sort_keys=True) + "\n")
    results = []
    for k in range(runs):
        run_seed = seed + k

        def progress(row, params, k=k):
            if log is not None:
                ev = "" if row.eval_return != row.eval_return else f" eval {row.eval_return:.3f}"
                log(f"run {k} it {row.iteration}: return {row.mean_return:.3f} "
                    f"kl {row.kl:.4f}{ev}")

        res = train(kind, spec.config, reward, ppo, run_seed, spec.features, workers=workers,
                    on_iteration=progress)
        meta = {"profile": profile_name, "reward": reward_to_str(reward), "run_seed": run_seed,
                "best_iteration": res.best_iteration, "scenario_sha256": spec.scenario_hash}
        d = spec.out / f"run{k}"
        write_atomic(d / "checkpoint.bin", save_params(res.best_params.with_meta(**meta)))
        write_atomic(d / "final.bin", save_params(res.final_params.with_meta(**meta)))
        write_atomic(d / "curve.csv", res.curve_csv())
        results.append((res.best_return, k, d))
    best_ret, best_k, best_dir = max(results, key=lambda t: (t[0], -t[1]))
    best_path = best_dir / "checkpoint.bin"
    write_atomic(spec.out / "best.bin", best_path.read_bytes())
    write_atomic(spec.out / "BEST", f"{best_path.relative_to(spec.out)}\n")
    write_atomic(spec.out / "runs.csv", to_csv([
        {"run": k, "seed": seed + k, "best_return": r, "best": k == best_k,
         "checkpoint_sha256": sha256((d / "checkpoint.bin").read_bytes())}
        for r, k, d in sorted(results, key=lambda t: t[1])]))
    return TrainSummary(best_path, tuple(d for _, _, d in results),
                        tuple(r for r, _, _ in results))


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="openmerge", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, controller_default):
        sp.add_argument("--scenario", default="simple_merge",
                        help="scenario TOML file or built-in name (simple_merge, i696)")
        sp.add_argument("--controller", default=controller_default,
                        help="idm | blocker[:DWELL] | centralized[:CKPT] | distributed[:CKPT]")
        sp.add_argument("--reward", default=None,
                        help="outflow | avg_speed | flow[:V_d,alpha,h] | mixed[:eta1,eta2,bonus]")
        sp.add_argument("--seeds", default=None,
                        help="evaluation seeds, e.g. 0-99, 0:100 or 1,2,3 (default: scenario)")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--features", default="none",
                        help="distributed observation features: none | full | dist+merge_info+...")
        sp.add_argument("--window", default=None,
                        help="BEFORE,AFTER meters around the junction, 'none', or 'auto' "
                             "(scenario setting)")
        sp.add_argument("--workers", type=int, default=None,
                        help="worker processes (default: $OPENMERGE_WORKERS or CPU count)")

    common(sub.add_parser("baseline", help="IDM-only baseline over the seed list"), "idm")
    t = sub.add_parser("train", help="PPO training runs")
    common(t, "centralized")
    t.add_argument("--profile", choices=("paper", "desk", "smoke"), default="desk")
    t.add_argument("--runs", type=int, default=3)
    t.add_argument("--train-seed", type=int, default=0, help="seed of the first run")
    t.add_argument("--iterations", type=int, default=None, help="override the profile")
    common(sub.add_parser("eval", help="deterministic evaluation of a controller"), "idm")
    m = sub.add_parser("manipulate", help="entry-blocking controller vs. IDM baseline")
    common(m, "blocker")
    m.add_argument("--dwell", type=float, default=100.0, help="standstill time in seconds")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        spec = spec_from_args(args)
        if args.command == "baseline":
            r = cmd_baseline(spec, args.workers)
            print((spec.out / "results.txt").read_text(), end="")
            return 0 if r.n else 1
        if args.command == "eval":
            cmd_eval(spec, args.workers)
            print((spec.out / "results.txt").read_text(), end="")
            return 0
        if args.command == "manipulate":
            res = cmd_manipulate(spec, args.dwell, args.workers)
            print((spec.out / "manipulate.txt").read_text(), end="")
            return 0 if res.passed else 2
        ppo = profile(spec.controller.kind, args.profile)
        if args.iterations is not None:
            ppo = ppo.with_(iterations=args.iterations)
        summary = cmd_train(spec, ppo, args.profile, args.runs, args.train_seed, args.workers,
                            log=lambda msg: print(msg, file=sys.stderr, flush=True))
        print(summary.best_path)
        return 0
    except (CliError, ValueError, OSError) as exc:
        print(f"openmerge: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
