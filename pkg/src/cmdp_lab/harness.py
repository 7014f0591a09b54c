"""Command-line experiment runner: configs, multi-seed runs, metrics, slope fits, check battery.

Config document (JSON)::

    {
      "instance": {"seed": 7, "model_kind": "ModelI",
                   "dims": {"num_states": 5, "num_actions": 2, "num_contexts": 3,
                            "horizon": 4, "feat_dim": 3},
                   "class_size": 4, "mix_eps": 0.0},
      "agent": {"bonus_scale": 0.05, "delta": 0.1, "gamma1": 1.0, "gamma2": 1.0,
                "C": null, "C_variant": "sqrt", "oracle_mode": false},
      "run": {"episodes": 4096, "seeds": [0], "diagnostics_every": 0,
              "out_dir": "out", "slope_window": 1, "slope_min": 64},
      "check": {"seeds": 50, "checkpoints": [8, 64, 512], "trials": 200}
    }

``instance`` may instead be ``{"path": "file.json"}`` pointing at a saved
instance that carries its model classes.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
from scipy.stats import linregress

from cmdp_lab.agents import AgentConfig, RunLog, model2_slack, run_algorithm1, run_algorithm2
from cmdp_lab.bonuses import BonusParams, reachability_constant
from cmdp_lab.diagnostics import (
    CheckReport,
    check_elliptical_potential,
    check_simulation_lemma,
    check_truncation_lemmas,
    one_sided,
    optimism_holds,
    random_kernel,
    run_checks,
    summarize,
)
from cmdp_lab.errors import CMDPLabError, ConfigError, InvalidInstance
from cmdp_lab.model import (
    Dims,
    InstanceSpec,
    ModelClass,
    ModelKind,
    compute_pmin_pmax,
    generate_instance,
    instance_violations,
    load_instance,
    model_class_violations,
)

SCHEMA_VERSION = 1
CSV_HEADER = ["schema_version", "episode", "context", "gap", "avg_gap",
              "mean_tbonus", "mean_rbonus", "mle_correct"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_DETERMINISTIC = 4
EXIT_PROBABILISTIC = 5


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    instance: dict[str, Any]
    agent: dict[str, Any] = field(default_factory=dict)
    run: dict[str, Any] = field(default_factory=dict)
    check: dict[str, Any] = field(default_factory=dict)
    base_dir: Path = Path(".")

    @property
    def episodes(self) -> int:
        return int(self.run.get("episodes", 1))

    @property
    def seeds(self) -> list[int]:
        return [int(s) for s in self.run.get("seeds", [0])]

    @property
    def out_dir(self) -> Path:
        out = Path(self.run.get("out_dir", "out"))
        return out if out.is_absolute() else self.base_dir / out


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return parse_config(doc, base_dir=path.parent)


def parse_config(doc: dict[str, Any], base_dir: Path = Path(".")) -> ExperimentConfig:
    if not isinstance(doc, dict) or "instance" not in doc:
        raise ConfigError("config needs an 'instance' block")
    unknown = set(doc) - {"instance", "agent", "run", "check"}
    if unknown:
        raise ConfigError(f"unknown config blocks: {sorted(unknown)}")
    cfg = ExperimentConfig(doc["instance"], doc.get("agent", {}), doc.get("run", {}), doc.get("check", {}),
                           Path(base_dir))
    if cfg.episodes < 1:
        raise ConfigError("run.episodes must be >= 1")
    if not cfg.seeds:
        raise ConfigError("run.seeds must be non-empty")
    return cfg


def build_instance(cfg: ExperimentConfig, *, validate: bool = True):
    """Return ``(instance, transition_class, reward_class_or_None)``."""
    block = cfg.instance
    if "path" in block:
        path = Path(block["path"])
        path = path if path.is_absolute() else cfg.base_dir / path
        if not path.is_file():
            raise ConfigError(f"instance file not found: {path}")
        instance, classes = load_instance(path, validate=validate)
        if "transition" not in classes:
            raise ConfigError("instance file carries no transition model class")
        return instance, classes["transition"], classes.get("reward")
    try:
        dims = Dims(**block["dims"])
        kind = ModelKind(block.get("model_kind", "ModelI"))
        class_size = block.get("class_size", 1)
        if isinstance(class_size, list):
            class_size = tuple(class_size)
        result = generate_instance(int(block.get("seed", 0)), dims, kind, class_size,
                                   float(block.get("mix_eps", 0.0)))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad instance block: {exc}") from exc
    instance, classes = result
    if kind is ModelKind.MODEL_I:
        return instance, classes, None
    return instance, classes[0], classes[1]


def agent_config(cfg: ExperimentConfig, instance: InstanceSpec, tclass: ModelClass,
                 rclass: ModelClass | None, seed: int, episodes: int | None = None,
                 bonus_scale: float | None = None) -> AgentConfig:
    a = cfg.agent
    N = episodes or cfg.episodes
    kind = instance.model_kind
    C = a.get("C")
    if C is None:
        if kind is ModelKind.MODEL_II:
            p_min, p_max = compute_pmin_pmax(instance)
            if p_min <= 0:
                raise ConfigError("p_min = 0; supply agent.C explicitly")
            C = reachability_constant(p_min, p_max, a.get("C_variant", "sqrt"))
        else:
            C = 1.0
    sizes = len(tclass) if rclass is None else (len(tclass), len(rclass))
    try:
        params = BonusParams(
            horizon=instance.dims.horizon,
            feat_dim=instance.dims.feat_dim,
            num_actions=instance.dims.num_actions,
            class_sizes=sizes,
            delta=float(a.get("delta", 0.1)),
            gamma1=float(a.get("gamma1", 1.0)),
            gamma2=float(a.get("gamma2", 1.0)),
            planned_episodes=N,
            C=float(C),
            bonus_scale=float(a.get("bonus_scale", 1.0) if bonus_scale is None else bonus_scale),
        )
        return AgentConfig(kind, params, N, seed=seed, oracle_mode=bool(a.get("oracle_mode", False)),
                           diagnostics_every=int(cfg.run.get("diagnostics_every", 0)))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def run_agent(instance, tclass, rclass, config: AgentConfig, callback=None) -> RunLog:
    if instance.model_kind is ModelKind.MODEL_I:
        return run_algorithm1(instance, tclass, config, callback)
    return run_algorithm2(instance, tclass, rclass, config, callback)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def runlog_csv(log: RunLog) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for ep, avg in zip(log.episodes, log.avg_gaps):
        writer.writerow([
            SCHEMA_VERSION, ep.episode, ep.context, f"{ep.gap:.17g}", f"{avg:.17g}",
            f"{ep.mean_tbonus:.17g}", f"{ep.mean_rbonus:.17g}", int(ep.mle_correct),
        ])
    return buf.getvalue()


@dataclass(frozen=True)
class DecayFit:
    slope: float
    intercept: float
    r2: float
    degenerate: bool
    checkpoints: tuple[int, ...]


def fit_decay_slope(avg_gaps: Sequence[float], window: int = 1, n_min: int = 1,
                    n_max: int | None = None) -> DecayFit:
    """Log-log least-squares slope of the average gap at checkpoints ``n = 2^k``.

    Each checkpoint value is the mean of the ``window`` entries ending at ``n``.
    A checkpoint at or below zero marks the fit degenerate (slope ``-inf``).
    """
    a = np.asarray(avg_gaps, dtype=float)
    if window < 1:
        raise ValueError("window must be >= 1")
    if a.size < 4 * window:
        raise ValueError("sequence must hold at least 4 * window entries")
    n_max = a.size if n_max is None else min(n_max, a.size)
    ks = [2 ** k for k in range(0, int(math.log2(n_max)) + 1) if n_min <= 2 ** k <= n_max and 2 ** k >= window]
    if len(ks) < 2:
        raise ValueError("need at least two checkpoints in range")
    vals = np.array([a[n - window:n].mean() for n in ks])
    if np.any(vals <= 0):
        return DecayFit(-math.inf, math.nan, math.nan, True, tuple(ks))
    x = np.log(ks)
    y = np.log(vals)
    if np.all(y == y[0]):
        return DecayFit(0.0, float(y[0]), 1.0, False, tuple(ks))
    res = linregress(x, y)
    return DecayFit(float(res.slope), float(res.intercept), float(res.rvalue ** 2), False, tuple(ks))


def worker_count() -> int:
    env = os.environ.get("CMDP_LAB_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError("CMDP_LAB_THREADS must be an integer")
    return os.cpu_count() or 1


def fan_out(fn: Callable, items: Sequence) -> list:
    """Map ``fn`` over ``items`` in a process pool, preserving order."""
    workers = min(worker_count(), len(items))
    if workers <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

def _run_one(job: tuple[ExperimentConfig, int]) -> tuple[int, str, list[float]]:
    cfg, seed = job
    instance, tclass, rclass = build_instance(cfg)
    log = run_agent(instance, tclass, rclass, agent_config(cfg, instance, tclass, rclass, seed))
    text = runlog_csv(log)
    path = cfg.out_dir / f"run_seed{seed}.csv"
    path.write_text(text)
    return seed, text, log.avg_gaps.tolist()


def run_experiment(cfg: ExperimentConfig) -> dict[str, Any]:
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    instance, tclass, rclass = build_instance(cfg)
    results = fan_out(_run_one, [(cfg, s) for s in cfg.seeds])
    curves = np.array([r[2] for r in results])
    mean_curve = curves.mean(axis=0)
    window = int(cfg.run.get("slope_window", 1))
    summary: dict[str, Any] = {
        "schema_version": SCHEMA_VERSION,
        "model_kind": instance.model_kind.value,
        "episodes": cfg.episodes,
        "seeds": cfg.seeds,
        "final_avg_gap": {str(seed): curve[-1] for seed, _, curve in results},
        "avg_gap_curve": mean_curve.tolist(),
        "config": {"instance": cfg.instance, "agent": cfg.agent, "run": cfg.run},
    }
    if cfg.episodes >= 64:
        summary["first64_avg_gap"] = float(mean_curve[63])
        summary["final_over_first64"] = float(mean_curve[-1] / mean_curve[63]) if mean_curve[63] > 0 else None
    try:
        fit = fit_decay_slope(mean_curve, window, int(cfg.run.get("slope_min", 64)))
        summary["slope"] = {"slope": fit.slope, "intercept": fit.intercept, "r2": fit.r2,
                            "degenerate": fit.degenerate, "checkpoints": list(fit.checkpoints)}
    except ValueError as exc:
        summary["slope"] = {"slope": None, "degenerate": True, "reason": str(exc)}
    (cfg.out_dir / "summary.json").write_text(json.dumps(_jsonable(summary), sort_keys=True, indent=1))
    return summary


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    if isinstance(obj, (np.floating, np.integer)):
        return _jsonable(obj.item())
    return obj


# ---------------------------------------------------------------------------
# check battery
# ---------------------------------------------------------------------------

def deterministic_suite(seed: int = 0, trials: int = 200) -> list[CheckReport]:
    """Instance-free value identities, truncation inequalities and potential bounds."""
    rng = np.random.default_rng(seed)
    sims = []
    for _ in range(trials):
        S, A, H = int(rng.integers(1, 7)), int(rng.integers(1, 4)), int(rng.integers(1, 6))
        P1, P2 = random_kernel(rng, H, S, A), random_kernel(rng, H, S, A)
        r1, r2 = rng.uniform(0, 1, (H, S, A)), rng.uniform(0, 1, (H, S, A))
        sims.append(check_simulation_lemma(P1, P2, r1, r2, rng.integers(A, size=(H, S)), H))
    # report the largest discrepancy; it fails iff any trial fails
    reports = [max(sims, key=lambda r: r.measured)]
    reports.append(check_truncation_lemmas(rng, trials))
    ell = []
    for _ in range(trials):
        d = int(rng.integers(1, 5))
        xs = rng.normal(size=(int(rng.integers(1, 300)), d))
        xs /= np.maximum(np.linalg.norm(xs, axis=1, keepdims=True), 1.0) * rng.uniform(1, 2)
        ell.append(check_elliptical_potential(xs, float(rng.uniform(1, 4))))
    reports.append(max(ell, key=lambda r: r.measured - r.bound))
    return reports


def _check_one(job: tuple[ExperimentConfig, int]) -> dict[str, Any]:
    cfg, seed = job
    instance, tclass, rclass = build_instance(cfg)
    checkpoints = sorted(int(c) for c in cfg.check.get("checkpoints", [8, 64, 512]))
    N = max(checkpoints)
    scale = float(cfg.check.get("bonus_scale", 1.0))
    config = agent_config(cfg, instance, tclass, rclass, seed, episodes=N, bonus_scale=scale)
    delta = config.params.delta
    outcome: dict[str, Any] = {"seed": seed, "checks": {}, "optimism_violations": 0, "optimism_episodes": 0}

    def callback(state):
        slack = model2_slack(config.params, state.n) if instance.model_kind is ModelKind.MODEL_II else 0.0
        outcome["optimism_episodes"] += 1
        if not optimism_holds(state, slack):
            outcome["optimism_violations"] += 1
        if state.n in checkpoints:
            for name, rep in run_checks(state, delta).items():
                entry = outcome["checks"].setdefault(name, {"failed": False, "worst_excess": -math.inf})
                entry["failed"] |= not rep.passed
                entry["worst_excess"] = max(entry["worst_excess"], rep.measured - rep.bound)
        return None

    run_agent(instance, tclass, rclass, config, callback)
    return outcome


DETERMINISTIC_RUN_CHECKS = {"coverage_reward"}


def check_battery(cfg: ExperimentConfig) -> tuple[int, list[CheckReport]]:
    """Deterministic suites plus multi-seed probabilistic checks; returns ``(exit_code, reports)``."""
    reports: list[CheckReport] = []
    instance, tclass, rclass = build_instance(cfg, validate=False)
    problems = instance_violations(instance)
    for mc in (tclass, rclass):
        if mc is not None:
            problems += model_class_violations(instance, mc)
    reports.append(CheckReport("instance_validity", float(len(problems)), 0.0, not problems,
                               {"problems": problems[:10]}))
    if problems:
        return EXIT_DETERMINISTIC, reports
    reports.extend(deterministic_suite(int(cfg.check.get("seed", 0)), int(cfg.check.get("trials", 200))))

    n_seeds = int(cfg.check.get("seeds", 50))
    delta = float(cfg.agent.get("delta", 0.1))
    allowed = math.ceil(delta * n_seeds) + 2
    outcomes = fan_out(_check_one, [(cfg, s) for s in range(n_seeds)])
    names = sorted({name for o in outcomes for name in o["checks"]})
    for name in names:
        failed = sum(o["checks"].get(name, {}).get("failed", False) for o in outcomes)
        worst = max(o["checks"][name]["worst_excess"] for o in outcomes if name in o["checks"])
        if name in DETERMINISTIC_RUN_CHECKS:
            reports.append(CheckReport(name, worst, 0.0, worst <= 1e-9, {"failed_seeds": failed}))
        else:
            reports.append(CheckReport(f"{name}[seeds]", float(failed), float(allowed), failed <= allowed,
                                       {"worst_excess": worst}))
    opt_failed = sum(o["optimism_violations"] > 0 for o in outcomes)
    reports.append(CheckReport("optimism[seeds]", float(opt_failed), float(allowed), opt_failed <= allowed))

    det_names = {"instance_validity", "simulation_lemma", "truncation_lemmas", "elliptical_potential"}
    det_names |= DETERMINISTIC_RUN_CHECKS
    if any(not r.passed for r in reports if r.name in det_names):
        return EXIT_DETERMINISTIC, reports
    if any(not r.passed for r in reports):
        return EXIT_PROBABILISTIC, reports
    return EXIT_OK, reports


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def cli_run(config_path: str, seed: int | None = None, episodes: int | None = None,
            out: str | None = None) -> int:
    try:
        cfg = load_config(config_path)
        if seed is not None:
            cfg.run["seeds"] = [seed]
        if episodes is not None:
            cfg.run["episodes"] = episodes
        if out is not None:
            cfg.run["out_dir"] = str(Path(out).resolve())
        summary = run_experiment(cfg)
    except (ConfigError, InvalidInstance) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # runtime failures map to one exit code
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps({k: summary[k] for k in ("final_avg_gap", "slope") if k in summary}, sort_keys=True))
    return EXIT_OK


def cli_check(config_path: str) -> int:
    try:
        cfg = load_config(config_path)
        code, reports = check_battery(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvalidInstance as exc:
        print(f"invalid instance: {exc}", file=sys.stderr)
        return EXIT_DETERMINISTIC
    except Exception as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(summarize(reports))
    return code


def cli_plot_data(summary_path: str, out: str | None = None) -> int:
    path = Path(summary_path)
    if not path.is_file():
        print(f"summary not found: {path}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        curve = json.loads(path.read_text())["avg_gap_curve"]
    except (json.JSONDecodeError, KeyError) as exc:
        print(f"bad summary: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    text = "".join(f"{n}\t{v:.17g}\n" for n, v in enumerate(curve, start=1))
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="cmdp-lab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run the configured agent for each seed")
    p_run.add_argument("config")
    p_run.add_argument("--seed", type=int)
    p_run.add_argument("--episodes", type=int)
    p_run.add_argument("--out")
    p_check = sub.add_parser("check", help="run the diagnostics battery")
    p_check.add_argument("config")
    p_plot = sub.add_parser("plot-data", help="emit n vs avg_gap as TSV")
    p_plot.add_argument("summary")
    p_plot.add_argument("--out")
    args = parser.parse_args(argv)
    if args.command == "run":
        return cli_run(args.config, args.seed, args.episodes, args.out)
    if args.command == "check":
        return cli_check(args.config)
    return cli_plot_data(args.summary, args.out)


if __name__ == "__main__":
    sys.exit(main())
