"""Experiment harness CLI.

Subcommands: gen-data, train, eval, bench-ensemblers, bench-latency,
ik-check. Exit codes: 0 success, 2 config error, 3 runtime error.

results.csv holds only seed-deterministic quantities; inf_hz and act_hz are
defined over simulated time (inferences per simulated second, and executed
actions per inference divided by the tick period), so re-runs are
byte-identical. Wall-clock measurements appear in episodes.log and the
bench-latency report only.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import (
    ConfigError,
    ExperimentConfig,
    apply_overrides,
    echo_config,
    load_config,
    perturb_for_condition,
)
from .dataset import chunkify_all, generate_dataset, load_dataset
from .ensemble import ENSEMBLER_NAMES, AdaHorizonParams, EnsemblerState, adahorizon_step, make_ensembler
from .kinematics import KinematicChain, angles_to_pwm, default_chain, fk, ik
from .policy import forward, load_checkpoint, save_checkpoint, train
from .sim import DT, PerturbSpec, all_tasks, observe, reset, run_episode

RESULTS_HEADER = "condition,method,episodes,successes,rate,ci_lo,ci_hi,mean_horizon,inf_hz,act_hz"
WILSON_Z = 1.959963984540054


def wilson_interval(successes: int, n: int, z: float = WILSON_Z):
    """95% Wilson score interval for a binomial rate, as fractions."""
    if n == 0:
        return 0.0, 0.0
    p = successes / n
    denom = 1.0 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1.0 - p) / n + z * z / (4 * n * n)) / denom
    return max(0.0, center - half), min(1.0, center + half)


# ---------------------------------------------------------------------------
# episode grid

_WORKER = {}


def _worker_init(ckpt_path: str) -> None:
    net, _ = load_checkpoint(ckpt_path)
    _WORKER["net"] = net


def _run_grid_episode(job):
    condition, method, seed, ens_kwargs = job
    net = _WORKER["net"]
    ensembler = make_ensembler(
        method,
        net.stats,
        params=AdaHorizonParams(**ens_kwargs["ada"]),
        m=ens_kwargs["m"],
        theta=ens_kwargs["theta"],
    )
    task = all_tasks()[seed % 9]
    res = run_episode(net, ensembler, task, perturb_for_condition(condition), seed=seed)
    rec = res.to_record()
    rec["condition"] = condition
    rec["method"] = method
    return rec


def run_grid(ckpt_path: str, jobs_list, workers: int):
    """Run episodes serially or over a process pool; output order is the
    input order either way, so aggregation cannot depend on scheduling."""
    if workers <= 1:
        _worker_init(ckpt_path)
        return [_run_grid_episode(j) for j in jobs_list]
    with ProcessPoolExecutor(max_workers=workers, initializer=_worker_init, initargs=(ckpt_path,)) as ex:
        return list(ex.map(_run_grid_episode, jobs_list, chunksize=4))


def _ensembler_kwargs(cfg: ExperimentConfig) -> dict:
    return {
        "ada": asdict(cfg.ensembler.adahorizon_params()),
        "m": cfg.ensembler.temporal_m,
        "theta": cfg.ensembler.conf_theta,
    }


def aggregate(recs, cell_order, key_fn):
    """One results row per cell in cell_order; rates and CIs in percent."""
    groups = {}
    for r in recs:
        groups.setdefault(key_fn(r), []).append(r)
    rows = []
    for cell in cell_order:
        rs = groups.get(cell, [])
        n = len(rs)
        s = sum(1 for r in rs if r["success"])
        total_steps = sum(r["steps"] for r in rs)
        total_inf = sum(len(r["horizons"]) for r in rs)
        horizons = [h for r in rs for h in r["horizons"]]
        lo, hi = wilson_interval(s, n)
        rows.append(
            {
                "condition": cell[0],
                "method": cell[1],
                "episodes": n,
                "successes": s,
                "rate": 100.0 * s / n if n else 0.0,
                "ci_lo": 100.0 * lo,
                "ci_hi": 100.0 * hi,
                "mean_horizon": float(np.mean(horizons)) if horizons else 0.0,
                "inf_hz": total_inf / (total_steps * DT) if total_steps else 0.0,
                "act_hz": (total_steps / total_inf) / DT if total_inf else 0.0,
            }
        )
    return rows


def _format_fields(row):
    return [
        row["condition"],
        row["method"],
        str(row["episodes"]),
        str(row["successes"]),
        f"{row['rate']:.6f}",
        f"{row['ci_lo']:.6f}",
        f"{row['ci_hi']:.6f}",
        f"{row['mean_horizon']:.6f}",
        f"{row['inf_hz']:.6f}",
        f"{row['act_hz']:.6f}",
    ]


def render_csv(rows) -> str:
    lines = [RESULTS_HEADER]
    lines += [",".join(_format_fields(r)) for r in rows]
    return "\n".join(lines) + "\n"


def render_markdown(rows) -> str:
    cols = RESULTS_HEADER.split(",")
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    lines += ["| " + " | ".join(_format_fields(r)) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def write_results(rows, recs, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.csv").write_text(render_csv(rows))
    (out / "results.md").write_text(render_markdown(rows))
    with open(out / "episodes.log", "w") as f:
        for r in recs:
            f.write(json.dumps(r) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(cfg: ExperimentConfig, args) -> int:
    if args.seed is not None:
        cfg.dataset.seed = args.seed
    out_dir = Path(args.out or cfg.dataset.dir)
    if (out_dir / "manifest.json").exists() and not args.force:
        raise ConfigError(f"dataset already exists at {out_dir}; pass --force to overwrite")
    _, stats, manifest = generate_dataset(
        n=cfg.dataset.n,
        seed=cfg.dataset.seed,
        out_dir=out_dir,
        exec_noise_std=cfg.dataset.exec_noise_std,
        grip_flip_prob=cfg.dataset.grip_flip_prob,
        scatter_prob=cfg.dataset.scatter_prob,
    )
    echo_config(cfg, out_dir)
    print(f"wrote {manifest['count']} demos to {out_dir}")
    print(f"per-task counts: {manifest['per_task']}")
    print(f"norm stats lo={np.array2string(stats.lo, precision=4)} hi={np.array2string(stats.hi, precision=4)}")
    return 0


def cmd_train(cfg: ExperimentConfig, args) -> int:
    if args.seed is not None:
        cfg.train.seed = args.seed
    out_dir = Path(args.out or cfg.out)
    ckpt_path = Path(cfg.train.checkpoint)
    if ckpt_path.exists() and not args.force:
        raise ConfigError(f"checkpoint already exists at {ckpt_path}; pass --force to overwrite")
    demos, stats, _ = load_dataset(cfg.dataset.dir)
    pairs = chunkify_all(demos, cfg.train.chunk_len)

    out_dir.mkdir(parents=True, exist_ok=True)
    loss_rows = []

    def log_fn(it, total, ce, l1):
        loss_rows.append((it, total, ce, l1))
        print(f"iter {it:6d}  loss {total:.4f}  ce {ce:.4f}  l1 {l1:.4f}")

    tcfg = cfg.train.train_config()
    net = train(pairs, tcfg, stats=stats, log_fn=log_fn)
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(net, ckpt_path, tcfg)
    with open(out_dir / "loss.csv", "w") as f:
        f.write("iteration,loss,ce,l1\n")
        for it, total, ce, l1 in loss_rows:
            f.write(f"{it},{total:.8f},{ce:.8f},{l1:.8f}\n")
    echo_config(cfg, out_dir)
    print(f"saved checkpoint to {ckpt_path}")
    return 0


def _require_checkpoint(cfg: ExperimentConfig) -> str:
    ckpt = Path(cfg.eval_checkpoint())
    if not ckpt.exists():
        raise ConfigError(f"checkpoint not found at {ckpt}; run train first")
    return str(ckpt)


def _grid_jobs(cfg: ExperimentConfig, conditions, methods, seed0: int):
    ens_kwargs = _ensembler_kwargs(cfg)
    return [
        (cond, method, seed, ens_kwargs)
        for cond in conditions
        for method in methods
        for seed in range(seed0, seed0 + cfg.eval.episodes)
    ]


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    ckpt = _require_checkpoint(cfg)
    seed0 = args.seed if args.seed is not None else cfg.eval.seed0
    out_dir = Path(args.out or cfg.out)
    conditions = list(cfg.eval.conditions)
    methods = list(cfg.eval.methods)
    recs = run_grid(ckpt, _grid_jobs(cfg, conditions, methods, seed0), cfg.jobs)
    rows = aggregate(
        recs,
        [(c, m) for c in conditions for m in methods],
        key_fn=lambda r: (r["condition"], r["method"]),
    )
    write_results(rows, recs, out_dir)
    echo_config(cfg, out_dir)
    print(render_markdown(rows), end="")
    return 0


def cmd_bench_ensemblers(cfg: ExperimentConfig, args) -> int:
    ckpt = _require_checkpoint(cfg)
    seed0 = args.seed if args.seed is not None else cfg.eval.seed0
    out_dir = Path(args.out or cfg.out)
    conditions = list(cfg.eval.suite_conditions)
    methods = list(ENSEMBLER_NAMES)
    recs = run_grid(ckpt, _grid_jobs(cfg, conditions, methods, seed0), cfg.jobs)
    rows = aggregate(
        recs,
        [("suite", m) for m in methods],
        key_fn=lambda r: ("suite", r["method"]),
    )
    write_results(rows, recs, out_dir)
    echo_config(cfg, out_dir)
    print(render_markdown(rows), end="")
    return 0


def _time_ns(fn, iterations: int, warmup: int):
    for _ in range(warmup):
        fn()
    out = np.empty(iterations)
    for i in range(iterations):
        t0 = time.perf_counter_ns()
        fn()
        out[i] = time.perf_counter_ns() - t0
    return out


def cmd_bench_latency(cfg: ExperimentConfig, args) -> int:
    ckpt = _require_checkpoint(cfg)
    out_dir = Path(args.out or cfg.out)
    net, _ = load_checkpoint(ckpt)
    if cfg.latency.chunk_len != net.k:
        raise ConfigError(f"latency.chunk_len {cfg.latency.chunk_len} != checkpoint chunk length {net.k}")

    state = reset(all_tasks()[0], PerturbSpec(), seed=0)
    obs = observe(state)
    fwd_ns = _time_ns(lambda: forward(net, obs), cfg.latency.forward_iterations, cfg.latency.warmup)

    chunk = forward(net, obs)
    params = cfg.ensembler.adahorizon_params()
    ens_state = EnsemblerState()
    ens_ns = _time_ns(
        lambda: adahorizon_step(chunk, params, ens_state, net.stats),
        cfg.latency.iterations,
        cfg.latency.warmup,
    )

    def stats_of(ns):
        return {"median_ms": float(np.percentile(ns, 50)) / 1e6, "p99_ms": float(np.percentile(ns, 99)) / 1e6}

    fwd, ens = stats_of(fwd_ns), stats_of(ens_ns)
    total_ms = fwd["median_ms"] + ens["median_ms"]
    lo_h, hi_h = params.min_actions, net.k
    report = {
        "forward": fwd,
        "ensemble": ens,
        "actions_per_s": {
            "min": lo_h / (total_ms / 1000.0),
            "max": hi_h / (total_ms / 1000.0),
            "span_ratio": hi_h / lo_h,
        },
        "iterations": {"forward": cfg.latency.forward_iterations, "ensemble": cfg.latency.iterations},
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "latency.json", "w") as f:
        json.dump(report, f, indent=2)
    echo_config(cfg, out_dir)
    print(f"forward   median {fwd['median_ms']:.3f} ms  p99 {fwd['p99_ms']:.3f} ms")
    print(f"ensemble  median {ens['median_ms']:.3f} ms  p99 {ens['p99_ms']:.3f} ms")
    aps = report["actions_per_s"]
    print(f"effective actions/s {aps['min']:.1f}-{aps['max']:.1f} (span ratio {aps['span_ratio']:.2f})")
    return 0


def cmd_ik_check(cfg: ExperimentConfig, args) -> int:
    chain = KinematicChain.from_dict(cfg.chain) if cfg.chain else default_chain()
    seed = args.seed if args.seed is not None else 0
    rng = np.random.default_rng(seed)
    lo = np.array([j.limits[0] for j in chain.joints])
    hi = np.array([j.limits[1] for j in chain.joints])

    n_targets = 1000
    worst_pos, worst_rot, failures = 0.0, 0.0, 0
    for _ in range(n_targets):
        q_true = rng.uniform(lo, hi)
        target = fk(chain, q_true)
        res = ik(chain, target.position_mm, target.rotation)
        worst_pos = max(worst_pos, res.pos_err_mm)
        worst_rot = max(worst_rot, res.rot_err_rad)
        failures += 0 if res.converged else 1

    home = fk(chain, np.zeros(6))
    wrist = float(np.linalg.norm(home.wrist_mm))
    tip = float(np.linalg.norm(home.position_mm))
    try:
        ik(chain, [0.0, 0.0, 500.0])
        unreachable_msg = "not raised"
    except ValueError as e:
        unreachable_msg = str(e)
    ticks = angles_to_pwm([0.0, math.pi / 2, math.pi, 0.0, 0.0, 0.0]).tolist()

    report = {
        "targets": n_targets,
        "worst_pos_err_mm": worst_pos,
        "worst_rot_err_rad": worst_rot,
        "non_converged": failures,
        "wrist_reach_mm": wrist,
        "tip_reach_mm": tip,
        "unreachable_probe": unreachable_msg,
        "pwm_ticks_0_90_180": ticks[:3],
    }
    out_dir = Path(args.out or cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "ik_report.json", "w") as f:
        json.dump(report, f, indent=2)
    echo_config(cfg, out_dir)
    print(f"round trip over {n_targets} targets: worst position error {worst_pos:.4f} mm, "
          f"worst rotation error {worst_rot:.5f} rad, {failures} non-converged")
    print(f"calibration pose reach: wrist {wrist:.1f} mm, tip {tip:.1f} mm")
    print(f"unreachable probe at 500 mm: {unreachable_msg}")
    print(f"pwm ticks at 0/90/180 deg: {ticks[:3]}")
    return 0


# ---------------------------------------------------------------------------
# entry point

COMMANDS = {
    "gen-data": (cmd_gen_data, "generate an expert demonstration dataset"),
    "train": (cmd_train, "train the dual-head policy on a dataset"),
    "eval": (cmd_eval, "evaluate ensemblers across conditions"),
    "bench-ensemblers": (cmd_bench_ensemblers, "compare all six ensemblers on the perturbed suite"),
    "bench-latency": (cmd_bench_latency, "microbenchmark forward and ensembler compute"),
    "ik-check": (cmd_ik_check, "run the FK/IK round-trip and reach checks"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config path (defaults apply if omitted)")
    common.add_argument("--seed", type=int, help="override the subcommand's base seed")
    common.add_argument("--out", help="override the output directory")
    common.add_argument("--jobs", type=int, help="worker processes for episode grids")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument(
        "--set",
        action="append",
        dest="overrides",
        metavar="SECTION.KEY=VALUE",
        help="override a config value (repeatable)",
    )
    parser = argparse.ArgumentParser(prog="adahorizon", description="action-chunk execution benchmark harness")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_text)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig.from_dict({})
        cfg = apply_overrides(cfg, args.overrides)
        if args.jobs is not None:
            if args.jobs < 1:
                raise ConfigError("--jobs must be >= 1")
            cfg.jobs = args.jobs
        return COMMANDS[args.command][0](cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failures map to a distinct exit code
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
