"""Command-line driver.

Exit codes: 0 success, 1 usage or config error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from ._io import atomic_write_bytes, atomic_write_text
from .config import ConfigError, Diagnostic, default_config_path, load_config, validate_file
from .experiment import (
    MODES,
    ExperimentConfig,
    metrics_to_csv,
    read_sweep_csv,
    rows_to_csv,
    run_sweep,
    simulate_policy,
    summarize,
    with_overrides,
)
from .oracle import oracle_gap, shrunk_instance, value_iteration
from .rl import LevelScheme, RewardParams, greedy_policy, load_qtable, qtable_to_bytes, train

log = logging.getLogger("cogrelay")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated floats, got {text!r}")


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config (default: bundled default)")
    common.add_argument("--out", default="out", help="output directory (default: ./out)")
    common.add_argument("--seed", type=_u64, help="override experiment.base_seed")
    common.add_argument("--mode", choices=sorted(MODES), help="restrict to one mode")
    common.add_argument("--omega", type=_floats, help="comma-separated omega values")
    common.add_argument("--grid", type=int, help="sweep n primary-load points i/(n+1)")
    common.add_argument("--reps", type=int, help="replications per sweep cell")
    common.add_argument("--quiet", action="store_true", help="only warnings and errors")

    parser = _Parser(prog="cogrelay", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("validate", parents=[common], help="check a config file")
    sub.add_parser("train", parents=[common], help="train one agent, write Q-table + curve")
    p_eval = sub.add_parser("eval", parents=[common], help="evaluate a greedy policy")
    p_eval.add_argument("--qtable", help="Q-table artifact (default: train one first)")
    sub.add_parser("sweep", parents=[common], help="run the load x omega x mode sweep")
    sub.add_parser("oracle", parents=[common], help="value iteration on the shrunk instance")
    p_plot = sub.add_parser("plot", parents=[common], help="SVG charts from a sweep CSV")
    p_plot.add_argument("--csv", help="sweep CSV (default: <out>/sweep.csv)")
    return parser


def _config(args) -> ExperimentConfig:
    if args.config and not Path(args.config).is_file():
        raise ConfigError([Diagnostic("", f"config file not found: {args.config}")])
    cfg = load_config(args.config)
    try:
        return with_overrides(
            cfg,
            seed=args.seed,
            modes=[args.mode] if args.mode else None,
            omegas=args.omega,
            grid_points=args.grid,
            replications=args.reps,
        )
    except ValueError as exc:
        raise ConfigError([Diagnostic("command line", str(exc))]) from exc


def cmd_validate(args) -> int:
    path = args.config or default_config_path()
    if not Path(path).is_file():
        print(f"error: config file not found: {path}", file=sys.stderr)
        return EXIT_USAGE
    diags = validate_file(path)
    if diags:
        for d in diags:
            print(f"error: {d}", file=sys.stderr)
        return EXIT_USAGE
    print(f"{path}: ok")
    return EXIT_OK


def _single_run(cfg: ExperimentConfig):
    mode = cfg.modes[0]
    return mode, MODES[mode], cfg.reward_params()


def cmd_train(args) -> int:
    cfg = _config(args)
    mode, mask, rp = _single_run(cfg)
    out = Path(args.out)
    log.info("training %s agent, omega=%g, %d slots", mode, rp.omega, cfg.hyper.horizon)
    res = train(cfg.model, rp, cfg.scheme, cfg.hyper, mask, cfg.base_seed,
                window=cfg.curve_window)
    atomic_write_bytes(out / "qtable.bin", qtable_to_bytes(res.table, cfg.scheme, mask))
    lines = ["slot,mean_reward"] + [f"{int(e)},{m:.6g}" for e, m in res.curve]
    atomic_write_text(out / "learning_curve.csv", "\n".join(lines) + "\n")
    log.info("wrote %s and %s", out / "qtable.bin", out / "learning_curve.csv")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    mode, mask, rp = _single_run(cfg)
    if args.qtable:
        art = load_qtable(args.qtable)
        if art.scheme != cfg.scheme:
            raise ValueError(f"{args.qtable} was trained with {art.scheme}, config has {cfg.scheme}")
        policy = greedy_policy(art.table, art.mask)
        mode = next((m for m, v in MODES.items() if set(v) == set(art.mask)), "custom")
    else:
        policy = train(cfg.model, rp, cfg.scheme, cfg.hyper, mask, cfg.base_seed).policy
    metrics = simulate_policy(policy.actions, cfg.model, rp, cfg.scheme, cfg.eval_horizon,
                              cfg.base_seed + 1)
    lam_p = cfg.model.arrivals["p"].lam
    text = metrics_to_csv(metrics, mode=mode, omega=rp.omega, lambda_p=lam_p,
                          seed=cfg.base_seed + 1)
    atomic_write_text(Path(args.out) / "metrics.csv", text)
    log.info("primary %.4f  secondary %.4f  relayed %.4f  reward %.4f",
             metrics.primary_throughput, metrics.secondary_throughput,
             metrics.relayed_throughput, metrics.mean_reward)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    total = len(cfg.lambda_p_grid) * len(cfg.omegas) * len(cfg.modes) * cfg.replications
    done = [0]

    def progress(cell):
        done[0] += 1
        log.info("[%d/%d] %s omega=%g lambda_p=%g rep=%d", done[0], total, cell.mode,
                 cell.omega, cell.lambda_p, cell.replication)

    res = run_sweep(cfg, progress=progress)
    atomic_write_text(out / "sweep.csv", rows_to_csv(res.rows))
    manifest = {
        "cells": total,
        "succeeded": len(res.rows),
        "failed": [dict(asdict(f.cell), error=f.error) for f in res.failures],
        "base_seed": cfg.base_seed,
    }
    atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=2) + "\n")
    if res.failures:
        log.error("%d of %d cells failed; see %s", len(res.failures), total,
                  out / "manifest.json")
        return EXIT_RUNTIME
    log.info("wrote %s (%d rows)", out / "sweep.csv", len(res.rows))
    return EXIT_OK


def cmd_oracle(args) -> int:
    cfg = _config(args)
    o = cfg.oracle
    rp = RewardParams(o.omega, cfg.penalty_k, cfg.literal_relay_penalty)
    inst = shrunk_instance(cfg.model, rp, capacity=o.capacity, lambda_p=o.lambda_p,
                           gamma=cfg.hyper.gamma, max_states=o.max_states)
    log.info("value iteration over %d exact states", inst.n_states)
    vi = value_iteration(inst, o.tol)
    scheme = LevelScheme(o.n_levels, o.thresholds)
    hyper = replace(cfg.hyper, horizon=o.train_horizon)
    trained = train(inst.params, rp, scheme, hyper, MODES["cooperative"], cfg.base_seed)
    seeds = [cfg.base_seed + 1 + i for i in range(o.seeds)]
    report = oracle_gap(trained.policy, inst, scheme, seeds=seeds, horizon=o.eval_horizon,
                        optimal=vi)

    out = Path(args.out)
    header = "state,q_p,q_pe,q_s,q_ps,q_se,ch_p,ch_s,ch_ps,ch_sp,arr_p,arr_pe,arr_s,arr_se,value,action"
    lines = [header]
    for s in range(inst.n_states):
        d = inst.decode(s)
        lines.append(",".join([str(s)] + [str(v) for v in d.values()]
                              + [f"{vi.values[s]:.6g}", f"a{vi.policy[s] + 1}"]))
    atomic_write_text(out / "oracle_policy.csv", "\n".join(lines) + "\n")
    gap = {
        "n_states": inst.n_states,
        "sweeps": vi.sweeps,
        "tol": o.tol,
        "max_row_sum_error": float(inst.row_sum_errors().max()),
        "oracle_mean_reward": report.oracle_reward,
        "learned_mean_reward": report.learned_reward,
        "relative_gap": report.gap,
        "seeds": seeds,
        "eval_horizon": o.eval_horizon,
        "train_horizon": o.train_horizon,
    }
    atomic_write_text(out / "oracle_gap.json", json.dumps(gap, indent=2) + "\n")
    log.info("oracle %.5f  learned %.5f  gap %.2f%%", report.oracle_reward,
             report.learned_reward, 100 * report.gap)
    return EXIT_OK


def _svg(path: Path, rows: list[dict], metric: str, ylabel: str) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "cogrelay"
    stats = summarize(rows, metric)
    series = sorted({(m, w) for m, w, _ in stats}, key=lambda k: (k[0], k[1]))
    fig, ax = plt.subplots(figsize=(6, 4))
    for mode, omega in series:
        pts = sorted((lp, s) for (m, w, lp), s in stats.items() if m == mode and w == omega)
        x = np.array([1.0 - lp for lp, _ in pts])
        y = np.array([s.mean for _, s in pts])
        err = np.array([s.std for _, s in pts])
        style = "-o" if mode == "cooperative" else "--s"
        tag = "CS" if mode == "cooperative" else "NC"
        ax.errorbar(x, y, yerr=err, fmt=style, capsize=3, label=f"{tag}, omega={omega:g}")
    ax.set_xlabel("primary arrival rate (1 - lambda_p)")
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    fig.savefig(tmp, format="svg", metadata={"Date": None})
    plt.close(fig)
    tmp.replace(path)
    return len(series)


def cmd_plot(args) -> int:
    out = Path(args.out)
    src = Path(args.csv) if args.csv else out / "sweep.csv"
    rows = read_sweep_csv(src)
    if not rows:
        raise ValueError(f"{src} has no rows")
    n = _svg(out / "primary_throughput.svg", rows, "primary_throughput",
             "primary packets delivered / slot")
    _svg(out / "secondary_throughput.svg", rows, "secondary_throughput",
         "secondary packets served / slot")
    log.info("wrote 2 charts with %d series each", n)
    return EXIT_OK


COMMANDS = {
    "validate": cmd_validate,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "oracle": cmd_oracle,
    "plot": cmd_plot,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        for d in exc.diagnostics:
            print(f"error: {d}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
