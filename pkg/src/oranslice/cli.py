"""Command-line entry point: ``python -m oranslice <command>``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, SimConfig
from .env import SlicingEnv
from .mobility import MODES, write_load_trace, write_ue_trace
from .nn import load_checkpoint, save_checkpoint
from .orchestrator import (
    export_metrics,
    evaluate_policy,
    make_agent,
    mode_name,
    run_training,
)
from .predictor import Predictor, fit_predictor, mse, persistence_mse

log = logging.getLogger("oranslice")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file (defaults to the built-in scenario)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--gamma", type=float, help="override the discount factor")
    common.add_argument("--no-prediction", action="store_true", help="feed measured instead of forecast loads")
    common.add_argument("--out", type=Path, help="output directory (default: config out_dir)")
    common.add_argument("--iterations", type=int, help="override the number of training iterations")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="oranslice", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train the SAC slicing agent")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a trained agent checkpoint")
    ev.add_argument("--episodes", type=int, help="evaluation episodes (default: config eval_episodes)")
    sub.add_parser("predict", parents=[common], help="train and test the traffic forecaster only")
    tr = sub.add_parser("trace", parents=[common], help="write mobility/traffic traces as CSV")
    tr.add_argument("--steps", type=int, default=1000)
    cmp_ = sub.add_parser("compare", parents=[common], help="prediction on vs off over several seeds")
    cmp_.add_argument("--seeds", type=int, nargs="+", help="seed list (default: the single config seed)")
    return parser


def load_config(args) -> SimConfig:
    cfg = SimConfig.load(args.config) if args.config else SimConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.gamma is not None:
        cfg.sac.gamma = args.gamma
    if args.no_prediction:
        cfg.prediction = False
    if args.iterations is not None:
        cfg.iterations = args.iterations
    if args.out is not None:
        cfg.out_dir = str(args.out)
    cfg.validate()
    return cfg


def cmd_train(cfg: SimConfig) -> int:
    out = Path(cfg.out_dir)
    metrics, _, _ = run_training(cfg, out)
    cfg.save(out / "config.json")
    export_metrics(metrics, out)
    ev = metrics.evaluation
    print(f"mode={metrics.mode} iterations={metrics.iterations_run} converged={metrics.converged}")
    print(f"final return (last 100 episodes): {metrics.final_return():.3f}")
    print(f"evaluation return: {ev.mean_return:.3f}  violation std per slice: "
          + ", ".join(f"{n}={s:.4f}" for n, s in zip(metrics.slice_names, ev.violation_std)))
    print(f"outputs written to {out}")
    return 0


def cmd_eval(cfg: SimConfig, episodes: int | None) -> int:
    out = Path(cfg.out_dir)
    ckpt = out / "agent.json"
    if not ckpt.exists():
        print(f"error: no agent checkpoint at {ckpt}; run 'train' first", file=sys.stderr)
        return 2
    seeds = np.random.SeedSequence(cfg.seed).spawn(6)
    agent = make_agent(cfg, cfg.topology.n_dus, seeds[1])
    agent.load(load_checkpoint(ckpt))
    predictor = None
    if cfg.prediction:
        pred_ckpt = out / "predictor.json"
        if not pred_ckpt.exists():
            print(f"error: prediction mode needs {pred_ckpt}", file=sys.stderr)
            return 2
        predictor = Predictor.create(cfg, cfg.topology.n_dus, np.random.default_rng(0))
        predictor.stack.load(load_checkpoint(pred_ckpt))
    n = cfg.eval_episodes if episodes is None else episodes
    stats = evaluate_policy(agent, cfg, n, predictor, seeds[-1])
    names = [s.name for s in cfg.slices]
    with open(out / "eval.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("slice", "violation_std", "violation_rate", "mode"))
        for name, std, rate in zip(names, stats.violation_std, stats.violation_rate):
            w.writerow([name, repr(std), repr(rate), mode_name(cfg.prediction)])
    print(f"episodes={n} mean return={stats.mean_return:.3f} mean reward={stats.mean_reward:.3f}")
    for name, std, rate in zip(names, stats.violation_std, stats.violation_rate):
        print(f"  {name}: violation std {std:.4f} Mbps, violation rate {rate:.3f}")
    return 0


def cmd_predict(cfg: SimConfig) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    predictor, curve, data = fit_predictor(cfg, np.random.SeedSequence(cfg.seed).spawn(6)[4])
    with open(out / "predictor_loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("epoch", "train_mse", "val_mse"))
        for i, (tr, va) in enumerate(zip(curve.train, curve.val), start=1):
            w.writerow([i, repr(tr), repr(va)])
    save_checkpoint(out / "predictor.json", dict(predictor.stack.named_params()))
    lstm = mse(predictor, data.x_val, data.y_val)
    base = persistence_mse(data.x_val, data.y_val)
    print(f"best epoch {curve.best_epoch}: validation MSE {lstm:.4e} vs persistence {base:.4e} "
          f"({100 * (base - lstm) / base:+.2f}%)")
    return 0


def cmd_trace(cfg: SimConfig, steps: int) -> int:
    if steps < 1:
        print("error: --steps must be >= 1", file=sys.stderr)
        return 2
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    env = SlicingEnv(cfg, seed=cfg.seed)
    st = env.reset()
    rows, counts, loads = [], [], []
    for t in range(steps):
        if t:
            st = env.advance()
        for u in range(env.n_users):
            x, y = st.positions[0, u]
            rows.append((t, u, int(env.slice_of[u]), x, y, int(st.mode[0, u]), st.demand[0, u]))
        counts.append(st.counts[0])
        loads.append(st.loads[0])
    write_ue_trace(out / "ue_trace.csv", rows)
    write_load_trace(out / "load_trace.csv", np.array(counts), np.array(loads))
    print(f"wrote {steps} steps for {env.n_users} users ({len(MODES)} traffic modes) to {out}")
    return 0


def cmd_compare(cfg: SimConfig, seeds: list[int] | None) -> int:
    seeds = seeds or [cfg.seed]
    out = Path(cfg.out_dir)
    finals = {True: [], False: []}
    runs = []
    for seed in seeds:
        for pred in (True, False):
            run_cfg = SimConfig.from_dict(cfg.to_dict())
            run_cfg.seed, run_cfg.prediction = seed, pred
            metrics, _, _ = run_training(run_cfg, out / f"seed{seed}_{mode_name(pred)}")
            finals[pred].append(metrics.final_return())
            runs.append(metrics)
            print(f"seed {seed} {mode_name(pred)}: final return {finals[pred][-1]:.3f}")
    export_metrics(runs, out)
    on, off = np.array(finals[True]), np.array(finals[False])
    gap = 100.0 * (on.mean() - off.mean()) / abs(off.mean())
    print(f"prediction:    {on.mean():.3f} +/- {on.std():.3f}")
    print(f"no prediction: {off.mean():.3f} +/- {off.std():.3f}")
    print(f"improvement with prediction: {gap:+.2f}%  (return ratio {on.mean() / off.mean():.4f})")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = load_config(args)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.episodes)
        if args.command == "predict":
            return cmd_predict(cfg)
        if args.command == "trace":
            return cmd_trace(cfg, args.steps)
        return cmd_compare(cfg, args.seeds)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
