"""Command-line entry point: ``hrtrader {synth,train,backtest,aggregate,experiment}``.

Exit codes: 0 success, 2 invalid input or config, 3 failure while running.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .backtest import METRICS, StrategyKind, export_heatmap_data, load_sector_map, run_backtest, sector_volume_proportions
from .config import RunConfig, load_config, load_market, resolved_dict, split_windows
from .errors import ConfigError, ValidationError
from .marketdata import write_csv, write_signals_csv
from .trainer import HrtTrainer, load_agents, save_baseline, train_ddpg_only, train_ppo_only

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3
TRAINABLE = ("hrt", "ppo_only", "ddpg_only")

log = logging.getLogger("hrtrader")


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def _seed(cfg: RunConfig, override: int | None) -> int:
    return cfg.seeds[0] if override is None else override


# ---------------------------------------------------------------------------
# synth


def cmd_synth(cfg: RunConfig, out: Path, seed: int | None = None) -> dict[str, Path]:
    if cfg.data.synthetic is None:
        raise ConfigError("synth needs a [data.synthetic] section")
    if seed is not None:
        cfg = replace(cfg, data=replace(cfg.data, synthetic=replace(cfg.data.synthetic, seed=seed)))
    frame, signals = load_market(cfg)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"market": out / "market.csv", "signals": out / "signals.csv"}
    write_csv(frame, paths["market"])
    write_signals_csv(frame, signals, paths["signals"])
    _write_json(out / "config.json", resolved_dict(cfg))
    return paths


# ---------------------------------------------------------------------------
# train


def _truncate_logs(log_dir: Path, upto_episode: int) -> None:
    # drop episodes that ran after the checkpoint we resume from
    for f in log_dir.glob("*.jsonl"):
        keep = [ln for ln in f.read_text(encoding="utf-8").splitlines() if json.loads(ln)["episode"] < upto_episode]
        f.write_text("".join(k + "\n" for k in keep), encoding="utf-8")


def cmd_train(
    cfg: RunConfig,
    strategy: str,
    run_dir: Path,
    seed: int,
    resume: bool = False,
    max_episodes: int | None = None,
) -> Path:
    """Train one strategy; returns the path of the final model checkpoint."""
    if strategy not in TRAINABLE:
        raise ValidationError(f"strategy {strategy!r} is not trainable; choose from {TRAINABLE}")
    cfg = cfg.with_seed(seed)
    frame, signals = load_market(cfg, seed)
    (start, stop), _ = split_windows(frame.n_days, cfg.train_fraction)
    run_dir.mkdir(parents=True, exist_ok=True)
    _write_json(run_dir / "config.json", {**resolved_dict(cfg), "strategies": [strategy]})
    model = run_dir / "model.hrt"
    log_dir = run_dir / "logs"

    if strategy == "hrt":
        ckpt_dir = run_dir / "checkpoints"
        last = ckpt_dir / "last.hrt"
        if resume and last.exists():
            trainer = HrtTrainer.load_checkpoint(last, frame, signals, log_dir)
            _truncate_logs(log_dir, trainer.progress.global_episode)
            log.info("resumed from %s at episode %d", last, trainer.progress.global_episode)
        else:
            if resume:
                log.info("no checkpoint under %s; starting fresh", ckpt_dir)
            for f in log_dir.glob("*.jsonl"):
                f.unlink()
            trainer = HrtTrainer(frame, signals, cfg.env, cfg.ppo, cfg.ddpg, cfg.schedule, start, stop, log_dir)
        trainer.run(max_episodes=max_episodes, checkpoint_dir=ckpt_dir)
        if trainer.done:
            trainer.save_checkpoint(model)
        return model if trainer.done else last

    budget = cfg.schedule.total_timesteps
    if strategy == "ppo_only":
        agent, history = train_ppo_only(
            frame, signals, cfg.env, cfg.ppo, cfg.baselines.ppo_only_episodes, seed, start, stop, budget
        )
    else:
        agent, history = train_ddpg_only(
            frame, signals, cfg.env, cfg.ddpg, cfg.baselines.ddpg_only_episodes, seed, start, stop, budget
        )
    log_dir.mkdir(parents=True, exist_ok=True)
    with (log_dir / f"{strategy}.jsonl").open("w", encoding="utf-8") as fh:
        for rec in history:
            fh.write(json.dumps(rec) + "\n")
    save_baseline(model, strategy, agent, frame.tickers, (start, stop))
    return model


# ---------------------------------------------------------------------------
# backtest


def cmd_backtest(
    cfg: RunConfig,
    strategy: str | None,
    checkpoint: Path | None,
    out: Path,
    seed: int,
    window: str = "test",
    sector_map: Path | None = None,
):
    agents = load_agents(checkpoint) if checkpoint is not None else None
    if strategy is None:
        if agents is None:
            raise ValidationError("give --strategy or --checkpoint")
        strategy = agents["kind"]
    kind = StrategyKind(strategy)
    if kind.needs_checkpoint and agents is None:
        raise ValidationError(f"strategy {kind.value} needs --checkpoint")
    if agents is not None and kind.needs_checkpoint and agents["kind"] != "hrt" and agents["kind"] != kind.value:
        raise ValidationError(f"checkpoint holds a {agents['kind']} model, not {kind.value}")
    frame, signals = load_market(cfg, seed)
    train, test = split_windows(frame.n_days, cfg.train_fraction)
    start, stop = {"test": test, "train": train, "full": (0, frame.n_days)}[window]
    report = run_backtest(kind, frame, signals, cfg.env, agents, start, stop, seed)
    report.config["run_seed"] = seed
    paths = report.write(out, kind.value)
    paths["heatmap"] = out / f"{kind.value}_heatmap.csv"
    export_heatmap_data(report.trade_log, cfg.env.h_max, frame.tickers, frame.days, paths["heatmap"])
    if sector_map is not None:
        props = sector_volume_proportions(report.trade_log, load_sector_map(sector_map), frame.tickers)
        paths["sectors"] = out / f"{kind.value}_sectors.json"
        _write_json(paths["sectors"], props)
    return report, paths


# ---------------------------------------------------------------------------
# aggregate


def _mean_std(xs: list[float]) -> tuple[float, float]:
    mean = float(np.mean(xs))
    std = float(np.std(xs, ddof=1)) if len(xs) > 1 else 0.0
    return mean, std


def aggregate_reports(reports: list[dict]) -> dict:
    """``{strategy: {metric: {"mean", "std", "n"}}}`` with sample (n - 1) std."""
    by: dict[str, dict[str, list[float]]] = {}
    for rep in reports:
        slot = by.setdefault(rep["strategy"], {m: [] for m in METRICS})
        for m in METRICS:
            v = rep["metrics"].get(m)
            if v is not None and math.isfinite(v):
                slot[m].append(float(v))
    out: dict = {}
    for strat, metrics in by.items():
        out[strat] = {}
        for m, xs in metrics.items():
            if xs:
                mean, std = _mean_std(xs)
                out[strat][m] = {"mean": mean, "std": std, "n": len(xs)}
            else:
                out[strat][m] = {"mean": None, "std": None, "n": 0}
    return out


def cmd_aggregate(run_dirs: list[Path], out: Path) -> dict:
    reports = []
    for d in run_dirs:
        d = Path(d)
        files = [d] if d.is_file() else sorted(d.rglob("*_report.json"))
        if not files:
            raise ValidationError(f"no *_report.json found under {d}")
        for f in files:
            reports.append(json.loads(f.read_text(encoding="utf-8")))
    summary = aggregate_reports(reports)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "summary.json", summary)
    strategies = [s.value for s in StrategyKind if s.value in summary] + sorted(
        s for s in summary if s not in {k.value for k in StrategyKind}
    )
    with (out / "summary.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", *strategies])
        for m in METRICS:
            row = [m]
            for s in strategies:
                cell = summary[s][m]
                row.append("" if cell["mean"] is None else f"{cell['mean']:.4f} ± {cell['std']:.4f}")
            w.writerow(row)
    return summary


# ---------------------------------------------------------------------------
# experiment


def cmd_experiment(cfg: RunConfig, out: Path) -> dict:
    """Train and backtest every configured strategy for every seed, then aggregate."""
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", resolved_dict(cfg))
    seed_dirs = []
    for seed in cfg.seeds:
        t0 = time.time()
        sd = out / f"seed_{seed}"
        seed_dirs.append(sd)
        for strat in cfg.strategies:
            ckpt = cmd_train(cfg, strat, sd / strat, seed) if strat in TRAINABLE else None
            cmd_backtest(cfg, strat, ckpt, sd / "backtest", seed)
        log.info("seed %d done in %.1fs", seed, time.time() - t0)
    return cmd_aggregate(seed_dirs, out)


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hrtrader", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=False):
        sp.add_argument("--config", required=True, type=Path)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", type=Path, required=out_required)

    sp = sub.add_parser("synth", help="write a synthetic market and its signals as CSV")
    common(sp)
    sp = sub.add_parser("train", help="train a strategy into a run directory")
    common(sp)
    sp.add_argument("--strategy", default="hrt", choices=TRAINABLE)
    sp.add_argument("--resume", action="store_true", help="continue from <out>/checkpoints/last.hrt")
    sp.add_argument("--max-episodes", type=int, help="stop after this many episodes (resumable)")
    sp = sub.add_parser("backtest", help="evaluate a strategy greedily and write reports")
    common(sp)
    sp.add_argument("--checkpoint", type=Path)
    sp.add_argument("--strategy", choices=[s.value for s in StrategyKind])
    sp.add_argument("--window", choices=("test", "train", "full"), default="test")
    sp.add_argument("--sector-map", type=Path)
    sp = sub.add_parser("aggregate", help="mean and sample std of metrics across runs")
    sp.add_argument("runs", nargs="+", type=Path)
    sp.add_argument("--out", type=Path, required=True)
    sp = sub.add_parser("experiment", help="train, backtest and aggregate over all configured seeds")
    common(sp)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        if args.command == "aggregate":
            cmd_aggregate(args.runs, args.out)
            print(args.out / "summary.csv")
            return EXIT_OK
        cfg = load_config(args.config)
        seed = _seed(cfg, args.seed)
        if args.command == "synth":
            paths = cmd_synth(cfg, args.out or Path(cfg.output_dir) / "data", args.seed)
            print(json.dumps({k: str(v) for k, v in paths.items()}))
        elif args.command == "train":
            run_dir = args.out or Path(cfg.output_dir) / args.strategy / f"seed_{seed}"
            print(cmd_train(cfg, args.strategy, run_dir, seed, args.resume, args.max_episodes))
        elif args.command == "backtest":
            out = args.out or (args.checkpoint.parent / "backtest" if args.checkpoint else Path(cfg.output_dir) / "backtest")
            report, _ = cmd_backtest(cfg, args.strategy, args.checkpoint, out, seed, args.window, args.sector_map)
            print(json.dumps(report.to_json()["metrics"]))
        elif args.command == "experiment":
            cfg = replace(cfg, seeds=(args.seed,)) if args.seed is not None else cfg
            cmd_experiment(cfg, args.out or Path(cfg.output_dir))
            print((args.out or Path(cfg.output_dir)) / "summary.csv")
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - top-level reporter
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
