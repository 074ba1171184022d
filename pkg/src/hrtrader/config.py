"""Declarative run configuration (TOML or JSON).

Every section maps onto a dataclass; unknown keys and bad values raise
``ConfigError`` naming the offending field, before any data is touched.
"""

from __future__ import annotations

import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .ddpg import DdpgConfig
from .env import EnvConfig
from .errors import ConfigError, ValidationError
from .marketdata import (
    MarketFrame,
    SignalPanel,
    SyntheticMarketSpec,
    baseline_signals,
    generate_synthetic,
    load_csv,
    load_signals_csv,
)
from .ppo import PpoConfig
from .trainer import TrainSchedule

SIGNAL_SOURCES = ("synthetic", "baseline", "csv")


@dataclass(frozen=True)
class DataConfig:
    csv: str | None = None
    tickers: tuple[str, ...] | None = None
    synthetic: SyntheticMarketSpec | None = None
    signals: str = "synthetic"
    signals_csv: str | None = None
    lookback: int = 10
    signal_noise: float = 0.0
    # vary the synthetic market seed with the run seed (paired multi-seed studies)
    market_seed_from_run: bool = False


@dataclass(frozen=True)
class BaselineConfig:
    ppo_only_episodes: int = 40
    ddpg_only_episodes: int = 25


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig
    env: EnvConfig = EnvConfig()
    ppo: PpoConfig = PpoConfig()
    ddpg: DdpgConfig = DdpgConfig()
    schedule: TrainSchedule = TrainSchedule()
    baselines: BaselineConfig = BaselineConfig()
    train_fraction: float = 0.7
    output_dir: str = "runs"
    seeds: tuple[int, ...] = (0,)
    strategies: tuple[str, ...] = ("hrt", "ppo_only", "ddpg_only", "random", "buy_and_hold_equal_weight")
    source: str | None = field(default=None, compare=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("source")
        return d

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seeds=(seed,), schedule=replace(self.schedule, seed=seed))


def _build(cls, raw, section: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"[{section}] must be a table")
    names = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(names))
    if unknown:
        raise ConfigError(f"[{section}] unknown key(s): {', '.join(unknown)}")
    kw = {}
    for k, v in raw.items():
        if isinstance(v, list):
            v = tuple(v)
        kw[k] = v
    try:
        obj = cls(**kw)
        if hasattr(obj, "validate"):
            obj.validate()
    except (ValidationError, TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None
    return obj


def parse_config(raw: dict, base_dir: Path | None = None) -> RunConfig:
    allowed = {"data", "env", "ppo", "ddpg", "schedule", "baselines", "split", "output", "seeds", "strategies"}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    if "data" not in raw:
        raise ConfigError("missing required section [data]")
    data_raw = dict(raw["data"])
    syn_raw = data_raw.pop("synthetic", None)
    if (syn_raw is None) == (data_raw.get("csv") is None):
        raise ConfigError("[data] needs exactly one source: `csv` or a [data.synthetic] table")
    syn = _build(SyntheticMarketSpec, syn_raw, "data.synthetic") if syn_raw is not None else None
    data = _build(DataConfig, data_raw, "data")
    base = base_dir or Path.cwd()

    def resolve(p):
        if p is None:
            return None
        q = Path(p)
        return str(q if q.is_absolute() else (base / q).resolve())

    data = replace(data, synthetic=syn, csv=resolve(data.csv), signals_csv=resolve(data.signals_csv))
    if data.signals not in SIGNAL_SOURCES:
        raise ConfigError(f"[data] signals must be one of {SIGNAL_SOURCES}")
    if data.signals == "synthetic" and syn is None:
        raise ConfigError("[data] signals = 'synthetic' requires a [data.synthetic] source")
    if data.signals == "csv" and data.signals_csv is None:
        raise ConfigError("[data] signals = 'csv' requires signals_csv")
    for key in ("csv", "signals_csv"):
        p = getattr(data, key)
        if p is not None and not Path(p).exists():
            raise ConfigError(f"[data] {key}: path does not exist: {p}")

    split = raw.get("split", {})
    if set(split) - {"train_fraction"}:
        raise ConfigError("[split] only accepts train_fraction")
    frac = float(split.get("train_fraction", 0.7))
    if not 0 < frac <= 1:
        raise ConfigError("[split] train_fraction must lie in (0, 1]")
    out = raw.get("output", {})
    if set(out) - {"dir"}:
        raise ConfigError("[output] only accepts dir")
    seeds = raw.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds must be a non-empty list of integers")
    strategies = tuple(raw.get("strategies", RunConfig.strategies))
    from .backtest import StrategyKind

    for s in strategies:
        try:
            StrategyKind(s)
        except ValueError:
            raise ConfigError(f"unknown strategy {s!r}") from None

    return RunConfig(
        data=data,
        env=_build(EnvConfig, raw.get("env"), "env"),
        ppo=_build(PpoConfig, raw.get("ppo"), "ppo"),
        ddpg=_build(DdpgConfig, raw.get("ddpg"), "ddpg"),
        schedule=_build(TrainSchedule, raw.get("schedule"), "schedule"),
        baselines=_build(BaselineConfig, raw.get("baselines"), "baselines"),
        train_fraction=frac,
        output_dir=resolve(out.get("dir", "runs")),
        seeds=tuple(seeds),
        strategies=strategies,
    )


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        raw = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    cfg = parse_config(raw, path.parent.resolve())
    return replace(cfg, source=str(path))


def resolved_dict(cfg: RunConfig) -> dict:
    """The config with every default expanded, in the same layout the loader reads."""
    d = cfg.to_dict()
    data = d.pop("data")
    syn = data.pop("synthetic")
    if syn is not None:
        data["synthetic"] = syn
    data = {k: v for k, v in data.items() if v is not None}
    return {
        "data": data,
        "env": d["env"],
        "ppo": d["ppo"],
        "ddpg": d["ddpg"],
        "schedule": d["schedule"],
        "baselines": d["baselines"],
        "split": {"train_fraction": d["train_fraction"]},
        "output": {"dir": d["output_dir"]},
        "seeds": list(d["seeds"]),
        "strategies": list(d["strategies"]),
    }


def load_market(cfg: RunConfig, seed: int | None = None) -> tuple[MarketFrame, SignalPanel]:
    data = cfg.data
    if data.synthetic is not None:
        spec = data.synthetic
        if seed is not None and data.market_seed_from_run:
            spec = replace(spec, seed=seed)
        frame, signals = generate_synthetic(spec)
    else:
        frame = load_csv(data.csv, data.tickers)
        signals = None
    if data.signals == "baseline":
        signals = baseline_signals(frame, data.lookback, data.signal_noise, seed or 0)
    elif data.signals == "csv":
        signals = load_signals_csv(data.signals_csv, frame)
    return frame, signals


def split_windows(n_days: int, train_fraction: float) -> tuple[tuple[int, int], tuple[int, int]]:
    """Train days ``[0, stop)``; test days ``[stop - 1, n_days)`` so the test starts where training marks out."""
    stop = max(2, int(round(n_days * train_fraction)))
    stop = min(stop, n_days)
    test_start = stop - 1 if stop < n_days else 0
    return (0, stop), (test_start, n_days)
