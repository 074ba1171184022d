"""Greedy policy evaluation, performance metrics and report exports."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping

import numpy as np

from .env import EnvConfig, TradeLog, TradingEnv
from .errors import DimensionMismatch, UnmappedTicker, ValidationError, ZeroVolatility
from .marketdata import TRADING_DAYS, MarketFrame, SignalPanel
from .trainer import flat_observation, signed_to_orders

METRICS = ("cumulative_return", "annualized_return", "annualized_volatility", "sharpe_ratio", "max_drawdown")


class StrategyKind(str, Enum):
    HRT = "hrt"
    PPO_ONLY = "ppo_only"
    DDPG_ONLY = "ddpg_only"
    RANDOM = "random"
    BUY_AND_HOLD = "buy_and_hold_equal_weight"

    @property
    def needs_checkpoint(self) -> bool:
        return self in (StrategyKind.HRT, StrategyKind.PPO_ONLY, StrategyKind.DDPG_ONLY)


# ---------------------------------------------------------------------------
# metrics


def daily_returns(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    return v[1:] / v[:-1] - 1.0


def cumulative_return(values) -> float:
    """Compounded ``V_T / V_0 - 1``."""
    v = np.asarray(values, dtype=np.float64)
    return float(v[-1] / v[0] - 1.0)


def annualized_return(cum: float, n_years: float) -> float:
    if not n_years > 0:
        raise ValidationError("n_years must be > 0")
    return float((1.0 + cum) ** (1.0 / n_years) - 1.0)


def annualized_volatility(returns) -> float:
    """Sample standard deviation of daily returns times sqrt(252)."""
    r = np.asarray(returns, dtype=np.float64)
    if len(r) < 2:
        return 0.0
    return float(np.std(r, ddof=1) * math.sqrt(TRADING_DAYS))


def sharpe_ratio(returns, risk_free: float = 0.0) -> float:
    r = np.asarray(returns, dtype=np.float64)
    vol = annualized_volatility(r)
    if vol == 0.0:
        raise ZeroVolatility("return series has zero volatility")
    ann = annualized_return(float(np.prod(1.0 + r) - 1.0), len(r) / TRADING_DAYS)
    return (ann - risk_free) / vol


def max_drawdown(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    return float(np.min(v / np.maximum.accumulate(v) - 1.0))


def compute_metrics(values) -> dict:
    """All five metrics from a value series; Sharpe is ``None`` when volatility is zero."""
    v = np.asarray(values, dtype=np.float64)
    r = daily_returns(v)
    cum = cumulative_return(v)
    try:
        sharpe = sharpe_ratio(r)
    except ZeroVolatility:
        sharpe = None
    return {
        "cumulative_return": cum,
        "annualized_return": annualized_return(cum, len(r) / TRADING_DAYS),
        "annualized_volatility": annualized_volatility(r),
        "sharpe_ratio": sharpe,
        "max_drawdown": max_drawdown(v),
    }


# ---------------------------------------------------------------------------
# running policies


@dataclass(eq=False)
class BacktestReport:
    strategy: str
    tickers: tuple[str, ...]
    days: tuple  # one per entry of daily_values
    daily_values: np.ndarray
    trade_log: TradeLog
    metrics: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    frame_days: tuple = ()  # full calendar that trade records index into

    @property
    def daily_returns(self) -> np.ndarray:
        return daily_returns(self.daily_values)

    @property
    def cumulative_return(self) -> float:
        return self.metrics["cumulative_return"]

    @property
    def annualized_return(self) -> float:
        return self.metrics["annualized_return"]

    @property
    def annualized_volatility(self) -> float:
        return self.metrics["annualized_volatility"]

    @property
    def sharpe_ratio(self) -> float | None:
        return self.metrics["sharpe_ratio"]

    @property
    def max_drawdown(self) -> float:
        return self.metrics["max_drawdown"]

    def to_json(self) -> dict:
        return {
            "strategy": self.strategy,
            "tickers": list(self.tickers),
            "start": self.days[0].isoformat(),
            "end": self.days[-1].isoformat(),
            "n_days": len(self.days),
            "metrics": self.metrics,
            "config": self.config,
        }

    def write(self, out_dir: str | Path, stem: str | None = None) -> dict[str, Path]:
        """Write ``<stem>_report.json``, ``<stem>_daily.csv`` and ``<stem>_trades.csv``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = stem or self.strategy
        paths = {
            "json": out / f"{stem}_report.json",
            "values": out / f"{stem}_daily.csv",
            "trades": out / f"{stem}_trades.csv",
        }
        paths["json"].write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")
        r = self.daily_returns
        with paths["values"].open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["date", "value", "daily_return"])
            for t, day in enumerate(self.days):
                w.writerow([day.isoformat(), repr(float(self.daily_values[t])), "" if t == 0 else repr(float(r[t - 1]))])
        self.trade_log.write_csv(paths["trades"], self.tickers, self.frame_days or self.days)
        return paths


def _check_dims(agents: Mapping, frame: MarketFrame) -> None:
    tickers = agents.get("tickers")
    if tickers is not None and list(tickers) != list(frame.tickers):
        raise DimensionMismatch(f"checkpoint tickers {tickers} differ from frame tickers {list(frame.tickers)}")
    n = frame.n_tickers
    if "hlc" in agents and agents["hlc"].n_stocks != n:
        raise DimensionMismatch(f"HLC trained on {agents['hlc'].n_stocks} stocks, frame has {n}")
    if "llc" in agents and agents["llc"].act_dim != n:
        raise DimensionMismatch(f"LLC trained on {agents['llc'].act_dim} stocks, frame has {n}")
    if "flat" in agents and agents["flat"].agent.act_dim != n:
        raise DimensionMismatch(f"flat agent trained on {agents['flat'].agent.act_dim} stocks, frame has {n}")


def run_backtest(
    strategy: StrategyKind | str,
    frame: MarketFrame,
    signals: SignalPanel,
    cfg: EnvConfig = EnvConfig(),
    agents: Mapping | None = None,
    start: int = 0,
    stop: int | None = None,
    seed: int = 0,
) -> BacktestReport:
    """Execute a strategy greedily over days ``[start, stop)``.

    ``agents`` is the mapping returned by ``trainer.load_agents`` (or built
    in memory with the same keys).
    """
    strategy = StrategyKind(strategy)
    agents = agents or {}
    if strategy.needs_checkpoint:
        required = {"hrt": ("hlc", "llc"), "ppo_only": ("hlc",), "ddpg_only": ("flat",)}[strategy.value]
        missing = [k for k in required if k not in agents]
        if missing:
            raise ValidationError(f"strategy {strategy.value} needs trained {', '.join(missing)}")
        _check_dims(agents, frame)
    signals.check_matches(frame)
    env = TradingEnv(frame, signals, cfg, start, stop)
    n = env.n_stocks
    rng = np.random.default_rng(seed)
    _, obs = env.reset()
    values = [env.state.value]
    log = TradeLog()

    if strategy is StrategyKind.BUY_AND_HOLD:
        p = env.state.prices
        target = np.floor(cfg.initial_capital / n / ((1.0 + cfg.cost_rate) * p)).astype(np.int64)
        big = max(int(target.max()), 1)
        env = env.with_config(h_max=big)
        env.reset()

    first = True
    while True:
        if strategy is StrategyKind.HRT:
            d = agents["hlc"].greedy(obs)
            sizes = (agents["llc"].greedy(env.llc_observation(d)) + 1.0) / 2.0
        elif strategy is StrategyKind.PPO_ONLY:
            d = agents["hlc"].greedy(obs)
            sizes = np.ones(n)
        elif strategy is StrategyKind.DDPG_ONLY:
            flat = agents["flat"]
            d, sizes = signed_to_orders(flat.agent.greedy(flat_observation(env, flat.obs_scale)))
        elif strategy is StrategyKind.RANDOM:
            d = rng.integers(-1, 2, size=n)
            sizes = rng.random(n)
        else:
            d = np.ones(n, dtype=np.int64) if first else np.zeros(n, dtype=np.int64)
            sizes = target / env.cfg.h_max if first else np.zeros(n)
        first = False
        res = env.step(d, sizes)
        log.append(res.record)
        values.append(res.state.value)
        if res.done:
            break
        obs = env.hlc_observation()

    return BacktestReport(
        strategy.value,
        frame.tickers,
        frame.days[env.start : env.stop],
        np.asarray(values),
        log,
        compute_metrics(values),
        {
            "env": {
                "initial_capital": cfg.initial_capital,
                "cost_rate": cfg.cost_rate,
                "h_max": cfg.h_max,
                "reward_scale": cfg.reward_scale,
            },
            "window": [env.start, env.stop],
            "seed": seed,
        },
        frame.days,
    )


# ---------------------------------------------------------------------------
# trade-log exports


def log_signed_volume(shares, h_max: int) -> np.ndarray:
    """``sign(q) * ln(1 + min(|q|, h_max))``."""
    q = np.asarray(shares, dtype=np.float64)
    return np.sign(q) * np.log1p(np.minimum(np.abs(q), h_max))


def export_heatmap_data(trade_log: TradeLog, h_max: int, tickers, days, path: str | Path | None = None) -> list[tuple]:
    """Rows ``(ticker, day, log_signed_volume)``; also written as CSV when ``path`` is given."""
    rows = []
    for rec in trade_log.records:
        vals = log_signed_volume(rec.shares, h_max)
        for i, tk in enumerate(tickers):
            rows.append((tk, days[rec.t].isoformat(), float(vals[i])))
    if path is not None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["ticker", "day", "log_signed_volume"])
            for tk, day, v in rows:
                w.writerow([tk, day, repr(v)])
    return rows


def load_sector_map(path: str | Path) -> dict[str, str]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip().lower() for f in reader.fieldnames] != ["ticker", "sector"]:
            raise ValidationError(f"{path}: header must be ticker,sector")
        return {row["ticker"].strip(): row["sector"].strip() for row in reader}


def sector_volume_proportions(trade_log: TradeLog, sector_map: Mapping[str, str], tickers) -> dict[str, float]:
    """Traded notional per sector as a fraction of total traded notional."""
    for tk in tickers:
        if tk not in sector_map:
            raise UnmappedTicker(tk)
    totals: dict[str, float] = {}
    for rec in trade_log.records:
        notional = np.abs(rec.shares * rec.prices)
        for i, tk in enumerate(tickers):
            sec = sector_map[tk]
            totals[sec] = totals.get(sec, 0.0) + float(notional[i])
    grand = sum(totals.values())
    if grand == 0:
        return {sec: 0.0 for sec in totals}
    return {sec: v / grand for sec, v in totals.items()}
