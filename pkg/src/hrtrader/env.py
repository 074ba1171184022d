"""Two-level trading MDP over a MarketFrame.

Each trading day ``t`` the high-level controller picks a direction per stock,
the low-level controller picks a size in ``[0, 1]`` per stock, and trades fill
at ``open[t]``. Rewards are realized at ``open[t + 1]``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FrameTooShort, NonFiniteSizes, ValidationError
from .marketdata import MarketFrame, SignalPanel

TRADE_LOG_HEADER = ("day", "ticker", "action", "shares_executed", "price", "cost")


@dataclass(frozen=True)
class EnvConfig:
    initial_capital: float = 1_000_000.0
    cost_rate: float = 0.001
    h_max: int = 100
    reward_scale: float = 1e-4

    def __post_init__(self):
        if not self.initial_capital > 0:
            raise ValidationError("initial_capital must be > 0")
        if not 0.0 <= self.cost_rate < 1.0:
            raise ValidationError("cost_rate must lie in [0, 1)")
        if int(self.h_max) < 1:
            raise ValidationError("h_max must be >= 1")
        if not self.reward_scale > 0:
            raise ValidationError("reward_scale must be > 0")


@dataclass(frozen=True, eq=False)
class PortfolioState:
    prices: np.ndarray
    holdings: np.ndarray
    cash: float
    t: int

    @property
    def value(self) -> float:
        return portfolio_value(self.prices, self.holdings, self.cash)


def portfolio_value(prices: np.ndarray, holdings: np.ndarray, cash: float) -> float:
    return float(np.dot(prices, holdings) + cash)


@dataclass(frozen=True, eq=False)
class TradeRecord:
    """Fills for one trading day: signed share counts, fill prices, fees."""

    t: int
    shares: np.ndarray
    prices: np.ndarray
    costs: np.ndarray


@dataclass
class TradeLog:
    records: list[TradeRecord] = field(default_factory=list)

    def append(self, rec: TradeRecord) -> None:
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def shares_matrix(self) -> np.ndarray:
        """Executed shares, shape (n_tickers, n_records)."""
        if not self.records:
            return np.zeros((0, 0), dtype=np.int64)
        return np.stack([r.shares for r in self.records], axis=1)

    def rows(self, tickers: Sequence[str], days: Sequence) -> list[tuple]:
        out = []
        for r in self.records:
            for i, tk in enumerate(tickers):
                q = int(r.shares[i])
                action = "buy" if q > 0 else "sell" if q < 0 else "hold"
                out.append((days[r.t].isoformat(), tk, action, q, float(r.prices[i]), float(r.costs[i])))
        return out

    def write_csv(self, path: str | Path, tickers: Sequence[str], days: Sequence) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRADE_LOG_HEADER)
            for row in self.rows(tickers, days):
                w.writerow([row[0], row[1], row[2], row[3], repr(row[4]), repr(row[5])])


# ---------------------------------------------------------------------------
# rewards


def alignment_reward(a_i: int, delta_p: float) -> int:
    """+1 when the direction matches the price move, -1 when opposed, 0 on hold."""
    if a_i not in (-1, 0, 1):
        raise ValidationError(f"directive entry must be -1, 0 or 1, got {a_i!r}")
    if a_i == 0:
        return 0
    return int(np.sign(a_i) * np.sign(delta_p))


def alignment_rewards(directive: np.ndarray, delta_p: np.ndarray) -> np.ndarray:
    return (np.asarray(directive) * np.sign(delta_p)).astype(np.float64)


def alpha_schedule(t: float, alpha0: float = 1.0, lam: float = 0.001) -> float:
    return alpha0 * math.exp(-lam * t)


def hlc_reward(align_sum: float, llc_reward: float, alpha_t: float) -> float:
    """Mix of the alignment total and the (already scaled) portfolio reward."""
    return alpha_t * align_sum + (1.0 - alpha_t) * llc_reward


# ---------------------------------------------------------------------------
# execution


def _check_directive(directive) -> np.ndarray:
    d = np.asarray(directive)
    if d.ndim != 1 or not np.all(np.isin(d, (-1, 0, 1))):
        raise ValidationError("directive entries must lie in {-1, 0, 1}")
    return d.astype(np.int64)


def execute_trades(
    state: PortfolioState,
    directive,
    sizes,
    cfg: EnvConfig,
    next_prices: np.ndarray,
) -> tuple[PortfolioState, float, TradeRecord]:
    """Fill one day of orders at ``state.prices`` and mark to ``next_prices``.

    Sells settle before buys; buys go in ascending stock order and are each
    capped by the cash left, so holdings and cash never go negative.
    """
    d = _check_directive(directive)
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.shape != d.shape:
        raise ValidationError(f"sizes shape {sizes.shape} != directive shape {d.shape}")
    if not np.all(np.isfinite(sizes)):
        raise NonFiniteSizes("trade sizes must be finite")
    p = np.asarray(state.prices, dtype=np.float64)
    c = cfg.cost_rate
    want = np.floor(np.clip(sizes, 0.0, 1.0) * cfg.h_max + 0.5).astype(np.int64)
    want[d == 0] = 0

    h = state.holdings.astype(np.int64).copy()
    cash = float(state.cash)
    shares = np.zeros_like(h)
    costs = np.zeros_like(p)

    for i in np.flatnonzero(d == -1):
        q = min(int(want[i]), int(h[i]))
        if q > 0:
            notional = p[i] * q
            fee = c * notional
            cash += notional - fee
            h[i] -= q
            shares[i] = -q
            costs[i] = fee
    for i in np.flatnonzero(d == 1):
        q = min(int(want[i]), int(math.floor(cash / ((1.0 + c) * p[i]))))
        while q > 0 and p[i] * q * (1.0 + c) > cash:
            q -= 1
        if q > 0:
            notional = p[i] * q
            fee = c * notional
            cash -= notional + fee
            h[i] += q
            shares[i] = q
            costs[i] = fee

    before = portfolio_value(p, state.holdings, state.cash)
    nxt = np.asarray(next_prices, dtype=np.float64)
    after = portfolio_value(nxt, h, cash)
    r_l = cfg.reward_scale * (after - before)
    new_state = PortfolioState(nxt.copy(), h, cash, state.t + 1)
    return new_state, r_l, TradeRecord(state.t, shares, p.copy(), costs)


# ---------------------------------------------------------------------------
# observations


def hlc_observe(signals: SignalPanel, t: int) -> np.ndarray:
    """``[fr[:, t], ss[:, t]]``."""
    T = signals.shape[1]
    if not 0 <= t < T:
        raise IndexError(f"day {t} outside signal panel of {T} days")
    return np.concatenate([signals.fr[:, t], signals.ss[:, t]])


def llc_observe(
    state: PortfolioState,
    directive,
    cfg: EnvConfig,
    ref_prices: np.ndarray,
) -> np.ndarray:
    """``[p / p_ref, h / h_max, b / capital, a^h]``, length 3N + 1."""
    d = _check_directive(directive)
    return np.concatenate(
        [
            state.prices / ref_prices,
            state.holdings / float(cfg.h_max),
            [state.cash / cfg.initial_capital],
            d.astype(np.float64),
        ]
    )


@dataclass(frozen=True, eq=False)
class StepResult:
    state: PortfolioState
    r_l: float
    align: np.ndarray
    record: TradeRecord
    done: bool

    @property
    def align_sum(self) -> float:
        return float(self.align.sum())


class TradingEnv:
    """Day-by-day environment over the day window ``[start, stop)`` of a frame."""

    def __init__(
        self,
        frame: MarketFrame,
        signals: SignalPanel,
        cfg: EnvConfig = EnvConfig(),
        start: int = 0,
        stop: int | None = None,
    ):
        signals.check_matches(frame)
        stop = frame.n_days if stop is None else stop
        if not 0 <= start < stop <= frame.n_days:
            raise ValidationError(f"bad window [{start}, {stop}) for {frame.n_days} days")
        if stop - start < 2:
            raise FrameTooShort("need at least 2 days to trade")
        self.frame = frame
        self.signals = signals
        self.cfg = cfg
        self.start = start
        self.stop = stop
        self.ref_prices = frame.open[:, start].copy()
        self.state: PortfolioState | None = None

    @property
    def n_stocks(self) -> int:
        return self.frame.n_tickers

    @property
    def n_steps(self) -> int:
        return self.stop - self.start - 1

    def reset(self) -> tuple[PortfolioState, np.ndarray]:
        n = self.n_stocks
        self.state = PortfolioState(
            self.frame.open[:, self.start].copy(), np.zeros(n, dtype=np.int64), float(self.cfg.initial_capital), self.start
        )
        return self.state, self.hlc_observation()

    def hlc_observation(self) -> np.ndarray:
        return hlc_observe(self.signals, self.state.t)

    def llc_observation(self, directive) -> np.ndarray:
        return llc_observe(self.state, directive, self.cfg, self.ref_prices)

    def step(self, directive, sizes) -> StepResult:
        if self.state is None:
            raise RuntimeError("call reset() first")
        t = self.state.t
        if t >= self.stop - 1:
            raise RuntimeError("episode already finished")
        nxt = self.frame.open[:, t + 1]
        new_state, r_l, rec = execute_trades(self.state, directive, sizes, self.cfg, nxt)
        align = alignment_rewards(directive, nxt - self.frame.open[:, t])
        self.state = new_state
        return StepResult(new_state, r_l, align, rec, new_state.t >= self.stop - 1)

    def with_config(self, **changes) -> "TradingEnv":
        return TradingEnv(self.frame, self.signals, replace(self.cfg, **changes), self.start, self.stop)
