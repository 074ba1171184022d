"""Daily OHLCV ingestion, alignment, synthetic markets and HLC signal panels.

Prices live in ``(n_tickers, n_days)`` float64 arrays. Frames and panels are
immutable after construction: the arrays are flagged read-only.
"""

from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .errors import EmptyIntersection, InvalidSpec, LastDay, MalformedRow, MissingTicker, ValidationError

LONG_HEADER = ("date", "ticker", "open", "high", "low", "close", "volume")
SIGNAL_HEADER = ("date", "ticker", "fr", "ss")
TRADING_DAYS = 252


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


def _check_bar(o: float, h: float, l: float, c: float, v: float) -> str | None:
    for name, x in (("open", o), ("high", h), ("low", l), ("close", c)):
        if not math.isfinite(x) or x <= 0:
            return f"{name} must be finite and > 0, got {x!r}"
    if not math.isfinite(v) or v < 0:
        return f"volume must be finite and >= 0, got {v!r}"
    if l > h:
        return f"low {l!r} > high {h!r}"
    if l > min(o, c):
        return f"low {l!r} above min(open, close)"
    if h < max(o, c):
        return f"high {h!r} below max(open, close)"
    return None


@dataclass(frozen=True)
class OhlcvBar:
    date: dt.date
    open: float
    high: float
    low: float
    close: float
    volume: float

    def __post_init__(self):
        problem = _check_bar(self.open, self.high, self.low, self.close, self.volume)
        if problem:
            raise MalformedRow(problem)


@dataclass(frozen=True, eq=False)
class MarketFrame:
    """Aligned OHLCV + VWAP panel, one row per ticker and one column per day."""

    tickers: tuple[str, ...]
    days: tuple[dt.date, ...]
    open: np.ndarray
    high: np.ndarray
    low: np.ndarray
    close: np.ndarray
    volume: np.ndarray
    vwap: np.ndarray = field(default=None)

    def __post_init__(self):
        shape = (len(self.tickers), len(self.days))
        for name in ("open", "high", "low", "close", "volume"):
            arr = _frozen(getattr(self, name))
            if arr.shape != shape:
                raise ValidationError(f"{name} has shape {arr.shape}, expected {shape}")
            object.__setattr__(self, name, arr)
        if self.vwap is None:
            object.__setattr__(self, "vwap", _frozen((self.high + self.low + self.close) / 3.0))
        else:
            object.__setattr__(self, "vwap", _frozen(self.vwap))
        if len(set(self.tickers)) != len(self.tickers):
            raise ValidationError("tickers must be unique")
        if any(b <= a for a, b in zip(self.days, self.days[1:])):
            raise ValidationError("days must be strictly increasing")
        prices = np.stack([self.open, self.high, self.low, self.close])
        if not np.all(np.isfinite(prices)) or np.any(prices <= 0):
            raise ValidationError("prices must be finite and > 0")
        if np.any(self.low > np.minimum(self.open, self.close)) or np.any(
            self.high < np.maximum(self.open, self.close)
        ):
            raise ValidationError("bars violate low <= open/close <= high")
        if np.any(self.volume < 0):
            raise ValidationError("volume must be >= 0")

    @property
    def n_tickers(self) -> int:
        return len(self.tickers)

    @property
    def n_days(self) -> int:
        return len(self.days)

    def bar(self, i: int, t: int) -> OhlcvBar:
        return OhlcvBar(
            self.days[t],
            float(self.open[i, t]),
            float(self.high[i, t]),
            float(self.low[i, t]),
            float(self.close[i, t]),
            float(self.volume[i, t]),
        )

    def window(self, start: int, stop: int) -> "MarketFrame":
        """Sub-frame over day indices ``[start, stop)``."""
        sl = slice(start, stop)
        return MarketFrame(
            self.tickers,
            self.days[sl],
            self.open[:, sl],
            self.high[:, sl],
            self.low[:, sl],
            self.close[:, sl],
            self.volume[:, sl],
            self.vwap[:, sl],
        )

    def equals(self, other: "MarketFrame") -> bool:
        return (
            self.tickers == other.tickers
            and self.days == other.days
            and all(
                np.array_equal(getattr(self, k), getattr(other, k))
                for k in ("open", "high", "low", "close", "volume", "vwap")
            )
        )


@dataclass(frozen=True, eq=False)
class SignalPanel:
    """Predicted forward returns ``fr`` and sentiment scores ``ss``, both (N, T)."""

    fr: np.ndarray
    ss: np.ndarray

    def __post_init__(self):
        fr, ss = _frozen(self.fr), _frozen(self.ss)
        if fr.shape != ss.shape or fr.ndim != 2:
            raise ValidationError(f"fr {fr.shape} and ss {ss.shape} must be equal 2-D shapes")
        if not (np.all(np.isfinite(fr)) and np.all(np.isfinite(ss))):
            raise ValidationError("signal panel entries must be finite")
        if np.any(np.abs(ss) > 1.0):
            raise ValidationError("sentiment scores must lie in [-1, 1]")
        object.__setattr__(self, "fr", fr)
        object.__setattr__(self, "ss", ss)

    @property
    def shape(self) -> tuple[int, int]:
        return self.fr.shape

    def window(self, start: int, stop: int) -> "SignalPanel":
        return SignalPanel(self.fr[:, start:stop], self.ss[:, start:stop])

    def check_matches(self, frame: MarketFrame) -> None:
        if self.shape != (frame.n_tickers, frame.n_days):
            raise ValidationError(
                f"signal panel {self.shape} does not match frame {(frame.n_tickers, frame.n_days)}"
            )


@dataclass(frozen=True)
class SyntheticMarketSpec:
    n_stocks: int = 5
    n_days: int = 500
    seed: int = 0
    drift: float | Sequence[float] = 0.05
    volatility: float | Sequence[float] = 0.25
    signal_quality: float = 0.8
    sentiment_noise: float = 0.25
    start_date: str = "2015-01-02"

    def validate(self) -> None:
        if int(self.n_stocks) < 1:
            raise InvalidSpec("n_stocks must be >= 1")
        if int(self.n_days) < 2:
            raise InvalidSpec("n_days must be >= 2")
        if not 0.0 <= float(self.signal_quality) <= 1.0:
            raise InvalidSpec("signal_quality must lie in [0, 1]")
        if float(self.sentiment_noise) < 0:
            raise InvalidSpec("sentiment_noise must be >= 0")
        for name in ("drift", "volatility"):
            try:
                arr = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (int(self.n_stocks),))
            except ValueError:
                raise InvalidSpec(f"{name} must be a scalar or one value per stock") from None
            if not np.all(np.isfinite(arr)):
                raise InvalidSpec(f"{name} must be finite")
            if name == "volatility" and np.any(arr <= 0):
                raise InvalidSpec("volatility must be > 0")
        try:
            dt.date.fromisoformat(self.start_date)
        except (TypeError, ValueError) as exc:
            raise InvalidSpec(f"start_date: {exc}") from None


# ---------------------------------------------------------------------------
# CSV ingestion


def _parse_rows(path: Path, rows: Iterable[list[str]], first_line: int, ticker: str | None):
    """Yield (line, ticker, date, o, h, l, c, v) from data rows."""
    for lineno, row in enumerate(rows, start=first_line):
        if not row or all(not cell.strip() for cell in row):
            continue
        try:
            if ticker is None:
                if len(row) != 7:
                    raise ValueError(f"expected 7 fields, got {len(row)}")
                d, tk, o, h, l, c, v = row
            else:
                if len(row) < 6:
                    raise ValueError(f"expected at least 6 fields, got {len(row)}")
                d, o, h, l, c, v = row[:6]
                tk = ticker
            date = dt.date.fromisoformat(d.strip())
            o, h, l, c, v = (float(x) for x in (o, h, l, c, v))
        except ValueError as exc:
            raise MalformedRow(str(exc), line=lineno, path=str(path)) from None
        problem = _check_bar(o, h, l, c, v)
        if problem:
            raise MalformedRow(problem, line=lineno, path=str(path))
        yield lineno, tk.strip(), date, o, h, l, c, v


def _read_long(path: Path):
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip().lower() for h in header) != LONG_HEADER:
            raise MalformedRow(f"header must be {','.join(LONG_HEADER)}", line=1, path=str(path))
        yield from _parse_rows(path, reader, 2, None)


def _read_single(path: Path, ticker: str):
    # Yahoo-style export: Date,Open,High,Low,Close[,Adj Close],Volume
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip().lower() for h in next(reader, [])]
        try:
            cols = [header.index(k) for k in ("date", "open", "high", "low", "close", "volume")]
        except ValueError:
            raise MalformedRow("header must contain Date,Open,High,Low,Close,Volume", line=1, path=str(path)) from None
        projected = ([row[j] if j < len(row) else "" for j in cols] if row else row for row in reader)
        yield from _parse_rows(path, projected, 2, ticker)


def load_csv(path: str | Path, tickers: Sequence[str] | None = None) -> MarketFrame:
    """Load daily bars and align them on the dates common to every ticker.

    ``path`` is either one long-format CSV (``date,ticker,open,high,low,close,volume``)
    or a directory holding one ``<TICKER>.csv`` per symbol.
    """
    path = Path(path)
    records: dict[str, dict[dt.date, tuple]] = {}
    if path.is_dir():
        if tickers is None:
            tickers = sorted(p.stem for p in path.glob("*.csv"))
        sources = []
        for tk in tickers:
            f = path / f"{tk}.csv"
            if not f.exists():
                raise MissingTicker(tk)
            sources.append(_read_single(f, tk))
    elif path.is_file():
        sources = [_read_long(path)]
    else:
        raise FileNotFoundError(path)

    for src in sources:
        for lineno, tk, date, o, h, l, c, v in src:
            by_date = records.setdefault(tk, {})
            if date in by_date:
                raise MalformedRow(f"duplicate date {date} for {tk}", line=lineno, path=str(path))
            by_date[date] = (o, h, l, c, v)

    if tickers is None:
        tickers = list(records)
    tickers = list(tickers)
    for tk in tickers:
        if tk not in records:
            raise MissingTicker(tk)
    common = set.intersection(*(set(records[tk]) for tk in tickers)) if tickers else set()
    if not common:
        raise EmptyIntersection("no trading dates shared by all tickers")
    days = sorted(common)
    cube = np.array([[records[tk][d] for d in days] for tk in tickers], dtype=np.float64)
    frame = MarketFrame(
        tuple(tickers), tuple(days), cube[..., 0], cube[..., 1], cube[..., 2], cube[..., 3], cube[..., 4]
    )
    return compute_vwap(frame)


def write_csv(frame: MarketFrame, path: str | Path) -> None:
    """Write a frame in long format; ``repr`` floats make load_csv an exact inverse."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LONG_HEADER)
        for t, day in enumerate(frame.days):
            for i, tk in enumerate(frame.tickers):
                vol = frame.volume[i, t]
                w.writerow(
                    [
                        day.isoformat(),
                        tk,
                        repr(float(frame.open[i, t])),
                        repr(float(frame.high[i, t])),
                        repr(float(frame.low[i, t])),
                        repr(float(frame.close[i, t])),
                        str(int(vol)) if float(vol).is_integer() else repr(float(vol)),
                    ]
                )


def write_signals_csv(frame: MarketFrame, signals: SignalPanel, path: str | Path) -> None:
    signals.check_matches(frame)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SIGNAL_HEADER)
        for t, day in enumerate(frame.days):
            for i, tk in enumerate(frame.tickers):
                w.writerow([day.isoformat(), tk, repr(float(signals.fr[i, t])), repr(float(signals.ss[i, t]))])


def load_signals_csv(path: str | Path, frame: MarketFrame) -> SignalPanel:
    """Read a ``date,ticker,fr,ss`` file onto the grid of ``frame``."""
    path = Path(path)
    col = {d: t for t, d in enumerate(frame.days)}
    row_of = {tk: i for i, tk in enumerate(frame.tickers)}
    fr = np.full((frame.n_tickers, frame.n_days), np.nan)
    ss = np.full_like(fr, np.nan)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip().lower() for h in header) != SIGNAL_HEADER:
            raise MalformedRow(f"header must be {','.join(SIGNAL_HEADER)}", line=1, path=str(path))
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                d, tk, f, s = row
                date = dt.date.fromisoformat(d)
                f, s = float(f), float(s)
            except ValueError as exc:
                raise MalformedRow(str(exc), line=lineno, path=str(path)) from None
            if date in col and tk in row_of:
                fr[row_of[tk], col[date]] = f
                ss[row_of[tk], col[date]] = s
    if np.isnan(fr).any() or np.isnan(ss).any():
        raise ValidationError(f"{path}: signals do not cover every (ticker, day) of the frame")
    return SignalPanel(fr, ss)


# ---------------------------------------------------------------------------
# derived quantities


def compute_vwap(frame: MarketFrame) -> MarketFrame:
    """Typical-price VWAP proxy (H + L + C) / 3; daily bars carry no intraday volume profile."""
    return MarketFrame(
        frame.tickers,
        frame.days,
        frame.open,
        frame.high,
        frame.low,
        frame.close,
        frame.volume,
        (frame.high + frame.low + frame.close) / 3.0,
    )


def realized_forward_return(frame: MarketFrame, i: int, t: int) -> float:
    """Open-to-open return from day ``t`` to day ``t + 1``."""
    if not 0 <= t < frame.n_days:
        raise IndexError(f"day index {t} out of range")
    if t + 1 >= frame.n_days:
        raise LastDay(f"day {t} is the last day; no forward return")
    return float(frame.open[i, t + 1] / frame.open[i, t] - 1.0)


def forward_returns(frame: MarketFrame) -> np.ndarray:
    """All open-to-open forward returns, shape (N, T - 1)."""
    return frame.open[:, 1:] / frame.open[:, :-1] - 1.0


# ---------------------------------------------------------------------------
# synthetic markets


def _business_days(start: str, n: int) -> tuple[dt.date, ...]:
    first = np.busday_offset(np.datetime64(start, "D"), 0, roll="forward")
    days = np.busday_offset(first, np.arange(n), roll="forward")
    return tuple(d.astype(object) for d in days)


def generate_synthetic(spec: SyntheticMarketSpec) -> tuple[MarketFrame, SignalPanel]:
    """GBM prices plus a forward-return signal with correlation ``signal_quality``.

    The open-to-open log return is split into independent intraday and overnight
    legs so bars have a distinct open and close. The emitted signal is built in
    standardized log-return space and mapped back with ``expm1``, so with
    ``signal_quality == 1`` it reproduces the realized forward return.
    """
    spec.validate()
    n, T = int(spec.n_stocks), int(spec.n_days)
    rho = float(spec.signal_quality)
    rng = np.random.default_rng(spec.seed)
    dt_year = 1.0 / TRADING_DAYS
    mu = np.broadcast_to(np.asarray(spec.drift, dtype=float), (n,))[:, None]
    sigma = np.broadcast_to(np.asarray(spec.volatility, dtype=float), (n,))[:, None]
    m = (mu - 0.5 * sigma**2) * dt_year  # mean daily log return
    s = sigma * math.sqrt(dt_year)  # daily log-return sd

    p0 = rng.uniform(20.0, 200.0, size=(n, 1))
    intraday = 0.5 * m + s * math.sqrt(0.5) * rng.standard_normal((n, T))
    overnight = 0.5 * m + s * math.sqrt(0.5) * rng.standard_normal((n, T))
    wick_hi = np.abs(rng.standard_normal((n, T))) * 0.25 * s
    wick_lo = np.abs(rng.standard_normal((n, T))) * 0.25 * s
    volume = np.round(np.exp(np.log(1e6) + 0.3 * rng.standard_normal((n, T))))
    noise = rng.standard_normal((n, T))
    sent_noise = rng.standard_normal((n, T))

    log_open = np.log(p0) + np.concatenate(
        [np.zeros((n, 1)), np.cumsum(intraday[:, :-1] + overnight[:, :-1], axis=1)], axis=1
    )
    opens = np.exp(log_open)
    closes = opens * np.exp(intraday)
    highs = np.maximum(opens, closes) * np.exp(wick_hi)
    lows = np.minimum(opens, closes) * np.exp(-wick_lo)

    frame = MarketFrame(
        tuple(f"SYN{i:03d}" for i in range(n)), _business_days(spec.start_date, T), opens, highs, lows, closes, volume
    )
    frame = compute_vwap(frame)

    z = np.zeros((n, T))
    z[:, :-1] = (np.log1p(forward_returns(frame)) - m) / s
    fr = np.expm1(m + s * (rho * z + math.sqrt(max(0.0, 1.0 - rho * rho)) * noise))
    if rho == 1.0:
        # exact sign agreement where the realized move is known
        fr[:, :-1] = forward_returns(frame)
    mag = np.abs(np.tanh(fr / s)) * np.exp(spec.sentiment_noise * sent_noise)
    ss = np.sign(fr) * np.minimum(1.0, mag)
    return frame, SignalPanel(fr, ss)


# ---------------------------------------------------------------------------
# signal providers


class SignalProvider(Protocol):
    """Anything that maps a frame to a SignalPanel of the same shape."""

    def __call__(self, frame: MarketFrame) -> SignalPanel: ...


def baseline_signals(frame: MarketFrame, lookback: int = 10, noise: float = 0.0, seed: int = 0) -> SignalPanel:
    """Momentum baseline.

    ``fr[:, t]`` is the mean of the ``lookback`` open-to-open returns ending at
    day ``t``; ``ss`` is ``tanh`` of ``fr`` in units of its own dispersion, with
    optional multiplicative seeded noise. The first ``lookback`` days are zero.
    """
    if lookback < 1:
        raise ValidationError("lookback must be >= 1")
    n, T = frame.n_tickers, frame.n_days
    fr = np.zeros((n, T))
    if T > lookback:
        back = frame.open[:, 1:] / frame.open[:, :-1] - 1.0  # back[:, k-1] ends at day k
        fr[:, lookback:] = np.lib.stride_tricks.sliding_window_view(back, lookback, axis=1).mean(axis=-1)
    scale = float(np.std(fr[:, lookback:])) if T > lookback else 0.0
    if not scale > 0:
        scale = 1.0
    ss = np.tanh(fr / scale)
    if noise > 0:
        ss = ss * np.exp(noise * np.random.default_rng(seed).standard_normal((n, T)))
    return SignalPanel(fr, np.clip(ss, -1.0, 1.0))


@dataclass(frozen=True)
class MomentumSignals:
    lookback: int = 10
    noise: float = 0.0
    seed: int = 0

    def __call__(self, frame: MarketFrame) -> SignalPanel:
        return baseline_signals(frame, self.lookback, self.noise, self.seed)


@dataclass(frozen=True)
class CsvSignals:
    path: str

    def __call__(self, frame: MarketFrame) -> SignalPanel:
        return load_signals_csv(self.path, frame)
