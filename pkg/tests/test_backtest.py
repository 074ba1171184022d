import csv
import datetime as dt
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hrtrader.backtest import (
    METRICS,
    StrategyKind,
    annualized_return,
    annualized_volatility,
    compute_metrics,
    cumulative_return,
    daily_returns,
    export_heatmap_data,
    load_sector_map,
    log_signed_volume,
    max_drawdown,
    run_backtest,
    sector_volume_proportions,
    sharpe_ratio,
)
from hrtrader.ddpg import DdpgConfig
from hrtrader.env import EnvConfig, TradeLog, TradeRecord
from hrtrader.errors import DimensionMismatch, UnmappedTicker, ValidationError, ZeroVolatility
from hrtrader.marketdata import MarketFrame, SignalPanel, SyntheticMarketSpec, generate_synthetic
from hrtrader.ppo import PpoConfig
from hrtrader.trainer import HrtTrainer, TrainSchedule


def _series(seed, T=200):
    rng = np.random.default_rng(seed)
    return 1e6 * np.cumprod(np.r_[1.0, 1.0 + rng.normal(0.0005, 0.01, T - 1)])


# brute-force oracles written with plain Python loops
def oracle_metrics(values):
    v = [float(x) for x in values]
    r = [v[t + 1] / v[t] - 1 for t in range(len(v) - 1)]
    prod = 1.0
    for x in r:
        prod *= 1 + x
    cum = prod - 1
    n_years = len(r) / 252
    ann = (1 + cum) ** (1 / n_years) - 1
    mean = sum(r) / len(r)
    var = sum((x - mean) ** 2 for x in r) / (len(r) - 1)
    vol = math.sqrt(var) * math.sqrt(252)
    return {
        "cumulative_return": cum,
        "annualized_return": ann,
        "annualized_volatility": vol,
        "sharpe_ratio": ann / vol,
        "max_drawdown": oracle_drawdown(v),
    }


def oracle_drawdown(values):
    """Worst decline over every (peak, later trough) pair."""
    dd = 0.0
    for i in range(len(values)):
        for j in range(i, len(values)):
            dd = min(dd, values[j] / values[i] - 1)
    return dd


class TestMetricExamples:
    def test_cumulative(self):
        assert cumulative_return([100, 110]) == pytest.approx(0.1, abs=1e-15)
        assert cumulative_return([5.0] * 7) == 0.0

    def test_cumulative_product_identity(self):
        v = _series(3)
        r = daily_returns(v)
        assert abs(cumulative_return(v) - (np.prod(1 + r) - 1)) < 1e-12

    def test_annualized(self):
        assert annualized_return(0.21, 2) == pytest.approx(0.1, abs=1e-15)
        assert annualized_return(0.0, 3.7) == 0.0
        assert annualized_return(0.2913, 1) == pytest.approx(0.2913, abs=1e-15)
        # a one-calendar-year window covers about 248 trading days under a 252-day year
        assert annualized_return(0.2913, 248 / 252) == pytest.approx(0.2961, abs=1e-3)
        with pytest.raises(ValidationError):
            annualized_return(0.1, 0)

    def test_volatility(self):
        assert annualized_volatility(np.full(10, 0.003)) == 0.0
        alt = np.array([0.01, -0.01] * 50)
        # sample std of n alternating +-c values is c * sqrt(n / (n - 1))
        assert annualized_volatility(alt) == pytest.approx(0.01 * math.sqrt(100 / 99) * math.sqrt(252), abs=1e-15)

    def test_volatility_two_pass(self):
        r = daily_returns(_series(5))
        m = sum(r) / len(r)
        two_pass = math.sqrt(sum((x - m) ** 2 for x in r) / (len(r) - 1)) * math.sqrt(252)
        assert abs(annualized_volatility(r) - two_pass) < 1e-12

    def test_sharpe(self):
        with pytest.raises(ZeroVolatility):
            sharpe_ratio(np.zeros(20))
        assert sharpe_ratio(np.array([0.02, 0.0, 0.01, 0.005])) > 0
        # two-point series: mean m, spread c, 252 days
        m, c = 0.001, 0.004
        r = np.array([m + c, m - c] * 126)
        ann = ((1 + m + c) * (1 + m - c)) ** 126 - 1  # exactly one year
        vol = c * math.sqrt(252 / 251) * math.sqrt(252)
        assert sharpe_ratio(r) == pytest.approx(ann / vol, abs=1e-10)

    def test_drawdown(self):
        assert max_drawdown([1, 2, 3, 4]) == 0.0
        assert max_drawdown([100, 80, 120, 60]) == pytest.approx(-0.5, abs=1e-15)
        v = _series(7)
        assert max_drawdown(v) == pytest.approx(max_drawdown(v * 37.5), abs=1e-15)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(0.01, 1e6), min_size=2, max_size=40))
    def test_drawdown_bounds_and_enumeration(self, values):
        dd = max_drawdown(values)
        assert -1 < dd <= 0
        assert dd == pytest.approx(oracle_drawdown(values), abs=1e-12)

    def test_compute_metrics_flat(self):
        m = compute_metrics([10.0] * 5)
        assert m["sharpe_ratio"] is None
        assert all(m[k] == 0.0 for k in METRICS if k != "sharpe_ratio")

    @pytest.mark.parametrize("seed", range(20))
    def test_against_oracle(self, seed):
        v = _series(seed, T=50 + 10 * seed)
        got, want = compute_metrics(v), oracle_metrics(v)
        for k in METRICS:
            assert abs(got[k] - want[k]) < 1e-9


def _flat_market(n=2, T=6, price=50.0):
    days = tuple(dt.date(2024, 1, 1) + dt.timedelta(days=k) for k in range(T))
    p = np.full((n, T), price)
    frame = MarketFrame(tuple(f"S{i}" for i in range(n)), days, p, p, p, p, np.ones((n, T)))
    return frame, SignalPanel(np.zeros((n, T)), np.zeros((n, T)))


class TestRunBacktest:
    def test_buy_and_hold_flat_market(self):
        frame, sig = _flat_market()
        rep = run_backtest("buy_and_hold_equal_weight", frame, sig, EnvConfig(cost_rate=0.0))
        assert rep.sharpe_ratio is None
        assert rep.cumulative_return == 0 and rep.max_drawdown == 0 and rep.annualized_volatility == 0
        assert rep.trade_log.records[0].shares.tolist() == [10000, 10000]

    def test_buy_and_hold_closed_form(self):
        frame, sig = generate_synthetic(SyntheticMarketSpec(n_stocks=4, n_days=80, seed=2))
        cfg = EnvConfig(cost_rate=0.0)
        rep = run_backtest("buy_and_hold_equal_weight", frame, sig, cfg, start=10, stop=70)
        p0 = frame.open[:, 10]
        shares = np.floor(cfg.initial_capital / 4 / p0)
        cash = cfg.initial_capital - shares @ p0
        expect = shares @ frame.open[:, 10:70] + cash
        assert np.max(np.abs(rep.daily_values - expect)) < 1e-9
        assert rep.daily_values[0] == cfg.initial_capital

    def test_random_is_deterministic(self):
        frame, sig = generate_synthetic(SyntheticMarketSpec(n_stocks=3, n_days=40, seed=1))
        a = run_backtest("random", frame, sig, seed=4)
        b = run_backtest("random", frame, sig, seed=4)
        c = run_backtest("random", frame, sig, seed=5)
        assert np.array_equal(a.daily_values, b.daily_values) and a.metrics == b.metrics
        assert all(np.array_equal(x.shares, y.shares) for x, y in zip(a.trade_log.records, b.trade_log.records))
        assert not np.array_equal(a.daily_values, c.daily_values)

    def test_value_continuity_against_trade_log(self):
        frame, sig = generate_synthetic(SyntheticMarketSpec(n_stocks=3, n_days=60, seed=8))
        rep = run_backtest("random", frame, sig, seed=1, start=5, stop=55)
        v = rep.daily_values
        assert np.all(v > 0) and v[0] == EnvConfig().initial_capital
        holdings = np.zeros(3)
        for k, rec in enumerate(rep.trade_log.records):
            assert rec.t == 5 + k and np.array_equal(rec.prices, frame.open[:, rec.t])
            holdings = holdings + rec.shares
            move = holdings @ (frame.open[:, rec.t + 1] - frame.open[:, rec.t])
            assert v[k + 1] == pytest.approx(v[k] - rec.costs.sum() + move, rel=1e-12)

    def test_checkpointed_strategies_need_agents(self):
        frame, sig = _flat_market()
        for kind in ("hrt", "ppo_only", "ddpg_only"):
            with pytest.raises(ValidationError):
                run_backtest(kind, frame, sig)

    def test_dimension_mismatch(self):
        frame, sig = generate_synthetic(SyntheticMarketSpec(n_stocks=2, n_days=20, seed=0))
        tr = HrtTrainer(frame, sig, EnvConfig(), PpoConfig(), DdpgConfig(), TrainSchedule(e_hlc=1, e_llc=1))
        other, osig = generate_synthetic(SyntheticMarketSpec(n_stocks=3, n_days=20, seed=0))
        with pytest.raises(DimensionMismatch):
            run_backtest("hrt", other, osig, agents={"hlc": tr.hlc, "llc": tr.llc})
        with pytest.raises(DimensionMismatch):
            run_backtest("hrt", frame, sig, agents={"hlc": tr.hlc, "llc": tr.llc, "tickers": ["X", "Y"]})

    def test_strategy_kind_is_exhaustive(self):
        assert {k.value for k in StrategyKind} == {"hrt", "ppo_only", "ddpg_only", "random", "buy_and_hold_equal_weight"}
        with pytest.raises(ValueError):
            StrategyKind("momentum")

    def test_report_files_recompute(self, tmp_path):
        frame, sig = generate_synthetic(SyntheticMarketSpec(n_stocks=2, n_days=40, seed=3))
        rep = run_backtest("random", frame, sig, seed=2)
        paths = rep.write(tmp_path)
        payload = json.loads(paths["json"].read_text())
        with paths["values"].open() as fh:
            values = [float(row["value"]) for row in csv.DictReader(fh)]
        assert compute_metrics(values) == payload["metrics"]
        assert payload["n_days"] == 40 and payload["strategy"] == "random"
        with paths["trades"].open() as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["day", "ticker", "action", "shares_executed", "price", "cost"]

    def test_hrt_beats_buy_and_hold_on_perfect_signal(self):
        frame, sig = generate_synthetic(SyntheticMarketSpec(n_stocks=3, n_days=120, seed=1, signal_quality=1.0))
        sched = TrainSchedule(e_hlc=20, e_llc=20, phase3_block=2, max_phase3_episodes=4, seed=0)
        tr = HrtTrainer(frame, sig, EnvConfig(), PpoConfig(), DdpgConfig(batch_size=64), sched).run()
        hrt = run_backtest("hrt", frame, sig, agents={"hlc": tr.hlc, "llc": tr.llc})
        bh = run_backtest("buy_and_hold_equal_weight", frame, sig)
        assert hrt.cumulative_return > bh.cumulative_return


class TestExports:
    def test_log_signed_volume_examples(self):
        got = log_signed_volume([0, 100, -5, 500], h_max=100)
        assert got[0] == 0.0
        assert got[1] == pytest.approx(math.log(101), abs=1e-15)
        assert got[2] == pytest.approx(-math.log(6), abs=1e-15)
        assert got[3] == got[1]

    def test_heatmap_csv(self, tmp_path):
        log = TradeLog([TradeRecord(0, np.array([100, -5]), np.ones(2), np.zeros(2)), TradeRecord(1, np.array([0, 3]), np.ones(2), np.zeros(2))])
        days = (dt.date(2024, 1, 2), dt.date(2024, 1, 3))
        rows = export_heatmap_data(log, 100, ("A", "B"), days, tmp_path / "h.csv")
        assert rows[0] == ("A", "2024-01-02", pytest.approx(math.log(101)))
        with (tmp_path / "h.csv").open() as fh:
            back = list(csv.reader(fh))
        assert back[0] == ["ticker", "day", "log_signed_volume"]
        assert [float(r[2]) for r in back[1:]] == [x[2] for x in rows]

    def _log(self, rng, n=4, T=30):
        return TradeLog(
            [TradeRecord(t, rng.integers(-50, 50, n), rng.uniform(10, 100, n), np.zeros(n)) for t in range(T)]
        )

    def test_sector_proportions_examples(self):
        log = TradeLog([TradeRecord(0, np.array([10, -20]), np.array([4.0, 2.0]), np.zeros(2))])
        assert sector_volume_proportions(log, {"A": "tech", "B": "tech"}, ("A", "B")) == {"tech": 1.0}
        assert sector_volume_proportions(log, {"A": "tech", "B": "energy"}, ("A", "B")) == {"tech": 0.5, "energy": 0.5}

    def test_sector_proportions_group_by_oracle(self):
        rng = np.random.default_rng(0)
        tickers = ("A", "B", "C", "D")
        smap = {"A": "x", "B": "y", "C": "x", "D": "z"}
        log = self._log(rng)
        got = sector_volume_proportions(log, smap, tickers)
        totals = {}
        for rec in log.records:
            for i, tk in enumerate(tickers):
                totals[smap[tk]] = totals.get(smap[tk], 0.0) + abs(float(rec.shares[i]) * float(rec.prices[i]))
        grand = sum(totals.values())
        assert abs(sum(got.values()) - 1) < 1e-12
        for sec in totals:
            assert got[sec] == pytest.approx(totals[sec] / grand, abs=1e-12)

    def test_unmapped_ticker(self):
        log = self._log(np.random.default_rng(1), n=2)
        with pytest.raises(UnmappedTicker):
            sector_volume_proportions(log, {"A": "x"}, ("A", "B"))

    def test_load_sector_map(self, tmp_path):
        p = tmp_path / "s.csv"
        p.write_text("ticker,sector\nA,tech\nB,energy\n")
        assert load_sector_map(p) == {"A": "tech", "B": "energy"}
        p.write_text("name,group\nA,tech\n")
        with pytest.raises(ValidationError):
            load_sector_map(p)
