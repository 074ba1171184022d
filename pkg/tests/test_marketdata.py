import csv
import datetime as dt

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hrtrader.errors import EmptyIntersection, InvalidSpec, LastDay, MalformedRow, MissingTicker
from hrtrader.marketdata import (
    MarketFrame,
    SyntheticMarketSpec,
    baseline_signals,
    compute_vwap,
    forward_returns,
    generate_synthetic,
    load_csv,
    load_signals_csv,
    realized_forward_return,
    write_csv,
    write_signals_csv,
)


def _write_long(path, rows):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "ticker", "open", "high", "low", "close", "volume"])
        w.writerows(rows)


def _frame_from_opens(opens):
    opens = np.asarray(opens, dtype=float)
    n, T = opens.shape
    days = tuple(dt.date(2020, 1, 1) + dt.timedelta(days=k) for k in range(T))
    return MarketFrame(tuple(f"S{i}" for i in range(n)), days, opens, opens * 1.01, opens * 0.99, opens, np.ones((n, T)))


def _random_frame(n, T, seed):
    rng = np.random.default_rng(seed)
    o = 50 + 50 * rng.random((n, T))
    c = 50 + 50 * rng.random((n, T))
    h = np.maximum(o, c) * (1 + rng.random((n, T)) * 0.02)
    l = np.minimum(o, c) * (1 - rng.random((n, T)) * 0.02)
    days = tuple(dt.date(2021, 1, 4) + dt.timedelta(days=k) for k in range(T))
    return MarketFrame(tuple(f"R{i}" for i in range(n)), days, o, h, l, c, rng.integers(0, 10**6, (n, T)))


class TestLoadCsv:
    def test_alignment_is_date_intersection(self, tmp_path):
        p = tmp_path / "long.csv"
        rows = []
        for d in ("2020-01-02", "2020-01-03", "2020-01-06"):
            rows.append([d, "AAA", 10, 11, 9, 10.5, 100])
        for d in ("2020-01-03", "2020-01-06", "2020-01-07"):
            rows.append([d, "BBB", 20, 21, 19, 20.5, 200])
        _write_long(p, rows)
        frame = load_csv(p, ["AAA", "BBB"])
        assert frame.days == (dt.date(2020, 1, 3), dt.date(2020, 1, 6))
        assert frame.tickers == ("AAA", "BBB")

    def test_low_above_high_is_malformed_with_line(self, tmp_path):
        p = tmp_path / "bad.csv"
        _write_long(p, [["2020-01-02", "AAA", 10, 11, 9, 10, 5], ["2020-01-03", "AAA", 10, 9, 12, 10, 5]])
        with pytest.raises(MalformedRow) as err:
            load_csv(p)
        assert err.value.line == 3

    def test_unparseable_row(self, tmp_path):
        p = tmp_path / "bad.csv"
        _write_long(p, [["2020-01-02", "AAA", "ten", 11, 9, 10, 5]])
        with pytest.raises(MalformedRow):
            load_csv(p)

    def test_missing_ticker(self, tmp_path):
        p = tmp_path / "long.csv"
        _write_long(p, [["2020-01-02", "AAA", 10, 11, 9, 10, 5]])
        with pytest.raises(MissingTicker):
            load_csv(p, ["AAA", "ZZZ"])

    def test_empty_intersection(self, tmp_path):
        p = tmp_path / "long.csv"
        _write_long(p, [["2020-01-02", "AAA", 10, 11, 9, 10, 5], ["2020-01-03", "BBB", 10, 11, 9, 10, 5]])
        with pytest.raises(EmptyIntersection):
            load_csv(p, ["AAA", "BBB"])

    def test_directory_of_yahoo_files(self, tmp_path):
        for tk, dates in (("AAA", ["2020-01-02", "2020-01-03"]), ("BBB", ["2020-01-03", "2020-01-06"])):
            with (tmp_path / f"{tk}.csv").open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["Date", "Open", "High", "Low", "Close", "Adj Close", "Volume"])
                for d in dates:
                    w.writerow([d, 10, 11, 9, 10, 9.8, 1000])
        frame = load_csv(tmp_path, ["AAA", "BBB"])
        assert frame.days == (dt.date(2020, 1, 3),)
        with pytest.raises(MissingTicker):
            load_csv(tmp_path, ["CCC"])

    def test_30_by_504_spot_check_against_independent_parse(self, tmp_path):
        rng = np.random.default_rng(3)
        p = tmp_path / "big.csv"
        rows = []
        all_days = [dt.date(2019, 1, 1) + dt.timedelta(days=k) for k in range(520)]
        for i in range(30):
            drop = set(rng.choice(520, size=8, replace=False)) if i < 2 else set()
            for k, d in enumerate(all_days):
                if k in drop:
                    continue
                o, c = (float(x) for x in 100 * rng.random(2) + 1)
                rows.append([d.isoformat(), f"T{i:02d}", repr(o), repr(max(o, c) + 1), repr(min(o, c) / 2), repr(c), 7])
        _write_long(p, rows)
        frame = load_csv(p)
        # independent re-parse
        per = {}
        with p.open() as fh:
            for r in csv.DictReader(fh):
                per.setdefault(r["ticker"], {})[r["date"]] = r
        common = sorted(set.intersection(*(set(v) for v in per.values())))
        assert frame.n_tickers == 30 and frame.n_days == len(common)
        assert 504 <= frame.n_days <= 512
        i, t = 17, 250
        src = per[frame.tickers[i]][common[t]]
        assert frame.days[t].isoformat() == common[t]
        assert frame.open[i, t] == float(src["open"])
        assert frame.high[i, t] == float(src["high"])
        assert frame.low[i, t] == float(src["low"])
        assert frame.close[i, t] == float(src["close"])
        assert frame.volume[i, t] == float(src["volume"])

    def test_write_then_load_is_exact(self, tmp_path):
        frame, _ = generate_synthetic(SyntheticMarketSpec(n_stocks=3, n_days=40, seed=9))
        write_csv(frame, tmp_path / "m.csv")
        assert load_csv(tmp_path / "m.csv").equals(frame)

    def test_signals_round_trip(self, tmp_path):
        frame, sig = generate_synthetic(SyntheticMarketSpec(n_stocks=2, n_days=15, seed=2))
        write_signals_csv(frame, sig, tmp_path / "s.csv")
        back = load_signals_csv(tmp_path / "s.csv", frame)
        assert np.array_equal(back.fr, sig.fr) and np.array_equal(back.ss, sig.ss)


class TestVwap:
    def test_arithmetic(self):
        f = MarketFrame(("A",), (dt.date(2020, 1, 1),), [[10.0]], [[12.0]], [[8.0]], [[10.0]], [[1.0]])
        assert compute_vwap(f).vwap[0, 0] == 10.0

    def test_constant_prices(self):
        f = _frame_from_opens(np.full((2, 5), 7.0))
        f = MarketFrame(f.tickers, f.days, f.open, f.open, f.open, f.open, f.volume)
        assert np.all(compute_vwap(f).vwap == 7.0)

    def test_matches_elementwise_oracle_and_bounds(self):
        f = compute_vwap(_random_frame(5, 20, 0))
        for i in range(5):
            for t in range(20):
                expect = (f.high[i, t] + f.low[i, t] + f.close[i, t]) / 3.0
                assert f.vwap[i, t] == pytest.approx(expect, rel=1e-15)
                assert f.low[i, t] <= f.vwap[i, t] <= f.high[i, t]


class TestForwardReturn:
    def test_arithmetic(self):
        f = _frame_from_opens([[100.0, 101.0, 101.0]])
        assert realized_forward_return(f, 0, 0) == pytest.approx(0.01)
        assert realized_forward_return(f, 0, 1) == 0.0

    def test_last_day(self):
        f = _frame_from_opens([[100.0, 101.0]])
        with pytest.raises(LastDay):
            realized_forward_return(f, 0, 1)

    def test_matches_loop_oracle(self):
        f = _random_frame(3, 10, 1)
        vec = forward_returns(f)
        for i in range(3):
            for t in range(9):
                assert vec[i, t] == realized_forward_return(f, i, t) == f.open[i, t + 1] / f.open[i, t] - 1


class TestSynthetic:
    def test_rho_one_signs_match(self):
        frame, sig = generate_synthetic(SyntheticMarketSpec(n_stocks=4, n_days=300, seed=5, signal_quality=1.0))
        fwd = forward_returns(frame)
        nz = fwd != 0
        assert np.all(np.sign(sig.fr[:, :-1][nz]) == np.sign(fwd[nz]))

    def test_rho_zero_uncorrelated(self):
        frame, sig = generate_synthetic(SyntheticMarketSpec(n_stocks=5, n_days=500, seed=11, signal_quality=0.0))
        fwd = forward_returns(frame)
        assert fwd.size >= 2000
        assert abs(np.corrcoef(sig.fr[:, :-1].ravel(), fwd.ravel())[0, 1]) < 0.1

    def test_rho_point_eight_correlation(self):
        frame, sig = generate_synthetic(SyntheticMarketSpec(n_stocks=5, n_days=500, seed=11, signal_quality=0.8))
        c = np.corrcoef(sig.fr[:, :-1].ravel(), forward_returns(frame).ravel())[0, 1]
        assert c == pytest.approx(0.8, abs=0.03)

    def test_deterministic(self):
        spec = SyntheticMarketSpec(n_stocks=3, n_days=50, seed=42)
        (f1, s1), (f2, s2) = generate_synthetic(spec), generate_synthetic(spec)
        assert f1.equals(f2)
        assert np.array_equal(s1.fr, s2.fr) and np.array_equal(s1.ss, s2.ss)

    def test_sentiment_sign_consistent_and_bounded(self):
        _, sig = generate_synthetic(SyntheticMarketSpec(n_stocks=3, n_days=200, seed=1))
        assert np.all(np.abs(sig.ss) <= 1)
        assert np.all(np.sign(sig.ss) == np.sign(sig.fr))

    @pytest.mark.parametrize(
        "kw",
        [{"n_stocks": 0}, {"n_days": 1}, {"volatility": 0.0}, {"signal_quality": 1.5}, {"drift": [0.1, 0.2]}],
    )
    def test_invalid_spec(self, kw):
        with pytest.raises(InvalidSpec):
            generate_synthetic(SyntheticMarketSpec(**{"n_stocks": 3, **kw}))


class TestBaselineSignals:
    def test_rising_prices_positive(self):
        f = _frame_from_opens([100 * 1.01 ** np.arange(30)])
        sig = baseline_signals(f, lookback=10)
        assert np.all(sig.fr[:, 10:] > 0)
        assert np.all(sig.fr[:, :10] == 0)

    def test_constant_prices_zero(self):
        sig = baseline_signals(_frame_from_opens(np.full((2, 25), 50.0)), lookback=5)
        assert np.all(sig.fr == 0) and np.all(sig.ss == 0)

    def test_rolling_mean_oracle(self):
        f = _random_frame(3, 40, 4)
        sig = baseline_signals(f, lookback=7)
        for i in range(3):
            for t in range(7, 40):
                rets = [f.open[i, k] / f.open[i, k - 1] - 1 for k in range(t - 6, t + 1)]
                assert sig.fr[i, t] == pytest.approx(sum(rets) / 7, rel=1e-12, abs=1e-15)

    @settings(max_examples=40, deadline=None)
    @given(
        st.integers(1, 4),
        st.integers(2, 30),
        st.integers(1, 12),
        st.floats(0.0, 2.0),
        st.integers(0, 2**31),
    )
    def test_fuzzed_panels_finite_and_bounded(self, n, T, lookback, noise, seed):
        f = _random_frame(n, T, seed)
        sig = baseline_signals(f, lookback=lookback, noise=noise, seed=seed)
        assert sig.shape == (n, T)
        assert np.all(np.isfinite(sig.fr)) and np.all(np.isfinite(sig.ss))
        assert np.all(np.abs(sig.ss) <= 1)
