import threading

import numpy as np
import pytest

from sidelinksim.evaluator import (BlerSample, CurveCrossingError,
                                   DecodeRecord, RecordCache, backoff_db,
                                   bler_stats, run_bler_sweep, throughput_bps)
from sidelinksim.grid import Allocation

from conftest import make_link


def _rec(trial, sf, crc=True, power=-10.0, mcs=5):
    return DecodeRecord(trial_idx=trial, subframe_idx=sf, tx_power_dbm=power,
                        mcs=mcs, crc_pass=crc, tb_bits=100)


class TestRecordCache:
    def test_appends_count(self):
        c = RecordCache()
        for i in range(10):
            c.record(_rec(0, i))
        assert len(c) == 10

    def test_duplicate_key_rejected(self):
        c = RecordCache()
        c.record(_rec(1, 5))
        with pytest.raises(ValueError):
            c.record(_rec(1, 5))

    def test_order_invariant_aggregation(self, rng):
        recs = [_rec(t, s, crc=bool(rng.integers(2)))
                for t in range(4) for s in range(50)]
        a, b = RecordCache(), RecordCache()
        for r in recs:
            a.record(r)
        for r in rng.permutation(np.arange(len(recs))):
            b.record(recs[int(r)])
        assert a.window_samples(10) == b.window_samples(10)

    def test_concurrent_appends(self):
        c = RecordCache()

        def work(t):
            for s in range(200):
                c.record(_rec(t, s))

        threads = [threading.Thread(target=work, args=(t,)) for t in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert len(c) == 1600
        samples = c.window_samples(100)
        assert len(samples) == 16


class TestBlerStats:
    def test_spec_example_99_zeros_one_one(self):
        st = bler_stats([0.0] * 99 + [1.0])
        assert st.mean == pytest.approx(0.01)
        assert st.std == pytest.approx(0.1)
        assert st.q99 == 0.0  # rank 99 of 100 ascending
        assert not st.low_confidence

    def test_constant_samples(self):
        st = bler_stats([0.37] * 150)
        assert (st.mean, st.std, st.q99) == (pytest.approx(0.37), 0.0,
                                             pytest.approx(0.37))

    def test_matches_brute_force_oracle(self, rng):
        for _ in range(20):
            n = int(rng.integers(1, 2000))
            vals = rng.random(n)
            st = bler_stats(vals)
            # independent re-sort oracle
            srt = sorted(float(v) for v in vals)
            rank = int(np.ceil(0.99 * n))
            assert st.q99 == srt[rank - 1]
            assert st.mean == pytest.approx(sum(srt) / n)
            if n > 1:
                m = sum(srt) / n
                var = sum((v - m) ** 2 for v in srt) / (n - 1)
                assert st.std == pytest.approx(np.sqrt(var))

    def test_q99_at_least_median(self, rng):
        for _ in range(50):
            vals = rng.random(int(rng.integers(2, 500)))
            st = bler_stats(vals)
            assert st.q99 >= np.median(vals) - 1e-12

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            bler_stats([])

    def test_low_confidence_flag(self):
        assert bler_stats([0.1] * 99).low_confidence
        assert not bler_stats([0.1] * 100).low_confidence

    def test_accepts_sample_objects(self):
        st = bler_stats([BlerSample(100, 10), BlerSample(100, 30)])
        assert st.mean == pytest.approx(0.2)

    def test_bler_sample_validation(self):
        with pytest.raises(ValueError):
            BlerSample(0, 0)
        with pytest.raises(ValueError):
            BlerSample(10, 11)


class TestBackoff:
    def test_constructed_three_db(self):
        # straight lines in log-BLER: mean crosses 1e-2 at -12, q99 at -9
        powers = np.arange(-20.0, -2.0, 1.0)
        mean = [(p, 10 ** ((-12 - p) / 4 - 2)) for p in powers]
        q99 = [(p, 10 ** ((-9 - p) / 4 - 2)) for p in powers]
        assert backoff_db(mean, q99, 1e-2) == pytest.approx(3.0, abs=1e-9)

    def test_identical_curves_zero(self):
        c = [(-16.0, 0.5), (-12.0, 0.05), (-8.0, 0.002)]
        assert backoff_db(c, c, 1e-2) == pytest.approx(0.0, abs=1e-12)

    def test_hand_interpolated_crossing(self):
        # crossing between grid points, worked by hand in log10 space:
        # mean: -14 -> 3e-2, -12 -> 4e-3; log10: -1.5229, -2.3979
        # target -2: frac = (  -1.5229 + 2) / (-1.5229 + 2.3979) = 0.54537
        mean = [(-14.0, 3e-2), (-12.0, 4e-3)]
        q99 = [(-14.0, 9e-2), (-12.0, 2e-2), (-10.0, 3e-3)]
        p_mean = -14 + 2 * (np.log10(3e-2) + 2) / (np.log10(3e-2) - np.log10(4e-3))
        p_q99 = -12 + 2 * (np.log10(2e-2) + 2) / (np.log10(2e-2) - np.log10(3e-3))
        expected = p_q99 - p_mean
        assert backoff_db(mean, q99, 1e-2) == pytest.approx(expected, abs=1e-9)

    def test_zero_bler_clamped_to_floor(self):
        mean = [(-14.0, 0.5), (-12.0, 0.0)]
        q99 = [(-14.0, 0.5), (-12.0, 0.2), (-10.0, 0.0)]
        b = backoff_db(mean, q99, 1e-2)
        assert b > 0

    def test_not_crossed_identifies_curve(self):
        flat_high = [(-14.0, 0.9), (-12.0, 0.8)]
        crossing = [(-14.0, 0.9), (-12.0, 1e-3)]
        with pytest.raises(CurveCrossingError) as exc:
            backoff_db(flat_high, crossing, 1e-2)
        assert exc.value.curve_name == "mean"
        with pytest.raises(CurveCrossingError) as exc:
            backoff_db(crossing, flat_high, 1e-2)
        assert exc.value.curve_name == "q99"

    def test_below_target_at_lowest_power_rejected(self):
        below = [(-14.0, 1e-3), (-12.0, 1e-4)]
        good = [(-14.0, 0.9), (-12.0, 1e-3)]
        with pytest.raises(CurveCrossingError):
            backoff_db(below, good, 1e-2)


class TestThroughput:
    def test_zero_bler_full_rate(self):
        # MCS 0 at 2208 REs carries 416 bits/block
        assert throughput_bps(0.0, 0, 2208, 1000.0) == pytest.approx(416_000.0)

    def test_full_bler_zero(self):
        assert throughput_bps(1.0, 0, 2208) == 0.0

    def test_linear_in_bler(self):
        full = throughput_bps(0.0, 7, 2208)
        assert throughput_bps(0.5, 7, 2208) == pytest.approx(full / 2)


class TestSweep:
    def test_shape_and_determinism(self, cfg1):
        lk = make_link(cfg1, Allocation(0, 1))
        kw = dict(powers=(-16.0, -12.0), mcs_list=(0, 5), trials=3,
                  window_blocks=10, master_seed=7)
        a = run_bler_sweep(lk, **kw)
        b = run_bler_sweep(lk, **kw)
        assert len(a.stats_rows) == 4
        assert len(a.raw_rows) == 12
        assert a.stats_rows == b.stats_rows
        assert a.raw_rows == b.raw_rows

    def test_ideal_channel_all_zero(self, cfg1):
        lk = make_link(cfg1, Allocation(0, 1), model="ideal")
        res = run_bler_sweep(lk, powers=(-10.0,), mcs_list=(0, 15), trials=2,
                             window_blocks=5, master_seed=1)
        assert all(r.bler_mean == 0.0 for r in res.stats_rows)

    def test_record_cache_attached(self, cfg1):
        lk = make_link(cfg1, Allocation(0, 1), model="ideal")
        cache = RecordCache()
        run_bler_sweep(lk, powers=(-10.0,), mcs_list=(3,), trials=2,
                       window_blocks=4, master_seed=1, record_cache=cache)
        assert len(cache) == 8
        samples = cache.window_samples(4)
        assert all(s.n_errors == 0 for s in samples.values())

    def test_curve_extraction(self, cfg1):
        lk = make_link(cfg1, Allocation(0, 1), model="ideal")
        res = run_bler_sweep(lk, powers=(-12.0, -10.0), mcs_list=(0,),
                             trials=1, window_blocks=3, master_seed=2)
        curve = res.curve(0, "mean")
        assert [p for p, _ in curve] == [-12.0, -10.0]
