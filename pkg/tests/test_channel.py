import numpy as np
import pytest
from scipy import special, stats

from sidelinksim import channel as chan
from sidelinksim.channel import (Channel, ChannelConfig, ImpairmentConfig,
                                 PowerCalibration, add_awgn, apply_cfo,
                                 apply_timing_offset)

FS = 7.68e6


class TestConfigValidation:
    def test_tap_powers_must_sum_to_one(self):
        with pytest.raises(ValueError):
            ChannelConfig(model="rayleigh_tdl", taps=((0, 0.5), (3, 0.4)))

    def test_unknown_model(self):
        with pytest.raises(ValueError):
            ChannelConfig(model="rice")

    def test_calibration_mapping(self):
        cal = PowerCalibration(gain_offset_db=30.0)
        assert cal.snr_db(-20.0) == pytest.approx(10.0)


class TestIdealAndEnergy:
    def test_ideal_is_identity(self, rng):
        x = rng.standard_normal(1000) + 1j * rng.standard_normal(1000)
        ch = Channel(ChannelConfig(model="ideal"), FS)
        y, _ = ch.apply(x)
        np.testing.assert_array_equal(y, x)

    def test_flat_zero_doppler_constant_gain(self):
        cfg = ChannelConfig(model="rayleigh_flat", doppler_hz=0.0, seed=3)
        ch = Channel(cfg, FS)
        g = ch.tap_gains(np.linspace(0, 1e-2, 50))
        assert np.allclose(g, g[:, :1])

    def test_mean_tap_power_unity(self):
        # Monte Carlo over seeds; 2% tolerance
        vals = []
        for seed in range(10000):
            cfg = ChannelConfig(model="rayleigh_flat", doppler_hz=0.0, seed=seed)
            vals.append(np.abs(Channel(cfg, FS).tap_gains([0.0])[0, 0]) ** 2)
        assert np.mean(vals) == pytest.approx(1.0, abs=0.02)

    def test_tdl_preserves_mean_energy(self, rng):
        cfg_taps = ((0, 0.7), (4, 0.2), (9, 0.1))
        x = np.exp(2j * np.pi * rng.random(4096))
        ratios = []
        for seed in range(300):
            ch = Channel(ChannelConfig(model="rayleigh_tdl", doppler_hz=0.0,
                                       taps=cfg_taps, seed=seed), FS)
            y, _ = ch.apply(x)
            ratios.append(np.mean(np.abs(y) ** 2) / np.mean(np.abs(x) ** 2))
        assert np.mean(ratios) == pytest.approx(1.0, abs=0.05)

    def test_seed_determinism(self, rng):
        x = rng.standard_normal(512) + 1j * rng.standard_normal(512)
        cfg = ChannelConfig(model="rayleigh_tdl", doppler_hz=60.0,
                            taps=((0, 0.7), (4, 0.2), (9, 0.1)), seed=11)
        y1, t1 = Channel(cfg, FS).apply(x, time_origin=0.25)
        y2, t2 = Channel(cfg, FS).apply(x, time_origin=0.25)
        np.testing.assert_array_equal(y1, y2)
        np.testing.assert_array_equal(t1, t2)


class TestFadingStatistics:
    def test_rayleigh_ks(self):
        """Tap magnitudes across independent realizations pass a KS test
        against Rayleigh at alpha=0.01 with n=1e5."""
        rng = np.random.default_rng(2024)
        n = 100_000
        n_sin = chan.DEFAULT_N_SINUSOIDS
        phases = rng.uniform(0, 2 * np.pi, size=(n, n_sin))
        g = np.exp(1j * phases).sum(axis=1) / np.sqrt(n_sin)
        d, p = stats.kstest(np.abs(g), "rayleigh", args=(0, 1 / np.sqrt(2)))
        assert p > 0.01, f"KS D={d}, p={p}"

    def test_instance_magnitude_matches_model(self):
        # the Channel draws match the same construction used above
        mags = []
        for seed in range(2000):
            cfg = ChannelConfig(model="rayleigh_flat", seed=seed)
            mags.append(np.abs(Channel(cfg, FS).tap_gains([0.0])[0, 0]))
        d, p = stats.kstest(np.array(mags), "rayleigh", args=(0, 1 / np.sqrt(2)))
        assert p > 0.01

    def test_doppler_autocorrelation_bessel(self):
        """Ensemble autocorrelation tracks J0(2 pi fd tau) within 0.05 up to
        the first zero, for fd = 655 Hz (120 km/h at 5.9 GHz)."""
        fd = 655.0
        lags = np.linspace(0.0, 0.65e-3, 14)  # first J0 zero near 0.585 ms
        acc = np.zeros(lags.size, dtype=np.complex128)
        n_real = 4000
        for seed in range(n_real):
            cfg = ChannelConfig(model="rayleigh_flat", doppler_hz=fd, seed=seed)
            g = Channel(cfg, FS).tap_gains(lags)[0]
            acc += g * np.conj(g[0])
        measured = (acc / n_real).real
        expected = special.j0(2 * np.pi * fd * lags)
        assert np.max(np.abs(measured - expected)) < 0.05


class TestAwgn:
    def test_infinite_snr_identity(self, rng):
        x = rng.standard_normal(100) + 0j
        np.testing.assert_array_equal(add_awgn(x, np.inf, 1.0, rng), x)

    def test_measured_snr(self, rng):
        n = 10 ** 6
        x = np.exp(2j * np.pi * rng.random(n))  # unit power
        y = add_awgn(x, 10.0, 1.0, rng)
        noise = y - x
        snr = 10 * np.log10(1.0 / np.mean(np.abs(noise) ** 2))
        assert snr == pytest.approx(10.0, abs=0.1)

    def test_component_moments(self, rng):
        x = np.zeros(200_000, dtype=complex)
        y = add_awgn(x, 0.0, 1.0, rng)  # variance 1 total, 0.5 per part
        for part in (y.real, y.imag):
            assert np.mean(part) == pytest.approx(0.0, abs=0.01)
            assert np.var(part) == pytest.approx(0.5, abs=0.01)
            assert stats.kurtosis(part) == pytest.approx(0.0, abs=0.05)


class TestImpairments:
    def test_zero_cfo_identity(self, rng):
        x = rng.standard_normal(64) + 0j
        np.testing.assert_array_equal(apply_cfo(x, 0.0, FS), x)

    def test_cfo_full_rotation(self):
        n = 512
        x = np.ones(n, dtype=complex)
        y = apply_cfo(x, FS / n, FS)
        # phase advances linearly through exactly 2*pi across the block
        phases = np.unwrap(np.angle(y))
        assert phases[-1] == pytest.approx(2 * np.pi * (n - 1) / n, abs=1e-9)

    def test_timing_offset_is_circular_shift(self, rng):
        x = rng.standard_normal(100) + 0j
        y = apply_timing_offset(x, 3)
        np.testing.assert_array_equal(y[3:], x[:-3])
        np.testing.assert_array_equal(y[:3], x[-3:])

    def test_late_offset_within_cp_is_decodable(self, rng):
        from sidelinksim import coding, grid, phy_rx, phy_tx
        cfg = grid.GridConfig(n_subchannels=1)
        ofdm = phy_tx.OfdmConfig()
        alloc = grid.Allocation(0, 1)
        sci = phy_tx.Sci(mcs=5, n_subchannels=1)
        tbs = coding.tbs_for(coding.mcs_lookup(5), 288)
        for offset in (1, 16, 63):
            payload = rng.integers(0, 2, tbs).astype(np.uint8)
            w = phy_tx.build_tx_subframe(payload, sci, alloc, 1, 0, cfg, ofdm)
            res = phy_rx.receive_subframe(apply_timing_offset(w, offset),
                                          cfg, ofdm, (1, 0))
            assert res.blocks and res.blocks[0].crc_pass
            np.testing.assert_array_equal(res.blocks[0].payload, payload)

    def test_impairment_enable_flags(self):
        imp = ImpairmentConfig(cfo_hz=300.0, timing_offset_samples=5,
                               cfo_enabled=False, timing_enabled=False)
        assert imp.effective_cfo_hz == 0.0
        assert imp.effective_timing_offset == 0

    def test_tap_delay_must_fit_cp(self):
        cfg = ChannelConfig(model="rayleigh_tdl",
                            taps=((0, 0.5), (70, 0.5)))
        with pytest.raises(ValueError):
            chan.check_taps_fit_cp(cfg, 64)
