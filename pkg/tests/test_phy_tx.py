import numpy as np
import pytest

from sidelinksim import coding, grid, phy_rx, phy_tx
from sidelinksim.grid import Allocation
from sidelinksim.phy_tx import OfdmConfig, Sci, SciFieldError


class TestSci:
    def test_bit_roundtrip(self):
        sci = Sci(mcs=17, n_subchannels=3, rri_code=4, priority=6)
        bits = sci.to_bits()
        assert bits.size == 32
        assert Sci.from_bits(bits) == sci

    def test_rri_mapping(self):
        assert Sci(mcs=0, n_subchannels=1, rri_code=0).rri_ms is None
        assert Sci(mcs=0, n_subchannels=1, rri_code=2).rri_ms == 10
        assert Sci(mcs=0, n_subchannels=1, rri_code=5).rri_ms == 100

    def test_field_validation(self):
        with pytest.raises(SciFieldError):
            Sci(mcs=29, n_subchannels=1)
        with pytest.raises(SciFieldError):
            Sci(mcs=0, n_subchannels=0)
        with pytest.raises(SciFieldError):
            Sci(mcs=0, n_subchannels=1, rri_code=6)

    def test_reserved_bits_must_be_zero(self):
        bits = Sci(mcs=1, n_subchannels=1).to_bits()
        bits[20] = 1
        with pytest.raises(SciFieldError):
            Sci.from_bits(bits)


class TestOfdmConfig:
    def test_defaults(self, ofdm):
        assert ofdm.sample_rate == pytest.approx(7.68e6)
        assert ofdm.symbol_samples == 576

    def test_cp_bound(self):
        with pytest.raises(ValueError):
            OfdmConfig(fft_size=128, cp_len=128)


class TestEncodePscch:
    def test_output_length(self, cfg6):
        sci = Sci(mcs=5, n_subchannels=2)
        syms = phy_tx.encode_pscch(sci, 1, 0, cfg6)
        assert syms.shape == (96,)

    def test_deterministic(self, cfg6):
        sci = Sci(mcs=5, n_subchannels=2)
        a = phy_tx.encode_pscch(sci, 3, 8, cfg6)
        b = phy_tx.encode_pscch(sci, 3, 8, cfg6)
        np.testing.assert_array_equal(a, b)

    def test_decode_roundtrip(self, cfg6):
        sci = Sci(mcs=11, n_subchannels=4, rri_code=2, priority=1)
        syms = phy_tx.encode_pscch(sci, 3, 8, cfg6)
        llr = coding.soft_demod(syms, coding.QPSK, 1e-4)
        seed = coding.derive_seed(3, 8, phy_tx.CONTROL_SEED_SALT)
        llr = coding.scramble_llrs(llr, seed)
        bits = coding.viterbi_decode(coding.rate_dematch(llr, 3 * 54))
        assert coding.crc_check(bits, "control16")
        assert Sci.from_bits(bits[:32]) == sci


class TestEncodePssch:
    def test_length_one_subchannel(self, cfg6, rng):
        alloc = Allocation(0, 1)
        for mcs_i in (0, 10, 28):
            tbs = coding.tbs_for(coding.mcs_lookup(mcs_i), 288)
            syms = phy_tx.encode_pssch(rng.integers(0, 2, tbs).astype(np.uint8),
                                       mcs_i, alloc, 1, 0, cfg6)
            assert syms.shape == (288,)

    def test_payload_length_checked(self, cfg6):
        with pytest.raises(ValueError):
            phy_tx.encode_pssch(np.zeros(10, np.uint8), 0, Allocation(0, 1),
                                1, 0, cfg6)

    def test_subframe_index_changes_scrambling(self, cfg6, rng):
        alloc = Allocation(0, 1)
        tbs = coding.tbs_for(coding.mcs_lookup(5), 288)
        payload = rng.integers(0, 2, tbs).astype(np.uint8)
        a = phy_tx.encode_pssch(payload, 5, alloc, 1, 0, cfg6)
        b = phy_tx.encode_pssch(payload, 5, alloc, 1, 1, cfg6)
        assert not np.array_equal(a, b)


class TestOfdmAndPower:
    def test_sample_count(self, cfg6, ofdm, rng):
        w = self._subframe(cfg6, ofdm, rng)
        assert w.shape == (14 * 576,)

    def test_tx_power_accuracy(self, cfg6, ofdm, rng):
        for p in (-20.0, -10.0, 0.0):
            w = self._subframe(cfg6, ofdm, rng, power=p)
            measured = 10 * np.log10(np.mean(np.abs(w) ** 2))
            assert measured == pytest.approx(p, abs=0.05)

    def test_parseval(self, cfg6, ofdm, rng):
        g = (rng.standard_normal((14, 288)) + 1j * rng.standard_normal((14, 288)))
        w = phy_tx.ofdm_modulate(g, ofdm)
        # strip CPs: per-symbol energy must equal the grid row energy
        blocks = w.reshape(14, 576)[:, 64:]
        e_time = np.sum(np.abs(blocks) ** 2, axis=1)
        e_grid = np.sum(np.abs(g) ** 2, axis=1)
        np.testing.assert_allclose(e_time, e_grid, rtol=1e-9)

    def test_ofdm_roundtrip(self, cfg6, ofdm, rng):
        g = (rng.standard_normal((14, 288)) + 1j * rng.standard_normal((14, 288)))
        back = phy_rx.ofdm_demodulate(phy_tx.ofdm_modulate(g, ofdm), cfg6, ofdm)
        np.testing.assert_allclose(back, g, rtol=1e-9, atol=1e-12)

    def test_zero_grid_zero_samples(self, cfg6, ofdm):
        w = phy_tx.ofdm_modulate(np.zeros((14, 288), complex), ofdm)
        assert not w.any()
        # power scaling must pass zero input through
        assert not phy_tx.scale_to_power(w, -10.0).any()

    def test_sci_width_consistency(self, cfg6, ofdm, rng):
        sci = Sci(mcs=5, n_subchannels=2)
        tbs = coding.tbs_for(coding.mcs_lookup(5), 288)
        with pytest.raises(ValueError):
            phy_tx.build_tx_subframe(rng.integers(0, 2, tbs).astype(np.uint8),
                                     sci, Allocation(0, 1), 1, 0, cfg6, ofdm)

    @staticmethod
    def _subframe(cfg, ofdm, rng, power=0.0):
        alloc = Allocation(0, 6)
        sci = Sci(mcs=5, n_subchannels=6)
        tbs = coding.tbs_for(coding.mcs_lookup(5),
                             grid.pssch_re_count(cfg, alloc))
        payload = rng.integers(0, 2, tbs).astype(np.uint8)
        return phy_tx.build_tx_subframe(payload, sci, alloc, 1, 0, cfg, ofdm,
                                        tx_power_dbm=power)
