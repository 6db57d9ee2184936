"""Buffered whole-subframe receiver.

The full subframe is demodulated before anything is decoded: OFDM FFT,
DMRS-based CFO estimation and per-symbol de-rotation, least-squares channel
estimation with linear time interpolation, MMSE equalization, then a blind
PSCCH search over every sub-channel followed by PSSCH decoding for each
accepted control decode.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import coding, grid as grid_mod
from .grid import Allocation, GridConfig
from .phy_tx import (CONTROL_SEED_SALT, DATA_SEED_SALT, OfdmConfig, Sci,
                     SciFieldError, SCI_BITS)

_NOISE_FLOOR = 1e-12
_GAIN_FLOOR = 1e-12


@dataclass
class RxBlock:
    start_subchannel: int
    payload: np.ndarray
    crc_pass: bool
    mcs: int
    n_re: int


@dataclass
class RxResult:
    detected_scis: list = field(default_factory=list)   # (start_subchannel, Sci)
    blocks: list = field(default_factory=list)          # RxBlock
    channel_estimate: np.ndarray | None = None
    noise_var_estimate: float = 0.0
    cfo_estimate_hz: float = 0.0


def ofdm_demodulate(samples, cfg: GridConfig, ofdm: OfdmConfig) -> np.ndarray:
    """Per-symbol CP strip + unitary FFT; inverse of ofdm_modulate."""
    x = np.asarray(samples, dtype=np.complex128)
    was_1d = x.ndim == 1
    if was_1d:
        x = x[None, :]
    expected = cfg.n_symbols * ofdm.symbol_samples
    if x.shape[1] != expected:
        raise ValueError(f"expected {expected} samples, got {x.shape[1]}")
    blocks = x.reshape(x.shape[0], cfg.n_symbols, ofdm.symbol_samples)
    no_cp = blocks[:, :, ofdm.cp_len:]
    spec = np.fft.fft(no_cp, axis=2) / np.sqrt(ofdm.fft_size)
    out = spec[:, :, :cfg.n_subcarriers]
    return out[0] if was_1d else out


def _dmrs_cells(cfg: GridConfig, dmrs_expected) -> np.ndarray:
    """Expected DMRS cells as (n_dmrs, w) or batched (B, n_dmrs, w)."""
    exp = np.asarray(dmrs_expected, dtype=np.complex128)
    n_dmrs = len(cfg.dmrs_symbols)
    if exp.ndim == 1:
        exp = exp.reshape(n_dmrs, -1)
    if exp.shape[-2] != n_dmrs:
        raise ValueError("expected one DMRS row per DMRS symbol")
    return exp


def estimate_cfo(grid, cfg: GridConfig, ofdm: OfdmConfig, dmrs_expected) -> float:
    """CFO from the average phase rotation between successive DMRS columns.

    Unambiguous for |cfo| < 1/(2 * dmrs column spacing), about 2.2 kHz for
    the default geometry.  Pair correlations are weighted by magnitude, so
    unoccupied sub-channels contribute nearly nothing.
    """
    arr = np.asarray(grid, dtype=np.complex128)
    exp = _dmrs_cells(cfg, dmrs_expected)
    cols = list(cfg.dmrs_symbols)
    if len(cols) < 2:
        raise ValueError("need at least 2 DMRS symbols to estimate CFO")
    if exp.shape[1] != arr.shape[1]:
        raise ValueError("DMRS width disagrees with grid width")
    # LS gain at each DMRS cell (|p|=1 so conj-multiply is the LS divide)
    z = arr[cols, :] * np.conj(exp)
    sym_dur = ofdm.symbol_duration()
    num = 0.0
    den = 0.0
    for j in range(len(cols) - 1):
        corr = np.sum(z[j + 1] * np.conj(z[j]))
        dt = (cols[j + 1] - cols[j]) * sym_dur
        w = np.abs(corr)
        if w > 0:
            num += w * (np.angle(corr) / (2.0 * np.pi * dt))
            den += w
    return float(num / den) if den > 0 else 0.0


def derotate_cfo(grid, cfg: GridConfig, ofdm: OfdmConfig, cfo_hz: float):
    """Remove a CFO-induced common phase ramp, symbol by symbol.

    Frequency-domain de-rotation at the FFT-window midpoints; adequate for
    offsets well below the subcarrier spacing.
    """
    arr = np.asarray(grid, dtype=np.complex128)
    if cfo_hz == 0.0:
        return arr.copy()
    l = np.arange(cfg.n_symbols)
    tau = (l * ofdm.symbol_samples + ofdm.cp_len + ofdm.fft_size / 2.0)
    tau = tau / ofdm.sample_rate
    rot = np.exp(-2j * np.pi * cfo_hz * tau)
    return arr * rot[..., :, None]


@lru_cache(maxsize=None)
def _time_interp_weights(cfg: GridConfig) -> np.ndarray:
    """(n_symbols, n_dmrs) weights: linear in time between DMRS columns,
    nearest value outside them."""
    cols = np.asarray(cfg.dmrs_symbols, dtype=np.float64)
    w = np.zeros((cfg.n_symbols, cols.size))
    for s in range(cfg.n_symbols):
        if s <= cols[0]:
            w[s, 0] = 1.0
        elif s >= cols[-1]:
            w[s, -1] = 1.0
        else:
            j = np.searchsorted(cols, s) - 1
            lam = (s - cols[j]) / (cols[j + 1] - cols[j])
            w[s, j] = 1.0 - lam
            w[s, j + 1] = lam
    return w


def estimate_channel(grid, cfg: GridConfig, alloc: Allocation, dmrs_expected):
    """LS estimate at DMRS cells, linearly interpolated across time.

    Returns (gains over the allocated band for every symbol, noise power).
    The noise power comes from the residual of each DMRS column against a
    3-tap frequency smoothing of itself (the interpolation passes through
    the DMRS cells, so its own residual there is zero by construction); the
    residual carries 2/3 of the noise variance, hence the 1.5 factor.
    """
    arr = np.asarray(grid, dtype=np.complex128)
    was_2d = arr.ndim == 2
    if was_2d:
        arr = arr[None, :, :]
    alloc.validate(cfg)
    band = np.asarray(alloc.subcarriers(cfg), dtype=np.int64)
    exp = _dmrs_cells(cfg, dmrs_expected)
    if exp.shape[-1] != band.size:
        raise ValueError("DMRS width disagrees with the allocation")
    if exp.ndim == 2:
        exp = exp[None, :, :]
    cols = list(cfg.dmrs_symbols)
    raw = arr[:, cols, :][:, :, band] * np.conj(exp)

    w = _time_interp_weights(cfg)
    gains = np.einsum("sd,bdk->bsk", w, raw)

    if band.size >= 3:
        smooth = (raw[:, :, :-2] + raw[:, :, 1:-1] + raw[:, :, 2:]) / 3.0
        resid = raw[:, :, 1:-1] - smooth
        # |resid|^2 is exponential with mean (2/3)*sigma^2 under white noise;
        # the median (= ln2 * mean) shrugs off the handful of outlier cells
        # at the edges of a partially occupied band
        med = np.median(np.abs(resid) ** 2, axis=(1, 2))
        nv = med * (3.0 / (2.0 * np.log(2.0)))
    else:
        nv = np.zeros(arr.shape[0])
    nv = np.maximum(nv, _NOISE_FLOOR)
    if was_2d:
        return gains[0], float(nv[0])
    return gains, nv


def equalize(cells, gains, noise_var):
    """Per-cell MMSE: s_hat = conj(h) y / (|h|^2 + noise_var).

    Returns (s_hat, post_noise_var, bias).  ``bias`` is the MMSE shrinkage
    |h|^2/(|h|^2 + nv); s_hat/bias is the unbiased symbol estimate whose
    noise variance is post_noise_var = noise_var/|h|^2, which is what the
    soft demapper should be fed.
    """
    y = np.asarray(cells, dtype=np.complex128)
    h = np.asarray(gains, dtype=np.complex128)
    h2 = np.maximum(np.abs(h) ** 2, _GAIN_FLOOR)
    nv = np.asarray(noise_var, dtype=np.float64)
    s_hat = np.conj(h) * y / (h2 + nv)
    post_nv = nv / h2
    bias = h2 / (h2 + nv)
    return s_hat, post_nv, bias


def _decode_control_bits(llrs):
    """192 control LLRs -> (sci bit block incl CRC, crc ok)."""
    dematched = coding.rate_dematch(llrs, 3 * (SCI_BITS + 16 + 6))
    bits = coding.viterbi_decode(dematched)
    ok = coding.crc_check(bits, "control16")
    return bits, ok


def blind_decode_pscch(grid, cfg: GridConfig, vehicle_id: int,
                       subframe_idx: int, gains=None, noise_var=None):
    """Try every sub-channel's PSCCH region; keep CRC-passing SCIs.

    Overlapping claims are resolved lowest start first.  Returns a list of
    (start_subchannel, Sci); empty when nothing decodes.
    """
    arr = np.asarray(grid, dtype=np.complex128)
    if gains is None or noise_var is None:
        full = Allocation(0, cfg.n_subchannels)
        dmrs = grid_mod.dmrs_for_allocation(cfg, full, vehicle_id, subframe_idx)
        gains, noise_var = estimate_channel(arr, cfg, full,
                                            dmrs.reshape(len(cfg.dmrs_symbols), -1))
    flat = arr.reshape(-1)
    gflat = np.asarray(gains).reshape(-1)
    seed = coding.derive_seed(vehicle_id, subframe_idx, CONTROL_SEED_SALT)

    hits = []
    for s in range(cfg.n_subchannels):
        idx = grid_mod.region_indices(cfg, Allocation(s, 1))[0]
        y = flat[idx]
        h = gflat[idx]
        s_hat, post_nv, bias = equalize(y, h, noise_var)
        llr = coding.soft_demod(s_hat / bias, coding.QPSK, post_nv)
        llr = coding.scramble_llrs(llr, seed)
        bits, ok = _decode_control_bits(llr)
        if not ok:
            continue
        try:
            sci = Sci.from_bits(bits[:SCI_BITS])
        except SciFieldError:
            continue
        if s + sci.n_subchannels > cfg.n_subchannels:
            continue
        hits.append((s, sci))

    accepted = []
    claimed_until = 0
    for s, sci in hits:  # hits are in ascending s already
        if s < claimed_until:
            continue
        accepted.append((s, sci))
        claimed_until = s + sci.n_subchannels
    return accepted


def decode_pssch(grid, cfg: GridConfig, sci: Sci, start_subchannel: int,
                 vehicle_id: int, subframe_idx: int,
                 gains=None, noise_var=None):
    """Inverse data chain over the allocation claimed by a detected SCI.

    Returns (payload bits, crc_pass); CRC failure is the block-error event.
    """
    arr = np.asarray(grid, dtype=np.complex128)
    alloc = Allocation(start_subchannel, sci.n_subchannels)
    mcs = coding.mcs_lookup(sci.mcs)
    n_re = grid_mod.pssch_re_count(cfg, alloc)
    tbs = coding.tbs_for(mcs, n_re)
    if gains is None or noise_var is None:
        full = Allocation(0, cfg.n_subchannels)
        dmrs = grid_mod.dmrs_for_allocation(cfg, full, vehicle_id, subframe_idx)
        gains, noise_var = estimate_channel(arr, cfg, full,
                                            dmrs.reshape(len(cfg.dmrs_symbols), -1))
    flat = arr.reshape(-1)
    gflat = np.asarray(gains).reshape(-1)
    idx = grid_mod.region_indices(cfg, alloc)[1]
    s_hat, post_nv, bias = equalize(flat[idx], gflat[idx], noise_var)
    llr = coding.soft_demod(s_hat / bias, mcs.modulation, post_nv)
    seed = coding.derive_seed(vehicle_id, subframe_idx, DATA_SEED_SALT)
    llr = coding.scramble_llrs(llr, seed)
    dematched = coding.rate_dematch(llr, 3 * (tbs + 24 + 6))
    bits = coding.viterbi_decode(dematched)
    ok = bool(coding.crc_check(bits, "data24"))
    return bits[:tbs], ok


def receive_subframe(samples, cfg: GridConfig, ofdm: OfdmConfig, ids,
                     correct_cfo: bool = True) -> RxResult:
    """Full buffered-subframe receive: demodulate, fix CFO, estimate the
    channel, blind-search PSCCH, decode every claimed PSSCH.

    ``ids`` is the (vehicle_id, subframe_idx) pair that seeds the DMRS and
    scrambling streams.  Deterministic given identical inputs.
    """
    vehicle_id, subframe_idx = ids
    g = ofdm_demodulate(samples, cfg, ofdm)
    full = Allocation(0, cfg.n_subchannels)
    dmrs = grid_mod.dmrs_for_allocation(cfg, full, vehicle_id, subframe_idx)
    dmrs = dmrs.reshape(len(cfg.dmrs_symbols), -1)

    cfo_hz = 0.0
    if correct_cfo and len(cfg.dmrs_symbols) >= 2:
        cfo_hz = estimate_cfo(g, cfg, ofdm, dmrs)
        g = derotate_cfo(g, cfg, ofdm, cfo_hz)

    gains, noise_var = estimate_channel(g, cfg, full, dmrs)
    result = RxResult(channel_estimate=gains, noise_var_estimate=noise_var,
                      cfo_estimate_hz=cfo_hz)
    result.detected_scis = blind_decode_pscch(
        g, cfg, vehicle_id, subframe_idx, gains=gains, noise_var=noise_var)
    for start, sci in result.detected_scis:
        try:
            payload, ok = decode_pssch(g, cfg, sci, start, vehicle_id,
                                       subframe_idx, gains=gains,
                                       noise_var=noise_var)
        except coding.AllocationTooSmallError:
            payload, ok = np.zeros(0, dtype=np.uint8), False
        n_re = grid_mod.pssch_re_count(cfg, Allocation(start, sci.n_subchannels))
        result.blocks.append(RxBlock(start, payload, ok, sci.mcs, n_re))
    return result
