"""Transmit chain: SCI construction, PSCCH/PSSCH encoding, OFDM modulation.

Both channels share the same bit pipeline: CRC -> rate-1/3 convolutional
code -> rate matching to the resource-element budget -> scrambling ->
constellation mapping.  The control channel is always QPSK with a 16-bit
CRC; the data channel follows the MCS table with a 24-bit CRC.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import coding, grid as grid_mod
from .grid import Allocation, GridConfig

CONTROL_SEED_SALT = 0x0C
DATA_SEED_SALT = 0x0A

SCI_BITS = 32
RRI_TABLE_MS = {0: None, 1: 1, 2: 10, 3: 20, 4: 50, 5: 100}


class SciFieldError(ValueError):
    """SCI bit pattern decodes to out-of-range fields."""


@dataclass(frozen=True)
class Sci:
    """Sidelink control information: 32 bits on the wire.

    mcs (5 bits) | n_subchannels (4) | rri_code (4) | priority (3) |
    reserved (16, zero).
    """
    mcs: int
    n_subchannels: int
    rri_code: int = 0
    priority: int = 0

    def __post_init__(self):
        if not 0 <= self.mcs <= coding.MAX_MCS:
            raise SciFieldError(f"mcs {self.mcs} out of range")
        if not 1 <= self.n_subchannels <= 15:
            raise SciFieldError(f"n_subchannels {self.n_subchannels} out of range")
        if self.rri_code not in RRI_TABLE_MS:
            raise SciFieldError(f"rri_code {self.rri_code} out of range")
        if not 0 <= self.priority <= 7:
            raise SciFieldError(f"priority {self.priority} out of range")

    @property
    def rri_ms(self):
        return RRI_TABLE_MS[self.rri_code]

    def to_bits(self) -> np.ndarray:
        return np.concatenate([
            coding.bits_from_int(self.mcs, 5),
            coding.bits_from_int(self.n_subchannels, 4),
            coding.bits_from_int(self.rri_code, 4),
            coding.bits_from_int(self.priority, 3),
            np.zeros(16, dtype=np.uint8),
        ])

    @classmethod
    def from_bits(cls, bits) -> "Sci":
        arr = np.asarray(bits, dtype=np.uint8)
        if arr.size != SCI_BITS:
            raise SciFieldError(f"SCI must be {SCI_BITS} bits, got {arr.size}")
        if arr[16:].any():
            raise SciFieldError("reserved SCI bits not zero")
        return cls(
            mcs=coding.int_from_bits(arr[0:5]),
            n_subchannels=coding.int_from_bits(arr[5:9]),
            rri_code=coding.int_from_bits(arr[9:13]),
            priority=coding.int_from_bits(arr[13:16]),
        )


@dataclass(frozen=True)
class OfdmConfig:
    fft_size: int = 512
    cp_len: int = 64
    subcarrier_spacing_hz: float = 15e3

    def __post_init__(self):
        if self.cp_len >= self.fft_size or self.cp_len < 0:
            raise ValueError("cp_len must be in [0, fft_size)")

    @property
    def sample_rate(self) -> float:
        return self.fft_size * self.subcarrier_spacing_hz

    @property
    def symbol_samples(self) -> int:
        return self.fft_size + self.cp_len

    def subframe_samples(self, cfg: GridConfig) -> int:
        return cfg.n_symbols * self.symbol_samples

    def symbol_duration(self) -> float:
        return self.symbol_samples / self.sample_rate


def encode_pscch(sci: Sci, vehicle_id: int, subframe_idx: int,
                 cfg: GridConfig) -> np.ndarray:
    """SCI bits -> QPSK symbols filling the PSCCH region (96 for defaults)."""
    n_re = grid_mod.pscch_re_count(cfg)
    bits = coding.crc_attach(sci.to_bits(), "control16")
    coded = coding.conv_encode(bits)
    matched = coding.rate_match(coded, 2 * n_re)
    seed = coding.derive_seed(vehicle_id, subframe_idx, CONTROL_SEED_SALT)
    scrambled = coding.scramble(matched, seed)
    return coding.modulate(scrambled, coding.QPSK)


def encode_pssch(payload, mcs_index: int, alloc: Allocation, vehicle_id: int,
                 subframe_idx: int, cfg: GridConfig) -> np.ndarray:
    """Transport block bits -> modulated symbols filling the PSSCH region."""
    mcs = coding.mcs_lookup(mcs_index)
    n_re = grid_mod.pssch_re_count(cfg, alloc)
    tbs = coding.tbs_for(mcs, n_re)
    payload = np.asarray(payload, dtype=np.uint8)
    if payload.size != tbs:
        raise ValueError(f"payload must be {tbs} bits for MCS {mcs_index}, "
                         f"got {payload.size}")
    bits = coding.crc_attach(payload, "data24")
    coded = coding.conv_encode(bits)
    matched = coding.rate_match(coded, n_re * mcs.bits_per_symbol)
    seed = coding.derive_seed(vehicle_id, subframe_idx, DATA_SEED_SALT)
    scrambled = coding.scramble(matched, seed)
    return coding.modulate(scrambled, mcs.modulation)


def ofdm_modulate(grid, ofdm: OfdmConfig) -> np.ndarray:
    """Per-symbol unitary IFFT plus cyclic prefix, concatenated.

    Subcarrier k occupies FFT bin k.  Unitary scaling keeps time-domain
    energy equal to grid energy per symbol (before the CP copy).
    """
    arr = np.asarray(grid, dtype=np.complex128)
    was_2d = arr.ndim == 2
    if was_2d:
        arr = arr[None, :, :]
    B, n_sym, n_sc = arr.shape
    if n_sc > ofdm.fft_size:
        raise ValueError(f"{n_sc} subcarriers exceed FFT size {ofdm.fft_size}")
    spec = np.zeros((B, n_sym, ofdm.fft_size), dtype=np.complex128)
    spec[:, :, :n_sc] = arr
    t = np.fft.ifft(spec, axis=2) * np.sqrt(ofdm.fft_size)
    with_cp = np.concatenate([t[:, :, ofdm.fft_size - ofdm.cp_len:], t], axis=2)
    out = with_cp.reshape(B, n_sym * ofdm.symbol_samples)
    return out[0] if was_2d else out


def scale_to_power(samples, tx_power_dbm: float):
    """Scale so mean |sample|^2 over the subframe equals the target power
    (dBm mapped to linear units of mW).  All-zero input passes through."""
    arr = np.asarray(samples, dtype=np.complex128)
    was_1d = arr.ndim == 1
    if was_1d:
        arr = arr[None, :]
    target = 10.0 ** (tx_power_dbm / 10.0)
    mean_pow = np.mean(np.abs(arr) ** 2, axis=1)
    scale = np.ones_like(mean_pow)
    nz = mean_pow > 0
    scale[nz] = np.sqrt(target / mean_pow[nz])
    out = arr * scale[:, None]
    return out[0] if was_1d else out


def build_tx_subframe(payload, sci: Sci, alloc: Allocation, vehicle_id: int,
                      subframe_idx: int, cfg: GridConfig, ofdm: OfdmConfig,
                      tx_power_dbm: float = 0.0) -> np.ndarray:
    """Complete transmit subframe as time-domain samples.

    Output length is n_symbols * (fft_size + cp_len); mean sample power is
    scaled to tx_power_dbm.
    """
    if sci.n_subchannels != alloc.n_subchannels:
        raise ValueError("SCI width disagrees with the allocation")
    pscch = encode_pscch(sci, vehicle_id, subframe_idx, cfg)
    pssch = encode_pssch(payload, sci.mcs, alloc, vehicle_id, subframe_idx, cfg)
    dmrs = grid_mod.dmrs_for_allocation(cfg, alloc, vehicle_id, subframe_idx)
    g = grid_mod.map_subframe(cfg, alloc, pscch, pssch, dmrs)
    samples = ofdm_modulate(g, ofdm)
    return scale_to_power(samples, tx_power_dbm)
