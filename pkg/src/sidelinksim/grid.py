"""Sidelink subframe geometry and resource-element mapping.

A subframe is a 14-symbol x N-subcarrier complex grid.  Symbol 0 is burned
for receiver AGC settling, symbol 13 is the guard period, four symbols carry
DMRS across the whole allocated band, and the rest carry PSCCH (the lowest
12 subcarriers of the first allocated sub-channel) and PSSCH data.
Frequency is grouped into 48-subcarrier sub-channels; an allocation is a run
of consecutive sub-channels.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import coding

DMRS_SEED_SALT = 0x0D


@dataclass(frozen=True)
class GridConfig:
    n_symbols: int = 14
    sc_per_subchannel: int = 48
    n_subchannels: int = 1
    dmrs_symbols: tuple = (2, 5, 8, 11)
    agc_symbol: int = 0
    guard_symbol: int = 13
    pscch_width_sc: int = 12

    def __post_init__(self):
        special = set(self.dmrs_symbols) | {self.agc_symbol, self.guard_symbol}
        if len(special) != len(self.dmrs_symbols) + 2:
            raise ValueError("dmrs/agc/guard symbols must be pairwise disjoint")
        if any(s < 0 or s >= self.n_symbols for s in special):
            raise ValueError("symbol index out of range")
        if not 0 <= self.pscch_width_sc <= self.sc_per_subchannel:
            raise ValueError("pscch_width_sc must fit inside one sub-channel")
        if self.n_subchannels < 1:
            raise ValueError("need at least one sub-channel")

    @property
    def n_subcarriers(self) -> int:
        return self.sc_per_subchannel * self.n_subchannels

    @property
    def data_symbols(self) -> tuple:
        special = set(self.dmrs_symbols) | {self.agc_symbol, self.guard_symbol}
        return tuple(s for s in range(self.n_symbols) if s not in special)

    @property
    def n_data_symbols(self) -> int:
        return self.n_symbols - 2 - len(self.dmrs_symbols)


@dataclass(frozen=True)
class Allocation:
    """A run of consecutive sub-channels, start index plus width."""
    start_subchannel: int
    n_subchannels: int = 1

    def __post_init__(self):
        if self.start_subchannel < 0 or self.n_subchannels < 1:
            raise ValueError("invalid allocation")

    def validate(self, cfg: GridConfig):
        if self.start_subchannel + self.n_subchannels > cfg.n_subchannels:
            raise ValueError(
                f"allocation [{self.start_subchannel}, "
                f"{self.start_subchannel + self.n_subchannels}) exceeds "
                f"{cfg.n_subchannels} sub-channels"
            )

    def subcarriers(self, cfg: GridConfig) -> range:
        lo = self.start_subchannel * cfg.sc_per_subchannel
        return range(lo, lo + self.n_subchannels * cfg.sc_per_subchannel)


def pssch_re_count(cfg: GridConfig, alloc: Allocation) -> int:
    """Data REs of an allocation: data symbols x (allocated sc - PSCCH width)."""
    alloc.validate(cfg)
    width = alloc.n_subchannels * cfg.sc_per_subchannel - cfg.pscch_width_sc
    return cfg.n_data_symbols * width


def pscch_re_count(cfg: GridConfig) -> int:
    """Control REs: data symbols x PSCCH width."""
    return cfg.n_data_symbols * cfg.pscch_width_sc


@lru_cache(maxsize=None)
def region_indices(cfg: GridConfig, alloc: Allocation):
    """Flat cell indices (into a flattened n_symbols x n_subcarriers grid)
    for the PSCCH, PSSCH and DMRS regions of an allocation.

    Order within each region is frequency-first (all subcarriers of one
    symbol, ascending) then time, which fixes the symbol-sequence layout.
    """
    alloc.validate(cfg)
    n_sc = cfg.n_subcarriers
    band = np.asarray(alloc.subcarriers(cfg), dtype=np.int64)
    pscch_sc = band[:cfg.pscch_width_sc]
    pssch_sc = band[cfg.pscch_width_sc:]
    data_syms = np.asarray(cfg.data_symbols, dtype=np.int64)
    dmrs_syms = np.asarray(cfg.dmrs_symbols, dtype=np.int64)

    pscch = (data_syms[:, None] * n_sc + pscch_sc[None, :]).ravel()
    pssch = (data_syms[:, None] * n_sc + pssch_sc[None, :]).ravel()
    dmrs = (dmrs_syms[:, None] * n_sc + band[None, :]).ravel()
    return pscch, pssch, dmrs


def map_subframe(cfg: GridConfig, alloc: Allocation, pscch_syms, pssch_syms,
                 dmrs_seq) -> np.ndarray:
    """Place control/data/reference symbols onto a transmit grid.

    The guard row stays zero and the AGC row is a copy of symbol 1's row so
    transmit power is flat across the subframe.  Accepts batched inputs
    (leading axis shared by all three sequences).
    """
    pscch_idx, pssch_idx, dmrs_idx = region_indices(cfg, alloc)
    pscch_syms = np.asarray(pscch_syms, dtype=np.complex128)
    pssch_syms = np.asarray(pssch_syms, dtype=np.complex128)
    dmrs_seq = np.asarray(dmrs_seq, dtype=np.complex128)
    was_1d = pscch_syms.ndim == 1
    if was_1d:
        pscch_syms = pscch_syms[None, :]
        pssch_syms = pssch_syms[None, :]
        dmrs_seq = dmrs_seq[None, :]
    if pscch_syms.shape[1] != pscch_idx.size:
        raise ValueError(
            f"PSCCH length {pscch_syms.shape[1]} != {pscch_idx.size}")
    if pssch_syms.shape[1] != pssch_idx.size:
        raise ValueError(
            f"PSSCH length {pssch_syms.shape[1]} != {pssch_idx.size}")
    if dmrs_seq.shape[1] != dmrs_idx.size:
        raise ValueError(f"DMRS length {dmrs_seq.shape[1]} != {dmrs_idx.size}")

    B = pscch_syms.shape[0]
    flat = np.zeros((B, cfg.n_symbols * cfg.n_subcarriers), dtype=np.complex128)
    flat[:, pscch_idx] = pscch_syms
    flat[:, pssch_idx] = pssch_syms
    flat[:, dmrs_idx] = dmrs_seq
    grid = flat.reshape(B, cfg.n_symbols, cfg.n_subcarriers)
    grid[:, cfg.agc_symbol, :] = grid[:, 1, :]
    return grid[0] if was_1d else grid


def extract_subframe(cfg: GridConfig, alloc: Allocation, grid):
    """Inverse of map_subframe: pull the three regions out of a grid."""
    pscch_idx, pssch_idx, dmrs_idx = region_indices(cfg, alloc)
    arr = np.asarray(grid, dtype=np.complex128)
    was_1d = arr.ndim == 2
    if was_1d:
        arr = arr[None, :, :]
    if arr.shape[1] != cfg.n_symbols or arr.shape[2] != cfg.n_subcarriers:
        raise ValueError(
            f"grid shape {arr.shape[1:]} != "
            f"({cfg.n_symbols}, {cfg.n_subcarriers})")
    flat = arr.reshape(arr.shape[0], -1)
    pscch = flat[:, pscch_idx]
    pssch = flat[:, pssch_idx]
    dmrs = flat[:, dmrs_idx]
    if was_1d:
        return pscch[0], pssch[0], dmrs[0]
    return pscch, pssch, dmrs


def dmrs_sequence(vehicle_id: int, subframe_idx: int, length: int) -> np.ndarray:
    """Deterministic unit-magnitude QPSK reference sequence.

    Two LFSR bits per symbol, seeded from (vehicle_id, subframe_idx).  The
    sequence is defined over absolute grid coordinates so a receiver can
    regenerate any transmitter's reference cells without knowing its
    allocation: cell (dmrs column j, subcarrier k) of a full-band sequence
    is element j * n_subcarriers + k.
    """
    if length <= 0:
        raise ValueError("length must be positive")
    seed = coding.derive_seed(vehicle_id, subframe_idx, DMRS_SEED_SALT)
    bits = coding.lfsr_bits(seed, 2 * length)
    return coding.modulate(bits, coding.QPSK)


def dmrs_for_allocation(cfg: GridConfig, alloc: Allocation, vehicle_id: int,
                        subframe_idx: int) -> np.ndarray:
    """Slice of the full-band DMRS sequence covering one allocation,
    ordered to match map_subframe's DMRS region layout."""
    full = dmrs_sequence(vehicle_id, subframe_idx,
                         len(cfg.dmrs_symbols) * cfg.n_subcarriers)
    per_col = full.reshape(len(cfg.dmrs_symbols), cfg.n_subcarriers)
    band = np.asarray(alloc.subcarriers(cfg), dtype=np.int64)
    return per_col[:, band].ravel()
