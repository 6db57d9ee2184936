"""Bit-level processing shared by the control and data chains.

CRC attach/check, rate-1/3 convolutional coding with soft Viterbi decoding,
circular-buffer rate matching, LFSR scrambling, Gray constellation
mapping/demapping and the MCS table.

All bit-level functions accept either a single block (1-D uint8 array of
0/1) or a batch of equal-length blocks (2-D array, one block per row) and
return the matching rank.  Batched operation is what makes Monte Carlo
sweeps affordable, so the internals are written against the 2-D form.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

# ---------------------------------------------------------------------------
# MCS table
# ---------------------------------------------------------------------------

QPSK = "qpsk"
QAM16 = "16qam"
QAM64 = "64qam"

BITS_PER_SYMBOL = {QPSK: 2, QAM16: 4, QAM64: 6}

MAX_MCS = 28


@dataclass(frozen=True)
class McsEntry:
    index: int
    modulation: str
    code_rate: float

    @property
    def bits_per_symbol(self) -> int:
        return BITS_PER_SYMBOL[self.modulation]


def _build_mcs_table():
    table = []
    for i in range(0, 10):
        table.append(McsEntry(i, QPSK, 0.10 + 0.05 * i))
    for i in range(10, 17):
        table.append(McsEntry(i, QAM16, 0.33 + 0.045 * (i - 10)))
    for i in range(17, 29):
        table.append(McsEntry(i, QAM64, 0.43 + 0.0455 * (i - 17)))
    return tuple(table)


MCS_TABLE = _build_mcs_table()


def mcs_lookup(index: int) -> McsEntry:
    """Return the modulation/code-rate entry for MCS ``index`` (0..28)."""
    if not 0 <= index <= MAX_MCS:
        raise ValueError(f"MCS index {index} out of range 0..{MAX_MCS}")
    return MCS_TABLE[index]


class AllocationTooSmallError(ValueError):
    """Raised when an allocation cannot carry the minimum transport block."""


def tbs_for(mcs: McsEntry, n_re: int) -> int:
    """Transport block size in bits for ``n_re`` data resource elements.

    Largest multiple of 8 not exceeding n_re * bits_per_symbol * code_rate
    minus the 24 CRC bits; the smallest legal block is 8 bits.
    """
    if n_re <= 0:
        raise ValueError(f"n_re must be positive, got {n_re}")
    capacity = n_re * mcs.bits_per_symbol * mcs.code_rate
    tbs = int((capacity - 24.0 + 1e-9) // 8) * 8
    if tbs < 8:
        raise AllocationTooSmallError(
            f"allocation of {n_re} REs too small for MCS {mcs.index}"
        )
    return tbs


# ---------------------------------------------------------------------------
# bit array helpers
# ---------------------------------------------------------------------------


def _as_batch(bits):
    """Promote to (B, n) uint8; return (array, was_1d)."""
    arr = np.asarray(bits, dtype=np.uint8)
    if arr.ndim == 1:
        return arr[None, :], True
    if arr.ndim != 2:
        raise ValueError(f"expected 1-D or 2-D bit array, got shape {arr.shape}")
    return arr, False


def _debatch(arr, was_1d):
    return arr[0] if was_1d else arr


def bits_from_int(value: int, width: int) -> np.ndarray:
    """MSB-first bit vector of ``value`` with ``width`` bits."""
    return np.array([(value >> (width - 1 - i)) & 1 for i in range(width)],
                    dtype=np.uint8)


def int_from_bits(bits) -> int:
    out = 0
    for b in np.asarray(bits, dtype=np.uint8):
        out = (out << 1) | int(b)
    return out


# ---------------------------------------------------------------------------
# CRC
# ---------------------------------------------------------------------------

CRC_KINDS = {
    # kind -> (length, generator polynomial incl. leading term)
    "data24": (24, 0x1864CFB),
    "control16": (16, 0x11021),
}


@lru_cache(maxsize=None)
def _crc_residues(n_bits: int, kind: str) -> np.ndarray:
    """Residue x^(n_bits-1-i+L) mod g for each payload bit position i.

    The CRC of a message is the XOR of the residues of its set bits, which
    vectorizes over whole batches.
    """
    length, poly = CRC_KINDS[kind]
    top = 1 << length
    # x^L mod g: shift a single 1 up L times with polynomial reduction
    cur = 1
    for _ in range(length):
        cur <<= 1
        if cur & top:
            cur ^= poly
    residues = np.empty(n_bits, dtype=np.uint32)
    residues[n_bits - 1] = cur
    for i in range(n_bits - 2, -1, -1):
        cur <<= 1
        if cur & top:
            cur ^= poly
        residues[i] = cur
    return residues


def _crc_values(payload: np.ndarray, kind: str) -> np.ndarray:
    """CRC register value per row of a (B, k) payload batch."""
    residues = _crc_residues(payload.shape[1], kind)
    masked = np.where(payload.astype(bool), residues[None, :], np.uint32(0))
    return np.bitwise_xor.reduce(masked, axis=1)


def crc_attach(bits, kind: str):
    """Append the CRC of ``kind`` ('data24' or 'control16') to each block."""
    payload, was_1d = _as_batch(bits)
    length, _ = CRC_KINDS[kind]
    vals = _crc_values(payload, kind)
    shifts = np.arange(length - 1, -1, -1, dtype=np.uint32)
    crc_bits = ((vals[:, None] >> shifts[None, :]) & 1).astype(np.uint8)
    return _debatch(np.concatenate([payload, crc_bits], axis=1), was_1d)


def crc_check(bits, kind: str):
    """True where the trailing CRC matches; scalar for 1-D input."""
    blocks, was_1d = _as_batch(bits)
    length, _ = CRC_KINDS[kind]
    if blocks.shape[1] <= length:
        raise ValueError("block shorter than its CRC")
    payload = blocks[:, :-length]
    rx_crc = blocks[:, -length:]
    vals = _crc_values(payload, kind)
    shifts = np.arange(length - 1, -1, -1, dtype=np.uint32)
    exp = ((vals[:, None] >> shifts[None, :]) & 1).astype(np.uint8)
    ok = np.all(exp == rx_crc, axis=1)
    return bool(ok[0]) if was_1d else ok


# ---------------------------------------------------------------------------
# scrambling LFSR: x^31 + x^3 + 1
# ---------------------------------------------------------------------------

_LFSR_MASK = 0x7FFFFFFF


def lfsr_bits(seed: int, n: int) -> np.ndarray:
    """First ``n`` output bits of the x^31+x^3+1 LFSR started at ``seed``."""
    return lfsr_bits_batch(np.array([seed], dtype=np.uint64), n)[0]


def lfsr_bits_batch(seeds, n: int) -> np.ndarray:
    """LFSR streams for several seeds at once; returns (len(seeds), n) uint8.

    Output is bit 0 of the state, one left shift per step, feedback from
    taps 31 and 3.  An all-zero seed never leaves the zero state and is
    rejected.

    Runs bit-sliced: the batch is held as 31 packed bit-planes so each
    step costs one byte-array XOR regardless of batch size.
    """
    state = np.asarray(seeds, dtype=np.uint64) & np.uint64(_LFSR_MASK)
    if np.any(state == 0):
        raise ValueError("LFSR seed must be a nonzero 31-bit value")
    B = state.size
    planes = [np.packbits(((state >> np.uint64(j)) & np.uint64(1)
                           ).astype(np.uint8), bitorder="little")
              for j in range(31)]
    out_planes = []
    for _ in range(n):
        out_planes.append(planes[0])
        fb = planes[30] ^ planes[2]
        planes = [fb] + planes[:30]
    packed = np.stack(out_planes)  # (n, ceil(B/8))
    bits = np.unpackbits(packed, axis=1, bitorder="little", count=B)
    return np.ascontiguousarray(bits.T)


def derive_seed(vehicle_id: int, subframe_idx: int, salt: int = 0) -> int:
    """Deterministic nonzero 31-bit LFSR seed from transmission identity.

    Distinct salts decorrelate the DMRS, control and data streams of the
    same (vehicle, subframe) pair.
    """
    h = (vehicle_id & 0xFFFFFFFF) * 0x9E3779B1
    h ^= (subframe_idx & 0xFFFFFFFF) * 0x85EBCA77
    h ^= (salt & 0xFFFFFFFF) * 0xC2B2AE3D
    h &= 0xFFFFFFFFFFFFFFFF
    h ^= h >> 29
    seed = h & _LFSR_MASK
    return seed if seed != 0 else 1


def scramble(bits, seed):
    """XOR each block with the LFSR stream; self-inverse for a given seed.

    ``seed`` may be a scalar (same stream for every row) or one seed per
    row of a batched input.
    """
    blocks, was_1d = _as_batch(bits)
    seeds = np.atleast_1d(np.asarray(seed, dtype=np.uint64))
    if seeds.size == 1 and blocks.shape[0] > 1:
        stream = lfsr_bits_batch(seeds, blocks.shape[1])
        out = blocks ^ stream  # broadcast single stream
    else:
        if seeds.size != blocks.shape[0]:
            raise ValueError("need one seed per block")
        out = blocks ^ lfsr_bits_batch(seeds, blocks.shape[1])
    return _debatch(out, was_1d)


def scramble_llrs(llrs, seed):
    """Soft-domain descrambling: flip LLR signs where the stream is 1."""
    arr = np.asarray(llrs, dtype=np.float32)
    batch = arr[None, :] if arr.ndim == 1 else arr
    seeds = np.atleast_1d(np.asarray(seed, dtype=np.uint64))
    stream = lfsr_bits_batch(seeds, batch.shape[1])
    flip = 1.0 - 2.0 * stream.astype(np.float32)
    out = batch * flip
    return out[0] if arr.ndim == 1 else out


# ---------------------------------------------------------------------------
# convolutional code: rate 1/3, K=7, generators 133/171/165 (octal)
# ---------------------------------------------------------------------------

CONV_GENERATORS = (0o133, 0o171, 0o165)
CONV_K = 7
_N_STATES = 64
_TAIL = CONV_K - 1


def _parity(x: int) -> int:
    x ^= x >> 4
    x ^= x >> 2
    x ^= x >> 1
    return x & 1


def _build_trellis():
    """Branch sign table in butterfly order.

    State ns = (b << 5) | u with predecessors 2u and 2u+1; the register for
    transition (pred=2u+j, input=b) is (b << 6) | (2u + j), MSB = newest bit.
    """
    sgn = np.empty((2, 32, 2, 3), dtype=np.float32)
    for b in range(2):
        for u in range(32):
            for j in range(2):
                reg = (b << 6) | (2 * u + j)
                for gi, g in enumerate(CONV_GENERATORS):
                    sgn[b, u, j, gi] = 1.0 - 2.0 * _parity(reg & g)
    return np.ascontiguousarray(sgn.reshape(128, 3).T)


_SGN_MAT = _build_trellis()
_LLR_CAP = 1.0e3


def conv_encode(bits):
    """Rate-1/3 encode with 6 zero tail bits appended internally.

    (B, k) input -> (B, 3*(k+6)) output; the three generator outputs of a
    step are adjacent in the stream.
    """
    blocks, was_1d = _as_batch(bits)
    B, k = blocks.shape
    padded = np.zeros((B, k + 2 * _TAIL), dtype=np.uint8)
    padded[:, _TAIL:_TAIL + k] = blocks
    n_steps = k + _TAIL
    out = np.zeros((B, n_steps, 3), dtype=np.uint8)
    for gi, g in enumerate(CONV_GENERATORS):
        acc = np.zeros((B, n_steps), dtype=np.uint8)
        for p in range(CONV_K):
            if (g >> (CONV_K - 1 - p)) & 1:  # tap at delay p
                acc ^= padded[:, _TAIL - p:_TAIL - p + n_steps]
        out[:, :, gi] = acc
    return _debatch(out.reshape(B, 3 * n_steps), was_1d)


def viterbi_decode(llrs, chunk: int = 32):
    """Maximum-likelihood decode of soft inputs; zero-state start and end.

    Positive LLR means bit 0 is more likely.  Input length must be a
    multiple of 3; the 6 tail bits are stripped from the output.
    """
    arr = np.asarray(llrs, dtype=np.float32)
    batch = arr[None, :] if arr.ndim == 1 else arr
    B, L = batch.shape
    if L % 3 != 0:
        raise ValueError(f"LLR length {L} not divisible by 3")
    m = L // 3
    if m <= _TAIL:
        raise ValueError("LLR block too short to contain the tail")
    lam = np.clip(batch.reshape(B, m, 3), -_LLR_CAP, _LLR_CAP)

    pm = np.full((B, _N_STATES), -3.0e8, dtype=np.float32)
    pm[:, 0] = 0.0
    choice = np.empty((m, B, _N_STATES), dtype=bool)
    for t0 in range(0, m, chunk):
        t1 = min(t0 + chunk, m)
        bm = (lam[:, t0:t1, :].reshape(-1, 3) @ _SGN_MAT)
        bm = bm.reshape(B, t1 - t0, 2, 32, 2)
        bm *= 0.5
        for t in range(t0, t1):
            cand = pm.reshape(B, 1, 32, 2) + bm[:, t - t0]
            c0 = cand[:, :, :, 0]
            c1 = cand[:, :, :, 1]
            ch = choice[t].reshape(B, 2, 32)
            np.greater(c1, c0, out=ch)
            pm = np.where(ch, c1, c0).reshape(B, _N_STATES)
        pm = pm - pm.max(axis=1, keepdims=True)

    # traceback from the zero state forced by the tail
    bits = np.empty((m, B), dtype=np.uint8)
    state = np.zeros(B, dtype=np.intp)
    flat_choice = choice.reshape(m, B * _N_STATES)
    offsets = np.arange(B) * _N_STATES
    for t in range(m - 1, -1, -1):
        bits[t] = state >> 5
        j = flat_choice[t, offsets + state]
        state = 2 * (state & 31) + j
    decoded = bits[:m - _TAIL].T.copy()
    return decoded[0] if arr.ndim == 1 else decoded


# ---------------------------------------------------------------------------
# rate matching
# ---------------------------------------------------------------------------


def _kept_indices(source_len: int, target_len: int) -> np.ndarray:
    return (np.arange(target_len, dtype=np.int64) * source_len) // target_len


def rate_match(coded, target_len: int):
    """Circular repetition (target > source) or uniform puncturing."""
    blocks, was_1d = _as_batch(coded)
    n = blocks.shape[1]
    if target_len == n:
        out = blocks.copy()
    elif target_len > n:
        idx = np.arange(target_len, dtype=np.int64) % n
        out = blocks[:, idx]
    else:
        out = blocks[:, _kept_indices(n, target_len)]
    return _debatch(out, was_1d)


def rate_dematch(llrs, source_len: int):
    """Inverse of rate_match on soft values.

    Repeated positions have their LLRs summed; punctured positions come
    back as zero LLRs.
    """
    arr = np.asarray(llrs, dtype=np.float32)
    batch = arr[None, :] if arr.ndim == 1 else arr
    B, target = batch.shape
    if target == source_len:
        out = batch.copy()
    elif target > source_len:
        out = np.zeros((B, source_len), dtype=np.float32)
        idx = np.arange(target, dtype=np.int64) % source_len
        np.add.at(out, (slice(None), idx), batch)
    else:
        out = np.zeros((B, source_len), dtype=np.float32)
        out[:, _kept_indices(source_len, target)] = batch
    return out[0] if arr.ndim == 1 else out


# ---------------------------------------------------------------------------
# constellations (Gray mapped, unit average power)
# ---------------------------------------------------------------------------

# per-axis amplitude levels indexed by the axis bits, MSB first
_PAM_LEVELS = {
    QPSK: np.array([1.0, -1.0]) / np.sqrt(2.0),
    QAM16: np.array([1.0, 3.0, -1.0, -3.0]) / np.sqrt(10.0),
    QAM64: np.array([3.0, 1.0, 5.0, 7.0, -3.0, -1.0, -5.0, -7.0]) / np.sqrt(42.0),
}


def _axis_bits(modulation: str) -> int:
    return BITS_PER_SYMBOL[modulation] // 2


def modulate(bits, modulation: str):
    """Map bits to unit-power Gray constellation symbols.

    Even bit positions index the I axis, odd positions the Q axis, matching
    the LTE bit-to-symbol convention; QPSK bits 00 map to (+1+j)/sqrt(2).
    """
    blocks, was_1d = _as_batch(bits)
    bps = BITS_PER_SYMBOL[modulation]
    B, n = blocks.shape
    if n % bps != 0:
        raise ValueError(f"bit count {n} not a multiple of {bps}")
    half = _axis_bits(modulation)
    grouped = blocks.reshape(B, n // bps, bps)
    weights = 1 << np.arange(half - 1, -1, -1)
    i_idx = (grouped[:, :, 0::2] * weights).sum(axis=2)
    q_idx = (grouped[:, :, 1::2] * weights).sum(axis=2)
    levels = _PAM_LEVELS[modulation]
    syms = levels[i_idx] + 1j * levels[q_idx]
    return _debatch(syms, was_1d)


@lru_cache(maxsize=None)
def _pam_bit_masks(modulation: str):
    """For each axis bit, the level indices where that bit is 0 / 1."""
    half = _axis_bits(modulation)
    n_lev = 1 << half
    masks = []
    for b in range(half):
        shift = half - 1 - b
        idx = np.arange(n_lev)
        masks.append(((idx >> shift) & 1).astype(bool))
    return masks


def soft_demod(symbols, modulation: str, noise_var):
    """Max-log LLRs; positive LLR means bit 0 is more likely.

    ``noise_var`` is the complex noise variance per symbol, scalar or
    broadcastable to the symbol array.
    """
    syms = np.asarray(symbols)
    batch = syms[None, :] if syms.ndim == 1 else syms
    B, n = batch.shape
    bps = BITS_PER_SYMBOL[modulation]
    half = _axis_bits(modulation)
    levels = _PAM_LEVELS[modulation]
    nv = np.broadcast_to(np.asarray(noise_var, dtype=np.float64), batch.shape)
    nv = np.maximum(nv, 1e-30)

    out = np.empty((B, n, bps), dtype=np.float32)
    masks = _pam_bit_masks(modulation)
    for axis, first in ((batch.real, 0), (batch.imag, 1)):
        d2 = (axis[..., None] - levels[None, None, :]) ** 2  # (B,n,levels)
        for b, mask in enumerate(masks):
            d0 = d2[..., ~mask].min(axis=-1)
            d1 = d2[..., mask].min(axis=-1)
            out[:, :, first + 2 * b] = ((d1 - d0) / nv).astype(np.float32)
    flat = out.reshape(B, n * bps)
    return flat[0] if syms.ndim == 1 else flat


def hard_demod(symbols, modulation: str):
    """Minimum-distance hard decisions, returned as bits."""
    llr = soft_demod(symbols, modulation, 1.0)
    return (llr < 0).astype(np.uint8)
