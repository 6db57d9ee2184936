"""Performance evaluator: decode-outcome caching and offline statistics.

Per-block decode results are cached during runs and reduced offline into
per-window BLER samples, their mean/std/99th-percentile summaries, the
transmit-power back-off between the mean and tail curves, and throughput.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass

import numpy as np

from . import coding
from .link import LinkConfig, run_link_window


@dataclass(frozen=True)
class DecodeRecord:
    trial_idx: int
    subframe_idx: int
    tx_power_dbm: float
    mcs: int
    crc_pass: bool
    tb_bits: int


class RecordCache:
    """Append-only store of decode outcomes, keyed (trial_idx, subframe_idx).

    Appends are thread-safe so parallel trial workers can share one cache;
    analysis runs on an immutable snapshot and is invariant to append order.
    """

    def __init__(self):
        self._records = []
        self._keys = set()
        self._lock = threading.Lock()

    def record(self, rec: DecodeRecord):
        key = (rec.trial_idx, rec.subframe_idx)
        with self._lock:
            if key in self._keys:
                raise ValueError(f"duplicate decode record key {key}")
            self._keys.add(key)
            self._records.append(rec)

    def __len__(self):
        return len(self._records)

    def snapshot(self) -> tuple:
        with self._lock:
            return tuple(self._records)

    def window_samples(self, window_blocks: int) -> dict:
        """Reduce records to per-window BLER samples.

        Blocks of a trial are grouped by subframe index into consecutive
        windows of ``window_blocks``; result maps (tx_power_dbm, mcs,
        trial_idx, window_idx) -> BlerSample.  Independent of append order.
        """
        groups = {}
        for rec in self.snapshot():
            win = rec.subframe_idx // window_blocks
            key = (rec.tx_power_dbm, rec.mcs, rec.trial_idx, win)
            n, e = groups.get(key, (0, 0))
            groups[key] = (n + 1, e + (0 if rec.crc_pass else 1))
        return {k: BlerSample(n_blocks=n, n_errors=e)
                for k, (n, e) in groups.items()}


@dataclass(frozen=True)
class BlerSample:
    """One observation window's decode tally."""
    n_blocks: int
    n_errors: int

    def __post_init__(self):
        if self.n_blocks <= 0:
            raise ValueError("window must contain at least one block")
        if not 0 <= self.n_errors <= self.n_blocks:
            raise ValueError("error count outside [0, n_blocks]")

    @property
    def bler(self) -> float:
        return self.n_errors / self.n_blocks


@dataclass(frozen=True)
class BlerStats:
    mean: float
    std: float
    q99: float
    n_samples: int
    low_confidence: bool = False


def bler_stats(samples) -> BlerStats:
    """Mean, sample std (n-1) and nearest-rank 99th percentile.

    ``samples`` are BLER values in [0,1] or BlerSample objects.  Fewer than
    100 samples cannot resolve a 99th percentile, so the result is flagged
    low-confidence.
    """
    vals = np.array([s.bler if isinstance(s, BlerSample) else float(s)
                     for s in samples], dtype=np.float64)
    if vals.size == 0:
        raise ValueError("no BLER samples")
    if np.any((vals < 0) | (vals > 1)):
        raise ValueError("BLER samples must lie in [0, 1]")
    n = vals.size
    mean = float(np.mean(vals))
    if n > 1 and np.ptp(vals) > 0:
        std = float(np.std(vals, ddof=1))
    else:
        std = 0.0
    rank = math.ceil(0.99 * n)  # nearest-rank: value at index rank-1 ascending
    q99 = float(np.sort(vals)[rank - 1])
    return BlerStats(mean=mean, std=std, q99=q99, n_samples=n,
                     low_confidence=n < 100)


def mean_confidence_interval(samples, z: float = 2.576):
    """Normal-approximation CI half-width for the mean (z=2.576 gives 99%).

    Optional alternative reading of a "99% confidence" BLER figure; the
    primary statistic is the empirical 99th percentile.
    """
    vals = np.array([s.bler if isinstance(s, BlerSample) else float(s)
                     for s in samples], dtype=np.float64)
    if vals.size < 2:
        return 0.0
    return float(z * np.std(vals, ddof=1) / np.sqrt(vals.size))


class CurveCrossingError(ValueError):
    def __init__(self, curve_name: str, message: str):
        super().__init__(f"{curve_name} curve: {message}")
        self.curve_name = curve_name


def _crossing_power(curve, target_bler: float, floor: float, name: str) -> float:
    powers = np.array([p for p, _ in curve], dtype=np.float64)
    blers = np.array([b for _, b in curve], dtype=np.float64)
    if powers.size < 2:
        raise CurveCrossingError(name, "needs at least two points")
    if np.any(np.diff(powers) <= 0):
        raise CurveCrossingError(name, "powers must be strictly increasing")
    logs = np.log10(np.maximum(blers, floor))
    lt = np.log10(max(target_bler, floor))
    if logs[0] <= lt:
        raise CurveCrossingError(
            name, f"already at or below target {target_bler} at the lowest power")
    for i in range(1, powers.size):
        if logs[i] <= lt:
            frac = (logs[i - 1] - lt) / (logs[i - 1] - logs[i])
            return float(powers[i - 1] + frac * (powers[i] - powers[i - 1]))
    raise CurveCrossingError(name, f"never reaches target {target_bler}")


def backoff_db(curve_mean, curve_q99, target_bler: float,
               bler_floor: float = 1e-6) -> float:
    """Extra power (dB) for the q99 curve to meet the target the mean meets.

    Crossings are found by linear interpolation in (power, log10 BLER);
    zero-BLER points are clamped to ``bler_floor`` before the log.
    """
    p_mean = _crossing_power(curve_mean, target_bler, bler_floor, "mean")
    p_q99 = _crossing_power(curve_q99, target_bler, bler_floor, "q99")
    return p_q99 - p_mean


def throughput_bps(mean_bler: float, mcs_index: int, n_re: int,
                   blocks_per_second: float = 1000.0) -> float:
    """(1 - BLER) x transport block size x blocks per second."""
    tbs = coding.tbs_for(coding.mcs_lookup(mcs_index), n_re)
    return (1.0 - mean_bler) * tbs * blocks_per_second


# ---------------------------------------------------------------------------
# sweep orchestration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepStatsRow:
    tx_power_dbm: float
    mcs: int
    n_samples: int
    bler_mean: float
    bler_std: float
    bler_q99: float


@dataclass(frozen=True)
class SweepRawRow:
    trial: int
    tx_power_dbm: float
    mcs: int
    window_idx: int
    n_blocks: int
    n_errors: int


@dataclass
class SweepResult:
    stats_rows: list
    raw_rows: list

    def curve(self, mcs: int, which: str = "mean"):
        """(power, bler) curve for one MCS, powers ascending."""
        attr = {"mean": "bler_mean", "q99": "bler_q99"}[which]
        rows = sorted((r for r in self.stats_rows if r.mcs == mcs),
                      key=lambda r: r.tx_power_dbm)
        return [(r.tx_power_dbm, getattr(r, attr)) for r in rows]


def _trial_seed_seq(master_seed: int, p_idx: int, m_idx: int, trial: int):
    return np.random.SeedSequence(entropy=master_seed,
                                  spawn_key=(p_idx, m_idx, trial))


def _run_cell(link_cfg: LinkConfig, mcs: int, power: float, p_idx: int,
              m_idx: int, trials: int, window_blocks: int, master_seed: int,
              record_cache: RecordCache | None):
    raw = []
    samples = []
    for t in range(trials):
        rng = np.random.default_rng(_trial_seed_seq(master_seed, p_idx, m_idx, t))
        res = run_link_window(link_cfg, mcs, power, window_blocks, rng,
                              start_subframe_idx=t * window_blocks)
        n_err = int(window_blocks - np.sum(res.crc_pass))
        raw.append(SweepRawRow(trial=t, tx_power_dbm=power, mcs=mcs,
                               window_idx=0, n_blocks=window_blocks,
                               n_errors=n_err))
        samples.append(BlerSample(window_blocks, n_err))
        if record_cache is not None:
            for i, ok in enumerate(res.crc_pass):
                record_cache.record(DecodeRecord(
                    trial_idx=t, subframe_idx=t * window_blocks + i,
                    tx_power_dbm=power, mcs=mcs, crc_pass=bool(ok),
                    tb_bits=res.tbs))
    st = bler_stats(samples)
    stats = SweepStatsRow(tx_power_dbm=power, mcs=mcs, n_samples=st.n_samples,
                          bler_mean=st.mean, bler_std=st.std, bler_q99=st.q99)
    return stats, raw


def run_bler_sweep(link_cfg: LinkConfig, powers, mcs_list, trials: int,
                   window_blocks: int, master_seed: int, workers: int = 1,
                   record_cache: RecordCache | None = None,
                   progress=None) -> SweepResult:
    """Trials x powers x MCS sweep on one link.

    Each trial gets an independently derived RNG stream keyed by the cell
    coordinates, so results are reproducible regardless of worker count or
    execution order; output rows are canonically sorted.
    """
    cells = [(pi, p, mi, m) for pi, p in enumerate(powers)
             for mi, m in enumerate(mcs_list)]
    results = []
    if workers > 1:
        import concurrent.futures as cf
        with cf.ProcessPoolExecutor(max_workers=workers) as pool:
            futs = {
                pool.submit(_run_cell, link_cfg, m, float(p), pi, mi, trials,
                            window_blocks, master_seed, None): (pi, mi)
                for pi, p, mi, m in cells
            }
            for fut in cf.as_completed(futs):
                results.append(fut.result())
                if progress:
                    progress(len(results), len(cells))
    else:
        for pi, p, mi, m in cells:
            results.append(_run_cell(link_cfg, m, float(p), pi, mi, trials,
                                     window_blocks, master_seed, record_cache))
            if progress:
                progress(len(results), len(cells))

    stats_rows = sorted((s for s, _ in results),
                        key=lambda r: (r.tx_power_dbm, r.mcs))
    raw_rows = sorted((row for _, raw in results for row in raw),
                      key=lambda r: (r.tx_power_dbm, r.mcs, r.trial,
                                     r.window_idx))
    return SweepResult(stats_rows=stats_rows, raw_rows=raw_rows)


@dataclass(frozen=True)
class ThroughputRow:
    mcs: int
    tbs: int
    bler_mean: float
    throughput_bps: float


def run_throughput_sweep(link_cfg: LinkConfig, mcs_list, tx_power_dbm: float,
                         n_blocks: int, master_seed: int,
                         blocks_per_second: float = 1000.0) -> list:
    """Mean throughput per MCS at one fixed transmit power."""
    rows = []
    for mi, mcs in enumerate(mcs_list):
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=master_seed, spawn_key=(mi,)))
        res = run_link_window(link_cfg, mcs, tx_power_dbm, n_blocks, rng)
        bler = 1.0 - float(np.mean(res.crc_pass))
        rows.append(ThroughputRow(
            mcs=mcs, tbs=res.tbs, bler_mean=bler,
            throughput_bps=(1.0 - bler) * res.tbs * blocks_per_second))
    return rows
