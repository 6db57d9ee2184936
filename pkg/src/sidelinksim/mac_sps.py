"""Multi-vehicle resource selection above the PHY.

Random, pre-configured and sensing-based semi-persistent scheduling over a
sub-channelized pool.  A resource is a (subframe offset within the
selection period, start sub-channel) pair; grants persist for a reselection
counter drawn from a configurable range and are re-picked when it expires.

The network stepper owns all vehicle state and advances one subframe at a
time, single-threaded; run independent replicas for parallel scenarios.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import coding, grid as grid_mod, phy_rx, phy_tx
from .grid import Allocation, GridConfig
from .phy_tx import OfdmConfig, Sci

SELECTION_PERIODS_MS = (1, 10, 20, 50, 100)
POLICIES = ("random", "preconfigured", "sensing")

# rri_code for each supported period, for reservations carried in the SCI
_PERIOD_TO_RRI = {1: 1, 10: 2, 20: 3, 50: 4, 100: 5}


@dataclass(frozen=True)
class PoolConfig:
    n_subchannels: int = 4
    selection_period_ms: int = 10
    sensing_window_ms: int = 100
    keep_fraction: float = 0.2
    # candidates with average energy above this are excluded; -inf disables
    # energy-based exclusion (nothing is "above" a disabled threshold)
    rssi_threshold: float = float("-inf")
    preconfigured_start: int = 0
    preconfigured_offset: int = 0
    counter_range: tuple = (5, 15)

    def __post_init__(self):
        if self.selection_period_ms not in SELECTION_PERIODS_MS:
            raise ValueError(
                f"selection period must be one of {SELECTION_PERIODS_MS}")
        if not 0.0 < self.keep_fraction <= 1.0:
            raise ValueError("keep_fraction must be in (0, 1]")
        if self.sensing_window_ms < self.selection_period_ms:
            raise ValueError("sensing window shorter than the period")
        if self.counter_range[0] < 1 or self.counter_range[1] < self.counter_range[0]:
            raise ValueError("bad reselection counter range")


@dataclass
class Grant:
    start_subchannel: int
    n_subchannels: int
    period_ms: int
    reselection_counter: int
    subframe_offset: int = 0
    sensing_fallback: bool = False

    def covers(self):
        return range(self.start_subchannel,
                     self.start_subchannel + self.n_subchannels)


class SensingHistory:
    """Ring buffer of per-(subframe mod window, sub-channel) observations.

    ``energy`` holds the last window of measured linear powers; ``reserved``
    flags resources claimed by decoded SCI reservations for subframes that
    have not happened yet (cleared as those subframes pass).
    """

    def __init__(self, window_ms: int, n_subchannels: int):
        self.window = int(window_ms)
        self.n_subchannels = int(n_subchannels)
        self.energy = np.zeros((self.window, self.n_subchannels))
        self.reserved = np.zeros((self.window, self.n_subchannels), dtype=bool)
        self._filled = 0

    def record(self, subframe_idx: int, energies):
        row = subframe_idx % self.window
        self.reserved[row, :] = False  # that subframe has now happened
        self.energy[row, :] = energies
        self._filled = min(self._filled + 1, self.window)

    def mark_reserved(self, future_subframe_idx: int, start: int, width: int):
        row = future_subframe_idx % self.window
        self.reserved[row, start:start + width] = True

    def candidate_energy(self, now_idx: int, offset: int, period: int,
                         start: int, width: int) -> float:
        """Mean measured energy of a (offset, start..start+width) candidate
        over all window slots congruent to it."""
        future = self._future_subframe(now_idx, offset, period)
        rows = np.arange(future % period, self.window, period) % self.window
        return float(np.mean(self.energy[rows][:, start:start + width]))

    def candidate_reserved(self, now_idx: int, offset: int, period: int,
                           start: int, width: int) -> bool:
        future = self._future_subframe(now_idx, offset, period)
        return bool(np.any(self.reserved[future % self.window,
                                         start:start + width]))

    @staticmethod
    def _future_subframe(now_idx: int, offset: int, period: int) -> int:
        """Next subframe strictly after now with index % period == offset."""
        f = now_idx + 1 + ((offset - (now_idx + 1)) % period)
        return f


def select_resource(policy: str, history: SensingHistory, pool: PoolConfig,
                    width: int, rng, now_idx: int = 0) -> Grant:
    """Pick a grant for the next selection period.

    random: uniform over all (offset, start) resources.  preconfigured: the
    fixed pool position.  sensing: drop resources reserved by decoded SCIs
    or above the RSSI threshold, rank the rest by ascending energy, keep
    the lowest keep_fraction and pick uniformly among those; if exclusion
    empties the candidate set, fall back to pure energy ranking over all
    resources and flag the grant.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    if width > pool.n_subchannels:
        raise ValueError("allocation wider than the pool")
    period = pool.selection_period_ms
    starts = range(pool.n_subchannels - width + 1)
    counter = int(rng.integers(pool.counter_range[0],
                               pool.counter_range[1] + 1))

    def grant(offset, start, fallback=False):
        return Grant(start_subchannel=start, n_subchannels=width,
                     period_ms=period, reselection_counter=counter,
                     subframe_offset=offset, sensing_fallback=fallback)

    if policy == "preconfigured":
        if pool.preconfigured_start + width > pool.n_subchannels:
            raise ValueError("preconfigured start outside the pool")
        return grant(pool.preconfigured_offset % period,
                     pool.preconfigured_start)

    candidates = [(o, s) for o in range(period) for s in starts]
    if policy == "random":
        o, s = candidates[int(rng.integers(len(candidates)))]
        return grant(o, s)

    energies = np.array([history.candidate_energy(now_idx, o, period, s, width)
                         for o, s in candidates])
    excluded = np.array([
        history.candidate_reserved(now_idx, o, period, s, width)
        or (np.isfinite(pool.rssi_threshold)
            and energies[i] > pool.rssi_threshold)
        for i, (o, s) in enumerate(candidates)])

    fallback = bool(excluded.all())
    keep_pool = np.arange(len(candidates)) if fallback else np.flatnonzero(~excluded)
    order = keep_pool[np.argsort(energies[keep_pool], kind="stable")]
    n_keep = max(1, int(np.ceil(pool.keep_fraction * order.size)))
    kept = order[:n_keep]
    o, s = candidates[int(kept[int(rng.integers(n_keep))])]
    return grant(o, s, fallback=fallback)


# ---------------------------------------------------------------------------
# network stepping
# ---------------------------------------------------------------------------


@dataclass
class Vehicle:
    vehicle_id: int
    policy: str = "random"
    mcs: int = 5
    snr_db: float = 20.0
    width: int = 1
    grant: Grant | None = None
    history: SensingHistory | None = None


@dataclass(frozen=True)
class TxRecord:
    subframe_idx: int
    vehicle_id: int
    start_subchannel: int
    width: int
    collided: bool
    n_receivers: int
    n_success: int


def collision_rate(log) -> float:
    """Fraction of transmissions whose allocation overlapped another."""
    if not log:
        return 0.0
    return sum(1 for r in log if r.collided) / len(log)


def packet_reception_ratio(log) -> float:
    """Successful receptions over transmissions x potential receivers."""
    denom = sum(r.n_receivers for r in log)
    if denom == 0:
        return 0.0
    return sum(r.n_success for r in log) / denom


class SpsNetwork:
    """Vehicles sharing one resource pool, stepped subframe by subframe.

    ``mode='abstract'``: reception succeeds iff the transmission did not
    overlap another and the link SNR clears the per-MCS threshold (derived
    from this simulator's own BLER curves at BLER 0.1).  ``mode='full_phy'``
    superimposes all transmit waveforms and runs the buffered-subframe
    receiver at every listening vehicle.

    All vehicles share one scrambling/DMRS identity (``network_id``) so any
    receiver can blind-decode any transmitter, broadcast-style.
    """

    def __init__(self, pool: PoolConfig, vehicles, snr_thresholds: dict,
                 rng, mode: str = "abstract", grid_cfg: GridConfig = None,
                 ofdm: OfdmConfig = None, network_id: int = 0):
        if mode not in ("abstract", "full_phy"):
            raise ValueError(f"unknown mode {mode!r}")
        self.pool = pool
        self.vehicles = list(vehicles)
        self.thresholds = dict(snr_thresholds)
        self.rng = rng
        self.mode = mode
        self.network_id = network_id
        self.subframe_idx = 0
        self.log = []
        if mode == "full_phy":
            self.grid_cfg = grid_cfg or GridConfig(n_subchannels=pool.n_subchannels)
            if self.grid_cfg.n_subchannels != pool.n_subchannels:
                raise ValueError("grid width must match the pool")
            self.ofdm = ofdm or OfdmConfig()
        for v in self.vehicles:
            if v.history is None:
                v.history = SensingHistory(pool.sensing_window_ms,
                                           pool.n_subchannels)

    def _ensure_grant(self, v: Vehicle):
        if v.grant is None:
            v.grant = select_resource(v.policy, v.history, self.pool, v.width,
                                      self.rng, now_idx=self.subframe_idx)

    def step(self):
        """Advance one subframe; returns the TxRecords of this subframe."""
        t = self.subframe_idx
        for v in self.vehicles:
            self._ensure_grant(v)

        txs = [v for v in self.vehicles
               if t % v.grant.period_ms == v.grant.subframe_offset]
        tx_ids = {v.vehicle_id for v in txs}

        # overlap detection among this subframe's transmitters
        collided = {}
        for v in txs:
            rng_v = set(v.grant.covers())
            collided[v.vehicle_id] = any(
                rng_v & set(o.grant.covers())
                for o in txs if o.vehicle_id != v.vehicle_id)

        if self.mode == "abstract":
            records = self._outcomes_abstract(t, txs, tx_ids, collided)
        else:
            records = self._outcomes_full_phy(t, txs, tx_ids, collided)
        self.log.extend(records)

        self._update_sensing(t, txs, tx_ids, collided)

        # counters decrement on transmission; reselect exactly at zero
        for v in txs:
            v.grant.reselection_counter -= 1
            if v.grant.reselection_counter <= 0:
                v.grant = None
        self.subframe_idx += 1
        return records

    def run(self, n_subframes: int):
        for _ in range(n_subframes):
            self.step()
        return self.log

    def _decodable(self, v: Vehicle) -> bool:
        return v.snr_db >= self.thresholds.get(v.mcs, float("inf"))

    def _outcomes_abstract(self, t, txs, tx_ids, collided):
        records = []
        listeners = [r for r in self.vehicles if r.vehicle_id not in tx_ids]
        for v in txs:
            ok = (not collided[v.vehicle_id]) and self._decodable(v)
            n_success = len(listeners) if ok else 0
            records.append(TxRecord(
                subframe_idx=t, vehicle_id=v.vehicle_id,
                start_subchannel=v.grant.start_subchannel, width=v.width,
                collided=collided[v.vehicle_id],
                n_receivers=len(self.vehicles) - 1, n_success=n_success))
        return records

    def _outcomes_full_phy(self, t, txs, tx_ids, collided):
        cfg, ofdm = self.grid_cfg, self.ofdm
        records = []
        if not txs:
            return records
        waves = np.zeros(cfg.n_symbols * ofdm.symbol_samples,
                         dtype=np.complex128)
        payloads = {}
        for v in txs:
            alloc = Allocation(v.grant.start_subchannel, v.width)
            sci = Sci(mcs=v.mcs, n_subchannels=v.width,
                      rri_code=_PERIOD_TO_RRI[v.grant.period_ms])
            tbs = coding.tbs_for(coding.mcs_lookup(v.mcs),
                                 grid_mod.pssch_re_count(cfg, alloc))
            payload = self.rng.integers(0, 2, tbs).astype(np.uint8)
            payloads[v.vehicle_id] = payload
            # per-vehicle SNR realized as tx power over a unit noise floor
            waves = waves + phy_tx.build_tx_subframe(
                payload, sci, alloc, self.network_id, t, cfg, ofdm,
                tx_power_dbm=v.snr_db)
        successes = {v.vehicle_id: 0 for v in txs}
        listeners = [r for r in self.vehicles if r.vehicle_id not in tx_ids]
        for r in listeners:
            noisy = waves + np.sqrt(0.5) * (
                self.rng.standard_normal(waves.shape)
                + 1j * self.rng.standard_normal(waves.shape))
            result = phy_rx.receive_subframe(noisy, cfg, ofdm,
                                             (self.network_id, t))
            for blk in result.blocks:
                for v in txs:
                    if (blk.start_subchannel == v.grant.start_subchannel
                            and blk.mcs == v.mcs and blk.crc_pass
                            and np.array_equal(blk.payload,
                                               payloads[v.vehicle_id])):
                        successes[v.vehicle_id] += 1
        for v in txs:
            records.append(TxRecord(
                subframe_idx=t, vehicle_id=v.vehicle_id,
                start_subchannel=v.grant.start_subchannel, width=v.width,
                collided=collided[v.vehicle_id],
                n_receivers=len(self.vehicles) - 1,
                n_success=successes[v.vehicle_id]))
        return records

    def _update_sensing(self, t, txs, tx_ids, collided):
        pool_energy = np.zeros(self.pool.n_subchannels)
        for v in txs:
            pool_energy[list(v.grant.covers())] += 10.0 ** (v.snr_db / 10.0)
        for r in self.vehicles:
            own = np.zeros(self.pool.n_subchannels)
            if r.vehicle_id in tx_ids:
                g = next(v.grant for v in txs if v.vehicle_id == r.vehicle_id)
                own[list(g.covers())] += 10.0 ** (r.snr_db / 10.0)
            r.history.record(t, pool_energy - own)
        # reservations from decodable, non-collided SCIs
        for v in txs:
            if collided[v.vehicle_id] or not self._decodable(v):
                continue
            future = t + v.grant.period_ms
            for r in self.vehicles:
                if r.vehicle_id == v.vehicle_id or r.vehicle_id in tx_ids:
                    continue  # half-duplex: transmitting vehicles miss SCIs
                r.history.mark_reserved(future, v.grant.start_subchannel,
                                        v.width)


def step_network(network: SpsNetwork, n_subframes: int = 1):
    """Convenience wrapper: advance the network and return its log."""
    return network.run(n_subframes)
