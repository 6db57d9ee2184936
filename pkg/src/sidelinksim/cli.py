"""Command-line experiment runner.

Subcommands: bler-sweep, throughput-sweep, sps-sim, backoff, selftest,
traffic.  Every run writes CSV outputs plus a manifest (config snapshot +
seed + code version) that reproduces it byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, coding, evaluator, grid as grid_mod, link, mac_sps
from .config import (ConfigError, ExperimentConfig, apply_overrides,
                     default_config, load_config, manifest_text)


def _fmt(x) -> str:
    if isinstance(x, float):
        return f"{x:.10g}"
    return str(x)


def _write_csv(path: Path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _load(args) -> ExperimentConfig:
    cfg = default_config()
    if args.config:
        cfg = load_config(args.config, base=cfg)
    cfg = apply_overrides(cfg, args.set or [])
    if args.seed is not None:
        cfg = replace(cfg, sweep=replace(cfg.sweep, master_seed=args.seed))
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, cfg: ExperimentConfig):
    (out / "manifest.txt").write_text(manifest_text(cfg, cfg.sweep.master_seed),
                                      encoding="utf-8")


def cmd_bler_sweep(args) -> int:
    cfg = _load(args)
    out = _out_dir(args)
    res = evaluator.run_bler_sweep(
        cfg.link_config(), cfg.sweep.tx_power_dbm, cfg.sweep.mcs,
        cfg.sweep.trials, cfg.sweep.window_blocks, cfg.sweep.master_seed,
        workers=args.workers)
    _write_csv(out / "sweep_stats.csv",
               ["tx_power_dbm", "mcs", "n_samples", "bler_mean", "bler_std",
                "bler_q99"],
               [(r.tx_power_dbm, r.mcs, r.n_samples, r.bler_mean, r.bler_std,
                 r.bler_q99) for r in res.stats_rows])
    _write_csv(out / "sweep_raw.csv",
               ["trial", "tx_power_dbm", "mcs", "window_idx", "n_blocks",
                "n_errors"],
               [(r.trial, r.tx_power_dbm, r.mcs, r.window_idx, r.n_blocks,
                 r.n_errors) for r in res.raw_rows])
    _write_manifest(out, cfg)
    print(f"wrote {out/'sweep_stats.csv'} ({len(res.stats_rows)} rows)")
    return 0


def cmd_throughput_sweep(args) -> int:
    cfg = _load(args)
    out = _out_dir(args)
    rows = evaluator.run_throughput_sweep(
        cfg.link_config(), cfg.throughput.mcs, cfg.throughput.tx_power_dbm,
        cfg.throughput.blocks, cfg.sweep.master_seed)
    _write_csv(out / "throughput.csv",
               ["mcs", "tbs_bits", "bler_mean", "throughput_bps"],
               [(r.mcs, r.tbs, r.bler_mean, r.throughput_bps) for r in rows])
    _write_manifest(out, cfg)
    print(f"wrote {out/'throughput.csv'} ({len(rows)} rows)")
    return 0


def cmd_sps_sim(args) -> int:
    cfg = _load(args)
    out = _out_dir(args)
    sps = cfg.sps
    thresholds = {sps.mcs: link.calibrate_snr_threshold(
        cfg.link_config(), sps.mcs, seed=cfg.sweep.master_seed)}
    period_slots = cfg.pool.selection_period_ms * cfg.pool.n_subchannels
    load = sps.n_vehicles * sps.width / period_slots
    rows = []
    for policy in sps.policies:
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=sps.seed,
                                   spawn_key=(mac_sps.POLICIES.index(policy),)))
        vehicles = [mac_sps.Vehicle(vehicle_id=i, policy=policy, mcs=sps.mcs,
                                    snr_db=sps.snr_db, width=sps.width)
                    for i in range(sps.n_vehicles)]
        net = mac_sps.SpsNetwork(cfg.pool, vehicles, thresholds, rng,
                                 mode=sps.mode)
        log = net.run(sps.duration_ms)
        rows.append((policy, load, mac_sps.collision_rate(log),
                     mac_sps.packet_reception_ratio(log)))
    _write_csv(out / "sps.csv", ["policy", "load", "collision_rate", "prr"],
               rows)
    _write_manifest(out, cfg)
    for policy, ld, cr, prr in rows:
        print(f"{policy}: load {ld:.2f} collision_rate {cr:.4f} prr {prr:.4f}")
    return 0


def cmd_backoff(args) -> int:
    cfg = _load(args)
    out = _out_dir(args)
    stats_path = Path(args.input)
    if not stats_path.exists():
        print(f"error: no such sweep output {stats_path}", file=sys.stderr)
        return 1
    by_mcs = {}
    with open(stats_path, encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            m = int(row["mcs"])
            by_mcs.setdefault(m, []).append(
                (float(row["tx_power_dbm"]), float(row["bler_mean"]),
                 float(row["bler_q99"])))
    rows = []
    for m, pts in sorted(by_mcs.items()):
        pts.sort()
        mean_curve = [(p, bm) for p, bm, _ in pts]
        q99_curve = [(p, bq) for p, _, bq in pts]
        try:
            b = evaluator.backoff_db(mean_curve, q99_curve, args.target_bler)
            rows.append((m, args.target_bler, b))
        except evaluator.CurveCrossingError as exc:
            print(f"mcs {m}: {exc}", file=sys.stderr)
    _write_csv(out / "backoff.csv", ["mcs", "target_bler", "backoff_db"], rows)
    print(f"wrote {out/'backoff.csv'} ({len(rows)} rows)")
    return 0 if rows else 1


def cmd_selftest(args) -> int:
    cfg = _load(args)
    ideal = replace(cfg.link_config(),
                    channel=replace(cfg.channel, model="ideal"),
                    impairments=replace(cfg.impairments, cfo_enabled=False,
                                        timing_enabled=False))
    failures = 0
    for width in (1, cfg.grid.n_subchannels):
        alloc = grid_mod.Allocation(0, width)
        lk = replace(ideal, alloc=alloc)
        for mcs in range(0, coding.MAX_MCS + 1):
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=0, spawn_key=(width, mcs)))
            res = link.run_link_window(lk, mcs, 0.0, 3, rng)
            ok = bool(np.all(res.crc_pass) and np.all(res.payload_exact))
            status = "PASS" if ok else "FAIL"
            if not ok:
                failures += 1
            print(f"{status} loopback mcs={mcs:2d} width={width}")
    print(f"selftest: {failures} failures")
    return 0 if failures == 0 else 1


def cmd_traffic(args) -> int:
    from .traffic import PacketLink, run_adapter, serve_tcp
    cfg = _load(args)
    pl = PacketLink(cfg.link_config(), mcs=cfg.sps.mcs,
                    tx_power_dbm=cfg.throughput.tx_power_dbm,
                    seed=cfg.sweep.master_seed)
    spec = args.traffic
    if spec == "stdio":
        run_adapter(sys.stdin, sys.stdout, pl)
        return 0
    if spec.startswith("tcp:"):
        serve_tcp(int(spec.split(":", 1)[1]), pl)
        return 0
    print(f"error: bad --traffic {spec!r}", file=sys.stderr)
    return 2


def _add_common(p):
    p.add_argument("--config", help="config file (flat key = value lines)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--seed", type=int, help="override sweep.master_seed")
    p.add_argument("--out-dir", default="out", help="output directory")
    p.add_argument("--workers", type=int, default=1,
                   help="parallel workers for sweep cells")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="sidelink-sim",
        description="Link-level LTE-V sidelink simulator")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bler-sweep", help="BLER vs transmit power sweep")
    _add_common(p)
    p.set_defaults(fn=cmd_bler_sweep)

    p = sub.add_parser("throughput-sweep", help="throughput vs MCS sweep")
    _add_common(p)
    p.set_defaults(fn=cmd_throughput_sweep)

    p = sub.add_parser("sps-sim", help="multi-vehicle scheduling scenarios")
    _add_common(p)
    p.set_defaults(fn=cmd_sps_sim)

    p = sub.add_parser("backoff", help="mean-vs-q99 back-off from sweep output")
    _add_common(p)
    p.add_argument("--input", required=True, help="sweep_stats.csv path")
    p.add_argument("--target-bler", type=float, default=1e-2)
    p.set_defaults(fn=cmd_backoff)

    p = sub.add_parser("selftest", help="ideal-channel loopback suite")
    _add_common(p)
    p.set_defaults(fn=cmd_selftest)

    p = sub.add_parser("traffic", help="serve the PKT/RES traffic adapter")
    _add_common(p)
    p.add_argument("--traffic", default="stdio", metavar="stdio|tcp:<port>")
    p.set_defaults(fn=cmd_traffic)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
