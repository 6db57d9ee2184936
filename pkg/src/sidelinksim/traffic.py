"""Upper-layer traffic adapter: the wire protocol standing in for an
external network simulator.

Newline-delimited text, request `PKT <time_us> <prio> <len> <hex>`,
response `RES <time_us> <ok|collision|crc_fail>`; malformed input gets an
`ERR <reason>` line and the stream continues.  Transport is stdin/stdout
or a single-connection TCP socket.
"""

from __future__ import annotations

import socketserver
from dataclasses import dataclass

import numpy as np

from . import coding
from .link import LinkConfig, run_link_window

STATUS_OK = "ok"
STATUS_COLLISION = "collision"
STATUS_CRC_FAIL = "crc_fail"


class TrafficProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class TrafficEvent:
    arrival_time_us: int
    priority: int
    payload_len: int
    payload: bytes


def parse_pkt_line(line: str) -> TrafficEvent:
    parts = line.strip().split()
    if len(parts) != 5 or parts[0] != "PKT":
        raise TrafficProtocolError("expected 'PKT <time_us> <prio> <len> <hex>'")
    try:
        t = int(parts[1])
        prio = int(parts[2])
        length = int(parts[3])
        payload = bytes.fromhex(parts[4])
    except ValueError as exc:
        raise TrafficProtocolError(f"bad field: {exc}") from exc
    if t < 0:
        raise TrafficProtocolError("negative timestamp")
    if not 0 <= prio <= 7:
        raise TrafficProtocolError("priority must be 0..7")
    if len(payload) != length:
        raise TrafficProtocolError(
            f"length field {length} != {len(payload)} payload bytes")
    return TrafficEvent(arrival_time_us=t, priority=prio,
                        payload_len=length, payload=payload)


def ingest_traffic(stream, on_error=None):
    """Yield TrafficEvents from a line stream.

    Malformed lines and non-monotone timestamps are reported through
    ``on_error`` (if given) and skipped; the stream keeps going.
    """
    last_t = -1
    for line in stream:
        if not line.strip():
            continue
        try:
            ev = parse_pkt_line(line)
            if ev.arrival_time_us < last_t:
                raise TrafficProtocolError(
                    f"timestamp {ev.arrival_time_us} before {last_t}")
        except TrafficProtocolError as exc:
            if on_error is not None:
                on_error(str(exc))
            continue
        last_t = ev.arrival_time_us
        yield ev


def emit_outcome(event: TrafficEvent, status: str) -> str:
    if status not in (STATUS_OK, STATUS_COLLISION, STATUS_CRC_FAIL):
        raise ValueError(f"unknown status {status!r}")
    return f"RES {event.arrival_time_us} {status}"


def segment_packet(payload: bytes, tbs: int) -> np.ndarray:
    """Split packet bits into zero-padded transport blocks of ``tbs`` bits."""
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8))
    n_blocks = max(1, -(-bits.size // tbs))
    padded = np.zeros(n_blocks * tbs, dtype=np.uint8)
    padded[:bits.size] = bits
    return padded.reshape(n_blocks, tbs)


class PacketLink:
    """Feeds packets through the PHY link block by block.

    Each ingested packet is segmented into transport blocks for the current
    grant/MCS and reported ok only if every block decodes.
    """

    def __init__(self, link_cfg: LinkConfig, mcs: int, tx_power_dbm: float,
                 seed: int = 1):
        from . import grid as grid_mod
        self.link_cfg = link_cfg
        self.mcs = mcs
        self.tx_power_dbm = tx_power_dbm
        n_re = grid_mod.pssch_re_count(link_cfg.grid, link_cfg.alloc)
        self.tbs = coding.tbs_for(coding.mcs_lookup(mcs), n_re)
        self.rng = np.random.default_rng(seed)
        self.next_subframe = 0

    def send(self, event: TrafficEvent) -> str:
        blocks = segment_packet(event.payload, self.tbs)
        res = run_link_window(self.link_cfg, self.mcs, self.tx_power_dbm,
                              blocks.shape[0], self.rng,
                              start_subframe_idx=self.next_subframe,
                              payloads=blocks)
        self.next_subframe += blocks.shape[0]
        return STATUS_OK if bool(np.all(res.crc_pass)) else STATUS_CRC_FAIL


def run_adapter(instream, outstream, packet_link: PacketLink):
    """Serve the PKT/RES protocol over a pair of text streams."""
    def reply(line):
        outstream.write(line + "\n")
        outstream.flush()

    for ev in ingest_traffic(instream, on_error=lambda m: reply(f"ERR {m}")):
        reply(emit_outcome(ev, packet_link.send(ev)))


def serve_tcp(port: int, packet_link: PacketLink):
    """Single-connection TCP transport for the same line protocol."""

    class Handler(socketserver.StreamRequestHandler):
        def handle(self):
            rfile = (line.decode("utf-8", "replace") for line in self.rfile)

            class _W:
                def __init__(self, wfile):
                    self.wfile = wfile

                def write(self, s):
                    self.wfile.write(s.encode("utf-8"))

                def flush(self):
                    self.wfile.flush()

            run_adapter(rfile, _W(self.wfile), packet_link)

    with socketserver.TCPServer(("127.0.0.1", port), Handler) as server:
        server.handle_request()
