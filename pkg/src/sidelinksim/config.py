"""Experiment configuration: flat dotted-key text files and manifests.

The on-disk format is diff-friendly `section.field = value` lines; the
same serialization doubles as the run manifest, so any run can be
reproduced from its manifest alone.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, replace

from . import __version__
from .channel import ChannelConfig, ImpairmentConfig, PowerCalibration
from .grid import Allocation, GridConfig
from .link import LinkConfig
from .mac_sps import PoolConfig
from .phy_tx import OfdmConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SweepConfig:
    tx_power_dbm: tuple = tuple(float(p) for p in range(-20, -5, 2))
    mcs: tuple = (0, 5, 10, 15)
    trials: int = 100
    window_blocks: int = 1000
    master_seed: int = 1

    def __post_init__(self):
        if not self.tx_power_dbm or not self.mcs:
            raise ConfigError("sweep axes must be non-empty")
        if self.trials < 1 or self.window_blocks < 1:
            raise ConfigError("trials and window_blocks must be >= 1")


@dataclass(frozen=True)
class ThroughputConfig:
    tx_power_dbm: float = -8.0
    mcs: tuple = tuple(range(0, 29))
    blocks: int = 200


@dataclass(frozen=True)
class SpsScenarioConfig:
    n_vehicles: int = 20
    duration_ms: int = 10000
    policies: tuple = ("random", "sensing")
    snr_db: float = 20.0
    mcs: int = 5
    width: int = 1
    seed: int = 1
    mode: str = "abstract"


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "default"
    grid: GridConfig = GridConfig(n_subchannels=6)
    ofdm: OfdmConfig = OfdmConfig()
    channel: ChannelConfig = ChannelConfig()
    impairments: ImpairmentConfig = ImpairmentConfig()
    calibration: PowerCalibration = PowerCalibration()
    alloc: Allocation = Allocation(0, 6)
    pool: PoolConfig = PoolConfig()
    sweep: SweepConfig = SweepConfig()
    throughput: ThroughputConfig = ThroughputConfig()
    sps: SpsScenarioConfig = SpsScenarioConfig()

    def link_config(self) -> LinkConfig:
        return LinkConfig(grid=self.grid, ofdm=self.ofdm, channel=self.channel,
                          impairments=self.impairments,
                          calibration=self.calibration, alloc=self.alloc)


_SECTIONS = ("grid", "ofdm", "channel", "impairments", "calibration",
             "alloc", "pool", "sweep", "throughput", "sps")


def default_config() -> ExperimentConfig:
    """Reference configuration: 6 sub-channels (288 subcarriers), the
    -20..-6 dBm power sweep and MCS levels 0/5/10/15, AWGN channel."""
    return ExperimentConfig()


def indoor_v2v_config() -> ExperimentConfig:
    """Fading preset: 3-tap Rayleigh, 60 Hz Doppler, 300 Hz CFO."""
    base = default_config()
    return replace(
        base, name="indoor-v2v",
        channel=ChannelConfig(model="rayleigh_tdl", doppler_hz=60.0,
                              taps=((0, 0.7), (4, 0.2), (9, 0.1)), seed=0),
        impairments=ImpairmentConfig(cfo_hz=300.0),
    )


# ---------------------------------------------------------------------------
# flat-key codec
# ---------------------------------------------------------------------------


def _encode(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (int, str)):
        return str(value)
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):  # channel taps
            return ",".join(f"{int(d)}:{repr(float(p))}" for d, p in value)
        return ",".join(_encode(v) for v in value)
    raise ConfigError(f"cannot encode {value!r}")


def _decode_like(template, text: str):
    """Parse ``text`` into the same type as ``template``."""
    text = text.strip()
    if isinstance(template, bool):
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {text!r}")
    if isinstance(template, int):
        return int(text)
    if isinstance(template, float):
        return float(text)
    if isinstance(template, str):
        return text
    if isinstance(template, tuple):
        if text == "":
            return ()
        items = [t.strip() for t in text.split(",")]
        if template and isinstance(template[0], tuple):  # taps "d:p,d:p"
            out = []
            for item in items:
                d, _, p = item.partition(":")
                out.append((int(d), float(p)))
            return tuple(out)
        elem = template[0] if template else 0.0
        return tuple(_decode_like(elem, t) for t in items)
    raise ConfigError(f"cannot decode into {type(template)}")


def dump_config(cfg: ExperimentConfig) -> str:
    """Canonical flat serialization, one sorted `key = value` per line."""
    lines = [f"name = {cfg.name}"]
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            lines.append(f"{section}.{f.name} = {_encode(getattr(obj, f.name))}")
    return "\n".join(sorted(lines)) + "\n"


def _apply_items(cfg: ExperimentConfig, items) -> ExperimentConfig:
    """Apply (key, value-text) pairs.

    Updates are grouped per section and each section is rebuilt once, so
    jointly valid values (say fft_size and cp_len together) can be set in
    any order.
    """
    per_section = {}
    for key, text in items:
        if key == "name":
            cfg = replace(cfg, name=text.strip())
            continue
        section, _, fieldname = key.partition(".")
        if section not in _SECTIONS or not fieldname:
            raise ConfigError(f"unknown config key {key!r}")
        obj = getattr(cfg, section)
        names = {f.name for f in dataclasses.fields(obj)}
        if fieldname not in names:
            raise ConfigError(f"unknown config key {key!r}")
        template = getattr(obj, fieldname)
        try:
            value = _decode_like(template, text)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: {exc}") from exc
        per_section.setdefault(section, {})[fieldname] = value
    for section, updates in per_section.items():
        try:
            cfg = replace(cfg, **{section: replace(getattr(cfg, section),
                                                   **updates)})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{section}: {exc}") from exc
    return cfg


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = base if base is not None else default_config()
    items = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, eq, value = line.partition("=")
        if not eq:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        items.append((key.strip(), value))
    return _apply_items(cfg, items)


def load_config(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read(), base=base)


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    """Apply repeated --set key=value flags."""
    items = []
    for item in overrides or ():
        key, eq, value = item.partition("=")
        if not eq:
            raise ConfigError(f"override {item!r} is not key=value")
        items.append((key.strip(), value))
    return _apply_items(cfg, items)


def manifest_text(cfg: ExperimentConfig, seed: int | None = None) -> str:
    """Config snapshot plus code version; sufficient to reproduce a run."""
    head = [f"# sidelink-sim {__version__} run manifest"]
    if seed is not None:
        head.append(f"# effective master_seed = {seed}")
    return "\n".join(head) + "\n" + dump_config(cfg)
