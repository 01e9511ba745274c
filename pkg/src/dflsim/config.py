"""Config file handling: INI-style sections with strict key validation.

Unknown sections or keys are hard errors so a typo cannot silently fall
back to a default mid-sweep.  Every output artifact embeds the resolved
key/value pairs, which is what makes runs bit-reproducible.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, fields
from typing import Any


class ConfigError(ValueError):
    """Malformed configuration (unknown key, bad value, missing input)."""


@dataclass
class TopologyConfig:
    n_devices: int = 10
    rho: float = 0.5
    kappa: float = 1.0
    topology_seed: int = 1
    coords: str = ""  # optional "x1,y1; x2,y2; ..." override


@dataclass
class ChannelConfig:
    fc_mhz: float = 2500.0
    bandwidth_hz: float = 30e6
    tx_power_dbm: float = 20.0
    noise_psd_dbm_hz: float = -174.0
    modulation: str = "bpsk"
    model_dim: int = 1_210_000
    n_packets: int = 1600
    elems_per_packet: int = 0  # 0 -> derive from n_packets
    path_loss_units: str = "mhz"


@dataclass
class AnalysisConfig:
    mode: str = "unaware"
    j_cap: int = 30
    mu: float = 0.0016
    lipschitz: float = 2.0
    p_max: float = 0.1


@dataclass
class TrainingConfig:
    eta: float = 0.03
    local_iters: int = 5
    local_aggs: str = "5"  # integer or "auto"
    rounds: int = 200
    batch_size: int = 20
    lambda_reg: float = 1e-3
    algorithm: str = "dfl_unaware"
    center_device: int = 4  # 1-based, as in the coordinate table
    master_seed: int = 1
    data_seed: int = 7
    elems_per_packet: int = 40  # desk-model packet granularity
    cfl_lossless_downlink: bool = False


@dataclass
class VerifyConfig:
    replications: int = 10_000
    n_instances: int = 3
    seed: int = 2024


@dataclass
class Config:
    topology: TopologyConfig
    channel: ChannelConfig
    analysis: AnalysisConfig
    training: TrainingConfig
    verify: VerifyConfig

    def resolved_items(self) -> list[tuple[str, str]]:
        """Flat (section.key, value) pairs in declaration order."""
        out: list[tuple[str, str]] = []
        for section in fields(self):
            block = getattr(self, section.name)
            for f in fields(block):
                out.append((f"{section.name}.{f.name}",
                            str(getattr(block, f.name))))
        return out


_SECTIONS = {
    "topology": TopologyConfig,
    "channel": ChannelConfig,
    "analysis": AnalysisConfig,
    "training": TrainingConfig,
    "verify": VerifyConfig,
}


def _coerce(raw: str, target: Any, section: str, key: str) -> Any:
    try:
        if target is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if target is int:
            return int(raw)
        if target is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(
            f"[{section}] {key}: cannot parse {raw!r} as {target.__name__}"
        ) from exc


def default_config() -> Config:
    return Config(TopologyConfig(), ChannelConfig(), AnalysisConfig(),
                  TrainingConfig(), VerifyConfig())


def load_config(path: str | None) -> Config:
    """Parse an INI file into the typed config, defaults for absent keys."""
    cfg = default_config()
    if path is None:
        return cfg
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path!r}")
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        block = getattr(cfg, section)
        known = {f.name: f.type for f in fields(block)}
        types = {f.name: type(getattr(block, f.name)) for f in fields(block)}
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            setattr(block, key, _coerce(raw, types[key], section, key))
    _validate(cfg)
    return cfg


def _validate(cfg: Config) -> None:
    t = cfg.topology
    if t.n_devices < 1:
        raise ConfigError("topology.n_devices must be >= 1")
    if not 0.0 < t.rho <= 1.0:
        raise ConfigError("topology.rho must be in (0, 1]")
    if t.kappa <= 0:
        raise ConfigError("topology.kappa must be positive")
    if cfg.analysis.mode not in ("unaware", "aware"):
        raise ConfigError("analysis.mode must be 'unaware' or 'aware'")
    if cfg.analysis.j_cap < 1:
        raise ConfigError("analysis.j_cap must be >= 1")
    tr = cfg.training
    if tr.algorithm not in ("dfl_unaware", "dfl_aware", "cfl", "udfl"):
        raise ConfigError(f"unknown training.algorithm {tr.algorithm!r}")
    if tr.local_aggs != "auto":
        try:
            j = int(tr.local_aggs)
        except ValueError as exc:
            raise ConfigError(
                "training.local_aggs must be an integer or 'auto'") from exc
        if j < 1:
            raise ConfigError("training.local_aggs must be >= 1")
    if tr.rounds < 1:
        raise ConfigError("training.rounds must be >= 1")
    if cfg.channel.path_loss_units not in ("mhz", "ghz"):
        raise ConfigError("channel.path_loss_units must be 'mhz' or 'ghz'")


def parse_coords(raw: str) -> list[tuple[float, float]]:
    """Parse the optional 'x1,y1; x2,y2; ...' coordinate override."""
    pts: list[tuple[float, float]] = []
    for chunk in raw.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = chunk.split(",")
        if len(parts) != 2:
            raise ConfigError(f"bad coordinate entry {chunk!r}")
        try:
            pts.append((float(parts[0]), float(parts[1])))
        except ValueError as exc:
            raise ConfigError(f"bad coordinate entry {chunk!r}") from exc
    return pts
