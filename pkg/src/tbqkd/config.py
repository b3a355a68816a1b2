"""Run configuration: one text document of ``section.key = value`` lines.

Blank lines and ``#`` comments are ignored.  Each section maps onto a config
dataclass; keys must name one of its fields and values are parsed according
to the field's declared type.  Unknown sections or keys are errors.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .channel import ChannelConfig, DriftMode, PolarizationDriftConfig
from .distill.pipeline import CodeConfig, KeyRateConfig
from .receiver import DecoderConfig, DetectorConfig
from .source import SourceConfig
from .timing import CoincidenceConfig

FORMAT_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class SimulationConfig:
    duration: float = 600.0  # s
    seed: int = 0
    time_of_flight: int = 4_000_000  # ps
    blocked: str = ""  # "start-end" intervals in s, comma separated
    r0_relative_std: float = 0.254
    r0_corr_time: float = 5.0  # s
    frame_rate: float = 20.0  # Hz
    tomography_rate: float = 1e5  # counts/s per basis pair
    tx_window: int = 200_000  # ps kept around detections in large transmitter logs
    tx_full_limit: int = 2_000_000  # pulses; larger runs write a windowed log

    def blocked_intervals(self) -> list[tuple[float, float]]:
        out = []
        for part in filter(None, (p.strip() for p in self.blocked.split(","))):
            a, _, b = part.partition("-")
            try:
                lo, hi = float(a), float(b)
            except ValueError:
                raise ConfigError(f"bad blocked interval {part!r}") from None
            if hi <= lo:
                raise ConfigError(f"empty blocked interval {part!r}")
            out.append((lo, hi))
        return out


@dataclass
class SessionConfig:
    endpoint: str = "127.0.0.1:5151"
    timeout: float = 30.0  # s per phase
    tag_seed: int = 11
    pa_seed: int = 13

    def host_port(self) -> tuple[str, int]:
        host, _, port = self.endpoint.rpartition(":")
        if not host or not port.isdigit():
            raise ConfigError(f"endpoint {self.endpoint!r} is not host:port")
        return host, int(port)


SECTIONS = {
    "source": SourceConfig,
    "channel": ChannelConfig,
    "decoder": DecoderConfig,
    "detector": DetectorConfig,
    "drift": PolarizationDriftConfig,
    "coincidence": CoincidenceConfig,
    "decoy": KeyRateConfig,
    "codes": CodeConfig,
    "session": SessionConfig,
    "simulation": SimulationConfig,
}


@dataclass
class RunConfig:
    source: SourceConfig = field(default_factory=SourceConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    drift: PolarizationDriftConfig = field(default_factory=PolarizationDriftConfig)
    coincidence: CoincidenceConfig = field(default_factory=CoincidenceConfig)
    decoy: KeyRateConfig = field(default_factory=KeyRateConfig)
    codes: CodeConfig = field(default_factory=CodeConfig)
    session: SessionConfig = field(default_factory=SessionConfig)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)

    def echo(self) -> str:
        """Canonical text form; parsing it gives back an equal config."""
        lines = [f"# format_version = {FORMAT_VERSION}"]
        for name in SECTIONS:
            sec = getattr(self, name)
            for f in dataclasses.fields(sec):
                lines.append(f"{name}.{f.name} = {_format(getattr(sec, f.name))}")
        return "\n".join(lines) + "\n"


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, DriftMode):
        return v.value
    if isinstance(v, (tuple, list)):
        return ", ".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_bool(s: str) -> bool:
    s = s.lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_value(raw: str, tp):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or (origin is not None and type(None) in args):
        inner = [a for a in args if a is not type(None)]
        if raw.lower() == "none":
            return None
        return _parse_value(raw, inner[0])
    if origin is tuple:
        parts = [p.strip() for p in raw.split(",")]
        if len(parts) != len(args):
            raise ValueError(f"expected {len(args)} comma-separated values")
        return tuple(_parse_value(p, a) for p, a in zip(parts, args))
    if tp is bool:
        return _parse_bool(raw)
    if tp is int:
        f = float(raw)
        if f != int(f):
            raise ValueError(f"not an integer: {raw!r}")
        return int(f)
    if tp is float:
        return float(raw)
    if tp is str:
        return raw
    if isinstance(tp, type) and issubclass(tp, DriftMode):
        return DriftMode(raw)
    raise ValueError(f"unsupported type {tp}")


def parse_config(text: str) -> RunConfig:
    values: dict[str, dict[str, object]] = {name: {} for name in SECTIONS}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        section, dot, name = key.strip().partition(".")
        if not dot or section not in SECTIONS:
            raise ConfigError(f"line {lineno}: unknown section in {key.strip()!r}")
        cls = SECTIONS[section]
        hints = typing.get_type_hints(cls)
        if name not in hints or name.startswith("_"):
            raise ConfigError(f"line {lineno}: unknown key {key.strip()!r}")
        try:
            values[section][name] = _parse_value(raw.strip(), hints[name])
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: {key.strip()}: {exc}") from None
    try:
        return RunConfig(**{s: SECTIONS[s](**kw) for s, kw in values.items()})
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())
