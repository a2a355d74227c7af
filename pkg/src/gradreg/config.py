"""Run configuration: an INI file with one section per component, plus overrides."""

from __future__ import annotations

import configparser
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .losses import LossWeights
from .network import NetConfig
from .synth import SynthSpec
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Bad or unknown configuration key; carries the offending ``section.key``."""

    def __init__(self, key: str, msg: str):
        super().__init__(f"{key}: {msg}")
        self.key = key


@dataclass
class RegisterOptions:
    patching: str = "auto"
    patch_size: tuple | None = None
    stride: tuple | None = None
    slice_axis: int = 0
    slices: bool = True


SECTIONS = {
    "synth": SynthSpec,
    "net": NetConfig,
    "loss": LossWeights,
    "train": TrainConfig,
    "register": RegisterOptions,
}
# nested dataclasses live in their own sections
_SKIP = {"train": {"net", "weights"}}


def _fields(section: str) -> dict:
    return {f.name: f for f in dataclasses.fields(SECTIONS[section]) if f.name not in _SKIP.get(section, ())}


def _default(f):
    if f.default is not dataclasses.MISSING:
        return f.default
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    return None


def _coerce(key: str, raw: str, f):
    """Parse ``raw`` to the type of field ``f``: bool, int, float, tuple or str."""
    raw = raw.strip()
    default = _default(f)
    kind = str(f.type)
    try:
        if raw.lower() in ("", "none") and ("None" in kind or isinstance(default, tuple)):
            return None if "None" in kind else ()
        if isinstance(default, bool):
            b = raw.lower()
            if b in ("1", "true", "yes", "on"):
                return True
            if b in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple) or kind.startswith("tuple"):
            items = [x.strip() for x in raw.strip("()[]").split(",") if x.strip()]
            return tuple(float(x) if any(c in x for c in ".eE") else int(x) for x in items)
        return raw
    except ValueError as exc:
        raise ConfigError(key, str(exc)) from None


@dataclass
class RunConfig:
    synth: SynthSpec = field(default_factory=SynthSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    register: RegisterOptions = field(default_factory=RegisterOptions)

    def to_dict(self) -> dict:
        return {"synth": self.synth.to_dict(), "train": self.train.to_dict(),
                "register": dataclasses.asdict(self.register)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def parse_values(values: dict) -> RunConfig:
    """Build a RunConfig from ``{section: {key: raw string}}``; unknown keys raise ConfigError."""
    parsed = {}
    for section, items in values.items():
        if section not in SECTIONS:
            raise ConfigError(section, "unknown section")
        fields = _fields(section)
        out = {}
        for key, raw in items.items():
            name = f"{section}.{key}"
            if key not in fields:
                raise ConfigError(name, "unknown key")
            out[key] = _coerce(name, raw, fields[key])
        parsed[section] = out
    try:
        net = NetConfig(**parsed.get("net", {}))
        weights = LossWeights(**parsed.get("loss", {}))
        train = TrainConfig(net=net, weights=weights, **parsed.get("train", {}))
        return RunConfig(SynthSpec(**parsed.get("synth", {})), train, RegisterOptions(**parsed.get("register", {})))
    except TypeError as exc:
        raise ConfigError("config", str(exc)) from None


def read_config(path=None, overrides=()) -> RunConfig:
    """Read ``path`` (INI) and apply ``section.key=value`` overrides on top."""
    values: dict = {}
    if path is not None:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        text = Path(path).read_text()
        try:
            cp.read_string(text, source=str(path))
        except configparser.Error as exc:
            raise ConfigError(str(path), str(exc).splitlines()[0]) from None
        for section in cp.sections():
            values[section] = dict(cp.items(section))
    for item in overrides:
        key, sep, raw = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(item, "override must look like section.key=value")
        values.setdefault(section, {})[name] = raw
    return parse_values(values)


def dump_config(cfg: RunConfig) -> str:
    """INI text that reads back to ``cfg``."""
    d = cfg.to_dict()
    sections = {"synth": d["synth"], "net": d["train"]["net"], "loss": d["train"]["weights"],
                "train": {k: v for k, v in d["train"].items() if k not in ("net", "weights")},
                "register": d["register"]}
    lines = []
    for name, items in sections.items():
        lines.append(f"[{name}]")
        for k, v in items.items():
            if isinstance(v, (list, tuple)):
                v = ",".join(str(x) for x in v)
            lines.append(f"{k} = {'none' if v is None else v}")
        lines.append("")
    return "\n".join(lines)
