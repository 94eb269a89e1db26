"""Run configuration: defaults, flat ``key = value`` files and flag overrides."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


def _spec(lo=None, hi=None, lo_open=False, hi_open=False, choices=None, help=""):
    return {"lo": lo, "hi": hi, "lo_open": lo_open, "hi_open": hi_open, "choices": choices, "help": help}


@dataclass
class RunConfig:
    # defaults: PeMSD4 settings, Adam lr 0.001, batch 64, 200 epochs
    P: int = field(default=12, metadata=_spec(2, 10_000, help="input steps"))
    Q: int = field(default=12, metadata=_spec(1, 10_000, help="predicted steps"))
    d: int = field(default=64, metadata=_spec(1, 4096, help="hidden width"))
    K: int = field(default=3, metadata=_spec(2, 64, help="kernel size"))
    delta_pdf: float = field(default=0.5, metadata=_spec(0.0, 1.0, help="pre-defined graph threshold"))
    delta_adt: float = field(default=0.5, metadata=_spec(-1e6, 1e6, help="adaptive graph threshold"))
    beta: float = field(default=1.0, metadata=_spec(0.0, 1e6, help="MAPE weight in the loss"))
    lr: float = field(default=0.001, metadata=_spec(0.0, 10.0, lo_open=True, help="Adam learning rate"))
    batch_size: int = field(default=64, metadata=_spec(1, 1_000_000))
    epochs: int = field(default=200, metadata=_spec(0, 1_000_000))
    seed: int = field(default=0, metadata=_spec(0, 2**32 - 1))
    precision: str = field(default="f64", metadata=_spec(choices=("f32", "f64")))
    train_frac: float = field(default=0.6, metadata=_spec(0.0, 1.0, lo_open=True, hi_open=True))
    val_frac: float = field(default=0.2, metadata=_spec(0.0, 1.0, lo_open=True, hi_open=True))
    test_frac: float = field(default=0.2, metadata=_spec(0.0, 1.0, lo_open=True, hi_open=True))
    sigma: float = field(default=0.0, metadata=_spec(0.0, 1e12, help="distance std override, 0 = from data"))
    clip_norm: float = field(default=0.0, metadata=_spec(0.0, 1e12, help="global grad-norm clip, 0 = off"))
    target_channel: int = field(default=0, metadata=_spec(0, 1_000_000))
    strict: bool = field(default=False, metadata=_spec())
    data: str = field(default="", metadata=_spec())
    distances: str = field(default="", metadata=_spec())
    out: str = field(default="", metadata=_spec())

    def validate(self) -> "RunConfig":
        for f in fields(self):
            _check(f.name, getattr(self, f.name), f.metadata)
        total = self.train_frac + self.val_frac + self.test_frac
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"train_frac + val_frac + test_frac must equal 1, got {total}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


FIELDS = {f.name: f for f in fields(RunConfig)}


def _describe(meta) -> str:
    if meta["choices"]:
        return "one of " + ", ".join(meta["choices"])
    lo = ("(" if meta["lo_open"] else "[") + str(meta["lo"])
    hi = str(meta["hi"]) + (")" if meta["hi_open"] else "]")
    return f"{lo}, {hi}"


def _check(name, value, meta) -> None:
    if meta["choices"]:
        if value not in meta["choices"]:
            raise ConfigError(f"{name} = {value!r} is invalid; legal values: {_describe(meta)}")
        return
    if meta["lo"] is None:
        return
    if isinstance(value, float) and not math.isfinite(value):
        raise ConfigError(f"{name} = {value} is not finite; legal range {_describe(meta)}")
    low_bad = value <= meta["lo"] if meta["lo_open"] else value < meta["lo"]
    high_bad = value >= meta["hi"] if meta["hi_open"] else value > meta["hi"]
    if low_bad or high_bad:
        raise ConfigError(f"{name} = {value} is out of range; legal range {_describe(meta)}")


def coerce(name: str, raw) -> object:
    if name not in FIELDS:
        raise ConfigError(f"unknown config key {name!r}")
    kind = FIELDS[name].type
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
    except ValueError:
        raise ConfigError(f"{name} = {text!r} is not a valid {kind}") from None
    return text


def read_config_file(path) -> dict:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in FIELDS:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = coerce(key, value)
    return values


def parse_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file (if any), then non-None ``overrides``."""
    values = read_config_file(path) if path else {}
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = coerce(key, value)
    unknown = set(values) - set(FIELDS)
    if unknown:
        raise ConfigError(f"unknown config key {sorted(unknown)[0]!r}")
    return RunConfig(**values).validate()
