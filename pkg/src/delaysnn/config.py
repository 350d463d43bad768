"""Flat ``key = value`` run configuration.

One file covers the network, the training plan, the sparsity plan and the
analysis options. Unknown keys are rejected; every key has a default.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .dcls import SigmaSchedule
from .errors import ConfigError
from .neuron import LifParams
from .rewire import SparsityPlan


@dataclass
class RunConfig:
    # network
    n_in: int = 40
    n_hidden: int = 256
    n_out: int = 20
    t_steps: int = 80
    dropout_p: float = 0.4
    l1_strength: float = 0.1
    readout: str = "mean"
    dtype: str = "float32"
    seed: int = 0
    # neuron
    tau: float = 10.05
    threshold: float = 1.0
    surrogate_scale: float = 1.0
    # delays
    t_d_max: int = 25
    sigma_start: float = 12.5
    sigma_final: float = 0.5
    sigma_knee: float = 0.75
    learn_delays: bool = True
    round_delays: bool = False
    # structure
    sparsity_mode: str = "dense"
    sparsity_p: float = 0.0
    rewire_cadence: int = 1
    rigl_flip_sign: bool = False
    dale: bool = False
    # training plan
    epochs: int = 100
    batch_size: int = 64
    lr_w_peak: float = 5e-3
    lr_w_warmup: float = 0.3
    lr_d_initial: float = 0.1
    test_fraction: float = 0.2
    # analysis
    moran_row_standardize: bool = False

    def __post_init__(self):
        for name in ("n_in", "n_hidden", "n_out", "t_steps", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.l1_strength < 0:
            raise ConfigError("l1_strength must be >= 0")
        if self.readout not in ("mean", "max"):
            raise ConfigError(f"readout must be 'mean' or 'max', got {self.readout!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.t_d_max < 1:
            raise ConfigError("t_d_max must be >= 1")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if not 0.0 <= self.lr_w_warmup <= 1.0:
            raise ConfigError("lr_w_warmup must lie in [0, 1]")
        if self.lr_w_peak < 0 or self.lr_d_initial < 0:
            raise ConfigError("learning rates must be >= 0")
        # constructing these validates their own invariants
        self.lif, self.sigma_schedule, self.sparsity

    @property
    def lif(self) -> LifParams:
        return LifParams(tau=self.tau, theta=self.threshold, surrogate_scale=self.surrogate_scale)

    @property
    def sigma_schedule(self) -> SigmaSchedule:
        return SigmaSchedule(start=self.sigma_start, final=self.sigma_final, knee=self.sigma_knee)

    @property
    def sparsity(self) -> SparsityPlan:
        return SparsityPlan(p=self.sparsity_p, mode=self.sparsity_mode,
                            cadence=self.rewire_cadence, rigl_flip_sign=self.rigl_flip_sign)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        values = parse_key_values(text, source)
        return cls.from_mapping(values, source)

    @classmethod
    def from_mapping(cls, values: dict, source: str = "<config>") -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"{source}: unknown config key {key!r}")
            kwargs[key] = _coerce(raw, types[key], key, source)
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        return cls.from_text(text, str(path))

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


def parse_key_values(text: str, source: str = "<text>") -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(raw, typ, key, source):
    if not isinstance(raw, str):
        return raw
    try:
        if typ in ("bool", bool):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if typ in ("int", int):
            return int(raw)
        if typ in ("float", float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{source}: bad value {raw!r} for key {key!r}") from None
    return raw
