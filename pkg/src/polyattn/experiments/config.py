"""Experiment configuration and its flat ``key=value`` text form."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from ..activations import ActivationSpec

TASKS = ("majority", "copy-first-token", "sparse-key-lookup")
OPTIMIZERS = ("sgd", "adam")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "majority"
    N: int = 16
    vocab: int = 8
    depth: int = 2
    heads: int = 2
    D: int = 32
    d: int = 16
    M: int = 16
    activation: str = "softmax"
    optimizer: str = "adam"
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    steps: int = 2000
    batch: int = 32
    seed: int = 0
    trace_interval: int = 50
    eval_size: int = 1024
    positional: bool = False
    norm: str = "pre"
    out_dir: str = "out"

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}; expected one of {OPTIMIZERS}")
        for name in ("N", "vocab", "depth", "heads", "D", "d", "M", "steps", "batch", "trace_interval", "eval_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.norm not in ("none", "pre"):
            raise ConfigError(f"norm must be 'none' or 'pre', got {self.norm!r}")
        if self.N < 2 or self.vocab < 2:
            raise ConfigError("N and vocab must be at least 2")
        if self.task == "sparse-key-lookup" and self.vocab < 3:
            raise ConfigError("sparse-key-lookup needs vocab >= 3 (one token is the marker)")
        if not self.lr > 0 or self.weight_decay < 0:
            raise ConfigError("lr must be positive and weight_decay nonnegative")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f"betas must be two values in [0, 1), got {self.betas}")
        if self.seed < 0 or self.seed >= 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        try:
            ActivationSpec.parse(self.activation)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def activation_spec(self) -> ActivationSpec:
        return ActivationSpec.parse(self.activation)

    @property
    def n_classes(self) -> int:
        return self.vocab - 1 if self.task == "sparse-key-lookup" else self.vocab

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def render(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(float(x)) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    def to_strings(self) -> dict[str, str]:
        return _pairs(self.render())

    def override(self, values: dict[str, str]) -> "ExperimentConfig":
        """New config with the given keys replaced, values in text form."""
        return self.from_strings({**self.to_strings(), **values})

    @classmethod
    def parse(cls, text: str) -> "ExperimentConfig":
        return cls.from_strings(_pairs(text))

    @classmethod
    def from_strings(cls, values: dict[str, str]) -> "ExperimentConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, val in values.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _convert(key, types[key], val)
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.parse(fh.read())


def _pairs(text: str) -> dict[str, str]:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key = key.strip()
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = val.strip()
    return values


def _convert(key: str, typ: str, val: str):
    try:
        if typ == "int":
            return int(val)
        if typ == "float":
            return float(val)
        if typ == "bool":
            if val.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(val)
            return val.lower() in ("true", "1", "yes")
        if typ.startswith("tuple"):
            return tuple(float(x) for x in val.split(","))
    except ValueError:
        raise ConfigError(f"bad value for {key}: {val!r}") from None
    return val
