"""Training configuration and its TOML form."""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


def read_toml(path) -> dict:
    return tomllib.loads(Path(path).read_text())


@dataclass(frozen=True)
class TrainConfig:
    # dimensions
    N: int = 64
    P: int = 128
    n: int = 32
    T: int = 8
    # neighbour branch
    K: int = 8
    L: int = 2
    tau_deg: int = 3
    # losses
    tau_temp: float = 0.05
    lambda1: float = 1.0
    lambda2: float = 0.5
    # optimisation
    lr: float = 1e-4
    decay_rate: float = 0.9
    step_size: int = 50
    step_unit: str = "epoch"
    batch_size: int = 8
    epochs: int = 20
    seed: int = 0

    def __post_init__(self):
        for name in ("N", "P", "n", "T", "K", "L", "tau_deg", "step_size", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.N % self.T:
            raise ValueError(f"T={self.T} must divide N={self.N}")
        if self.tau_deg > self.K + 1:
            raise ValueError(f"tau_deg={self.tau_deg} exceeds the K+1={self.K + 1} nodes per neighbourhood")
        if not self.tau_temp > 0 or not self.lr > 0 or not 0 < self.decay_rate <= 1:
            raise ValueError("tau_temp and lr must be positive and decay_rate in (0, 1]")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")
        if self.step_unit not in ("epoch", "iteration"):
            raise ValueError(f"step_unit must be 'epoch' or 'iteration', got {self.step_unit!r}")

    @property
    def H(self) -> int:
        return 2 * self.N

    @property
    def H_g(self) -> int:
        return 2 * self.N

    @property
    def token_dim(self) -> int:
        return self.N // self.T

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_toml(self) -> str:
        lines = []
        for key, value in self.to_dict().items():
            if isinstance(value, str):
                lines.append(f'{key} = "{value}"')
            else:
                lines.append(f"{key} = {value!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, values: dict) -> TrainConfig:
        fields = {f.name: f.type for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - set(fields))
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        defaults = cls()
        coerced = {}
        for key, value in values.items():
            kind = type(getattr(defaults, key))
            if kind is int and isinstance(value, float) and value.is_integer():
                value = int(value)
            if kind is float and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            if not isinstance(value, kind) or isinstance(value, bool):
                raise ValueError(f"config key {key!r} expects {kind.__name__}, got {value!r}")
            coerced[key] = value
        return cls(**coerced)

    @classmethod
    def from_toml(cls, path, **overrides) -> TrainConfig:
        values = read_toml(path)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_mapping(values)
