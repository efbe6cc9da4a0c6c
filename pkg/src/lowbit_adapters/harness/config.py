"""Run configuration: one JSON-serializable dataclass tree per experiment."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass

from ..tinynet import SCALE_GRID, AdapterSpec, BackboneSpec
from .tasks import TaskSpec
from .training import OptimSpec


def _pretrain_optim() -> OptimSpec:
    return OptimSpec(lr=1e-3, epochs=4, warmup_epochs=1)


def _adapt_optim() -> OptimSpec:
    return OptimSpec(lr=5e-3, epochs=20, warmup_epochs=2)


def _full_optim() -> OptimSpec:
    return OptimSpec(lr=1e-3, epochs=20, warmup_epochs=2)


@dataclass
class SweepSpec:
    bit_widths: list = field(default_factory=lambda: [1, 2, 4, 8, 32])
    hidden: list = field(default_factory=lambda: [8])
    budget: int = 32
    block_counts: list = field(default_factory=lambda: [1, 2, 4, 8])
    sigma_ratios: list = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    noise_trials: int = 3
    landscape_half_width: int = 10
    landscape_step: float = 0.1
    hist_bins: int = 30


@dataclass
class RunConfig:
    seed: int = 0
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    adapter: AdapterSpec = field(default_factory=AdapterSpec)
    task: TaskSpec = field(default_factory=TaskSpec)
    pretrain: OptimSpec = field(default_factory=_pretrain_optim)
    optim: OptimSpec = field(default_factory=_adapt_optim)
    full_optim: OptimSpec = field(default_factory=_full_optim)
    scale_grid: list = field(default_factory=lambda: list(SCALE_GRID))
    pretrain_threshold: float = 0.90
    backbone_seed: int = 0
    sweeps: SweepSpec = field(default_factory=SweepSpec)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def replace(self, **changes) -> "RunConfig":
        """Deep copy with dotted-path overrides, e.g. ``replace(**{"adapter.bits": 1})``."""
        d = self.to_dict()
        for key, value in changes.items():
            node = d
            *path, last = key.split(".")
            for part in path:
                node = node[part]
            if last not in node:
                raise KeyError(key)
            node[last] = value
        return RunConfig.from_dict(d)


def _build(cls, d: dict, defaults=None):
    """Partial dicts are layered over ``defaults`` (the parent's default for nested specs)."""
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    defaults = cls() if defaults is None else defaults
    kwargs = {}
    for name, value in d.items():
        current = getattr(defaults, name)
        if is_dataclass(current) and isinstance(value, dict):
            kwargs[name] = _build(type(current), value, current)
        else:
            kwargs[name] = value
    base = {f.name: getattr(defaults, f.name) for f in fields(cls) if f.name not in kwargs}
    return cls(**base, **kwargs)
