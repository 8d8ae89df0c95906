"""Configuration dataclasses and canonical-JSON plumbing.

Config files are JSON documents with optional ``model``, ``train``,
``preprocess`` and ``synth`` sections; unknown keys are rejected so typos
surface immediately. CLI flags override the matching keys.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ContractError, DataError
from .skeleton import PreprocessConfig
from .synth import SynthSpec


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 60
    in_channels: int = 3
    joints: int = 25
    subjects: int = 2
    frames: int = 128
    channels: tuple = (64, 64, 128, 256)
    kernel: int = 9
    pool_window: int = 2
    batch_norm: bool = False
    primary_dim: int = 8
    caps_dim: int = 16
    routing_iters: int = 2
    routing_alpha: float = 0.5
    stages: int = 4
    loss: str = "margin"

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ContractError(f"kernel must be odd and >= 1, got {self.kernel}")
        if not self.channels:
            raise ContractError("channels must be nonempty")
        if self.pool_window < 1:
            raise ContractError("pool_window must be >= 1")
        if min(self.num_classes, self.primary_dim, self.caps_dim) < 1:
            raise ContractError("capsule dimensions must be >= 1")
        if self.routing_iters < 1:
            raise ContractError("routing_iters must be >= 1")
        if not 0.0 < self.routing_alpha <= 1.0:
            raise ContractError("routing_alpha must lie in (0, 1]")
        if not 1 <= self.stages <= len(self.channels):
            raise ContractError(
                f"stages must lie in 1..{len(self.channels)}, got {self.stages}"
            )
        if self.loss not in ("margin", "cross_entropy"):
            raise ContractError(f"unknown loss {self.loss!r}")


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.001
    decay_epochs: tuple = (30, 50)
    decay_factor: float = 0.1
    warmup_epochs: int = 10
    total_epochs: int = 60
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.warmup_epochs >= self.total_epochs:
            raise ContractError("warmup_epochs must be < total_epochs")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)


_SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "preprocess": PreprocessConfig,
    "synth": SynthSpec,
}

_LIST_FIELDS = {"channels", "decay_epochs", "classes"}


def _build_section(cls, doc, where):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise DataError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {
        k: tuple(v) if k in _LIST_FIELDS and isinstance(v, list) else v
        for k, v in doc.items()
    }
    try:
        return cls(**kwargs)
    except ContractError as exc:
        raise DataError(f"{where}: {exc}") from None


def config_from_dict(doc):
    unknown = set(doc) - set(_SECTIONS)
    if unknown:
        raise DataError(f"config: unknown sections {sorted(unknown)}")
    out = RunConfig()
    for name, cls in _SECTIONS.items():
        if name in doc:
            setattr(out, name, _build_section(cls, doc[name], name))
    return out


def load_config(path):
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise DataError(f"{path}: config root must be an object")
    return config_from_dict(doc)


def config_to_dict(cfg):
    return {
        name: dataclasses.asdict(getattr(cfg, name)) for name in _SECTIONS
    }


def canonical_json(obj):
    """Stable serialization: sorted keys, no whitespace, lists for tuples."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))
