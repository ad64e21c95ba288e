"""Flat experiment configuration loaded from YAML, overridable from the CLI."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

import yaml

from ..data import ACTIVITY_NAMES
from ..federation import Scheme
from ..model import EmbeddingHyper
from ..personalize import STRATEGIES
from ..signals import CANONICAL_LENGTH


@dataclass
class ExperimentConfig:
    # data
    dataset: str = "synthetic"            # "synthetic" or a path
    format: str = "synthetic"             # synthetic | canonical | hhar | uschad
    merge_path: Optional[str] = None      # optional second dataset merged into the first
    merge_format: Optional[str] = None
    merge_overlap: Dict[str, str] = field(default_factory=dict)
    vocabulary: Optional[List[str]] = None
    synth_users: int = 8
    synth_classes: int = 4
    synth_per_class: int = 50
    synth_heterogeneity: float = 1.0
    synth_noise: float = 0.3
    synth_cadence_spread: float = 0.45
    synth_tone_amp: float = 0.5
    synth_merge_users: int = 0            # second synthetic population merged into the first
    synth_merge_shift: int = 2            # its activity set starts this many activities later
    synth_merge_noise: float = 0.6
    train_frac: float = 0.8
    non_iid: bool = True
    max_remove: int = 2
    n_meta_test: int = 1
    balanced_test: bool = False
    # protocol
    schemes: List[str] = field(default_factory=lambda: ["meta_har"])
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    rounds: int = 200
    subset_size: Optional[int] = None
    lam: float = 1.0
    local_epochs: int = 2
    batch: int = 64
    lr: float = 1e-3
    reset_optimizer: bool = False
    weighted_fedavg: bool = False
    patience: Optional[int] = 20
    eval_every: int = 1
    central_epochs: int = 50
    finetune_strategies: List[str] = field(default_factory=lambda: ["two_stage"])
    finetune_epochs: List[int] = field(default_factory=lambda: [3])
    finetune_lr: Optional[float] = None
    finetune_batch: Optional[int] = None
    workers: int = 1                      # threads for client updates within a round
    seed_workers: int = 1                 # processes for independent seeds
    # model
    k: int = 5
    slope: float = 10.0
    embed_dim: int = 100
    filters: int = 64
    lstm_hidden: Optional[int] = None
    dropout: float = 0.3
    kernel: int = 3
    checkpoint_every: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.seeds:
            raise ValueError("seeds must be a nonempty list")
        for s in self.schemes:
            Scheme(s)
        for s in self.finetune_strategies:
            if s not in ("two_stage", "merged", "separated"):
                raise ValueError(f"unknown fine-tune strategy {s!r}")
        if CANONICAL_LENGTH % self.k:
            raise ValueError(f"k={self.k} must divide {CANONICAL_LENGTH}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must be in [0, 1]")
        if self.local_epochs < 1:
            raise ValueError("local_epochs (m) must be >= 1")
        if self.synth_merge_users and self.synth_classes + self.synth_merge_shift > len(ACTIVITY_NAMES):
            raise ValueError(f"synth_classes + synth_merge_shift must be <= {len(ACTIVITY_NAMES)}")
        if any(e < 0 for e in self.finetune_epochs):
            raise ValueError("fine-tune epochs must be >= 0")

    @property
    def f(self) -> int:
        return (CANONICAL_LENGTH // self.k) // 2 + 1

    def hyper(self, sensor_axes: Sequence[int]) -> EmbeddingHyper:
        return EmbeddingHyper(tuple(sensor_axes), self.k, self.f, self.filters, self.embed_dim,
                              self.lstm_hidden, self.dropout, self.kernel)

    def as_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def _coerce(name: str, raw: str):
    """Parse a ``key=value`` override with YAML scalar/list semantics."""
    return yaml.safe_load(raw)


def load_config(path: Optional[Union[str, Path]] = None, overrides: Optional[Mapping[str, Any]] = None,
                ) -> ExperimentConfig:
    data: Dict[str, Any] = {}
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(loaded, dict):
            raise ValueError(f"{path}: config must be a mapping of flat keys")
        data.update(loaded)
    if overrides:
        data.update(overrides)
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValueError(f"unknown config keys: {unknown}")
    for key in ("schemes", "finetune_strategies", "finetune_epochs", "seeds"):
        if key in data and not isinstance(data[key], list):
            data[key] = [data[key]]
    return ExperimentConfig(**data)


def parse_overrides(pairs: Sequence[str]) -> Dict[str, Any]:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"override {pair!r} is not key=value")
        key, raw = pair.split("=", 1)
        out[key.strip()] = _coerce(key, raw)
    return out


def dump_config(cfg: ExperimentConfig, path: Union[str, Path]) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.as_dict(), sort_keys=False))
