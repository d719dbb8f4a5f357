"""Strict JSON experiment configuration.

A config has a ``seed``, an optional ``out`` directory and ``dataset``,
``model``, ``training`` and (for sequence data) ``rollout`` sections.
Unknown keys anywhere raise :class:`ConfigError` naming the key path.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .analytic import CascadeSpec, ContinuousCell
from .block import CKBConfig
from .poisson import SPLITS, PoissonConfig
from .rollout import RolloutConfig, SequenceModelConfig
from .train import ModelConfig, TrainConfig


class ConfigError(ValueError):
    pass


def _keys(cls) -> set[str]:
    return {f.name for f in fields(cls)}


TOP_KEYS = {"seed", "out", "dataset", "model", "training", "rollout"}
POISSON_KEYS = {"kind", "root"} | (_keys(PoissonConfig) - {"seed"})
CASCADE_KEYS = {"kind", "root", "cells", "dt", "steps", "train_count", "test_count", "burn_in", "inputs", "init"}
CELL_KEYS = _keys(ContinuousCell)
BLOCK_KEYS = _keys(CKBConfig) - {"d"}
OPERATOR_MODEL_KEYS = _keys(ModelConfig)
SEQUENCE_MODEL_KEYS = _keys(SequenceModelConfig) - {"state_dim"}
TRAINING_KEYS = _keys(TrainConfig)
ROLLOUT_KEYS = _keys(RolloutConfig)

CASCADE_DEFAULTS = {"steps": 60, "train_count": 32, "test_count": 16, "burn_in": 20,
                    "inputs": "smooth", "init": "zero"}


def _strict(section: dict, allowed: set[str], where: str) -> None:
    if not isinstance(section, dict):
        raise ConfigError(f"{where} must be an object")
    for k in section:
        if k not in allowed:
            raise ConfigError(f"unknown key {where + '.' if where else ''}{k}")


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str | None = None
    dataset: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    rollout: dict = field(default_factory=dict)
    base_dir: Path = field(default=Path("."), compare=False)

    @classmethod
    def from_dict(cls, raw: dict, base_dir=".") -> "ExperimentConfig":
        _strict(raw, TOP_KEYS, "")
        cfg = cls(seed=raw.get("seed", 0), out=raw.get("out"), dataset=dict(raw.get("dataset", {})),
                  model=dict(raw.get("model", {})), training=dict(raw.get("training", {})),
                  rollout=dict(raw.get("rollout", {})), base_dir=Path(base_dir))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, base_dir=".") -> "ExperimentConfig":
        """Relative paths inside the file resolve against ``base_dir`` (the working directory)."""
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        return cls.from_dict(raw, base_dir)

    @property
    def kind(self) -> str:
        return self.dataset.get("kind", "poisson")

    def validate(self) -> None:
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")
        if self.kind == "poisson":
            _strict(self.dataset, POISSON_KEYS, "dataset")
            _strict(self.model, OPERATOR_MODEL_KEYS, "model")
            if self.rollout:
                raise ConfigError("rollout section requires a cascade dataset")
        elif self.kind == "cascade":
            _strict(self.dataset, CASCADE_KEYS, "dataset")
            for i, c in enumerate(self.dataset.get("cells", [])):
                _strict(c, CELL_KEYS, f"dataset.cells[{i}]")
            _strict(self.model, SEQUENCE_MODEL_KEYS, "model")
            _strict(self.rollout, ROLLOUT_KEYS, "rollout")
        else:
            raise ConfigError(f"dataset.kind must be poisson or cascade, got {self.kind!r}")
        _strict(self.model.get("block", {}), BLOCK_KEYS, "model.block")
        _strict(self.training, TRAINING_KEYS, "training")
        if "counts" in self.dataset:
            _strict(self.dataset["counts"], set(SPLITS), "dataset.counts")
        # build everything once so value errors surface as config errors
        try:
            if self.kind == "poisson":
                self.poisson_config()
            else:
                self.cascade_spec()
                self.rollout_config()
            self.model_config()
            self.train_config()
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    # -- section builders --

    def poisson_config(self) -> PoissonConfig:
        kw = {k: v for k, v in self.dataset.items() if k not in ("kind", "root")}
        if "counts" in kw:
            kw["counts"] = {**PoissonConfig().counts, **kw["counts"]}
        return PoissonConfig(seed=self.seed, **kw)

    def cascade_settings(self) -> dict:
        return {**CASCADE_DEFAULTS, **{k: v for k, v in self.dataset.items() if k not in ("kind", "root", "cells")}}

    def cascade_spec(self) -> CascadeSpec:
        cells = self.dataset.get("cells")
        if not cells:
            raise ConfigError("dataset.cells must list at least one cell")
        if "dt" not in self.dataset:
            raise ConfigError("dataset.dt is required for cascade data")
        return CascadeSpec([ContinuousCell(**c) for c in cells])

    def model_config(self):
        kw = dict(self.model)
        if "block" in kw:
            kw["block"] = dict(kw["block"])
            if "delta_init" in kw["block"]:
                kw["block"]["delta_init"] = tuple(kw["block"]["delta_init"])
        if self.kind == "poisson":
            return ModelConfig(**kw)
        return SequenceModelConfig(state_dim=len(self.dataset["cells"]), **kw)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.training)

    def rollout_config(self) -> RolloutConfig:
        return RolloutConfig(**self.rollout)

    # -- identity --

    def to_dict(self) -> dict:
        d = {"seed": self.seed, "dataset": self.dataset, "model": self.model, "training": self.training}
        if self.rollout:
            d["rollout"] = self.rollout
        return d

    def sha256(self) -> str:
        """Digest of the canonical JSON form; ``out`` is excluded so moving outputs keeps the hash."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def dataset_sha256(self) -> str:
        """Digest of what determines the data: the dataset section without ``root``, plus the seed."""
        d = {k: v for k, v in self.dataset.items() if k != "root"}
        blob = json.dumps({"dataset": d, "seed": self.seed}, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def dataset_root(self) -> Path:
        root = self.dataset.get("root")
        if root is None:
            raise ConfigError("dataset.root is required")
        p = Path(root)
        return p if p.is_absolute() else self.base_dir / p

    def out_dir(self, override=None) -> Path:
        if override is not None:
            return Path(override)
        if self.out is None:
            return Path("runs")
        p = Path(self.out)
        return p if p.is_absolute() else self.base_dir / p
