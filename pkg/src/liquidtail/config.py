"""Run configuration: one JSON document drives training, generation, and serving.

The document has one section per subsystem (backbone, maturation, loss,
train) plus paths and a seed. Unknown keys anywhere are rejected so a typo
cannot silently fall back to a default. The same dict is embedded verbatim
in checkpoints, which is how a checkpoint knows the architecture and
generation defaults it was trained with.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import Backbone, BackboneConfig
from .corpus import VOCAB_SIZE, Checkpoint, load_checkpoint
from .embeddings import EmbeddingTable, normalize_to_sphere, random_table
from .maturation import MaturationConfig
from .training import LossConfig, TrainConfig

__all__ = [
    "RunConfig",
    "ConfigError",
    "load_config",
    "build_model",
    "model_from_checkpoint",
]


class ConfigError(ValueError):
    """Malformed or unknown configuration content."""


def _section(cls, data: dict, name: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in '{name}': {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid '{name}' section: {e}") from e


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    maturation: MaturationConfig = field(default_factory=MaturationConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: dict = field(default_factory=dict)
    seed: int = 0
    radius: float = 1.0

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {"backbone", "maturation", "loss", "train", "paths", "seed", "radius"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
        seed = int(data.get("seed", 0))
        train_section = dict(data.get("train", {}))
        train_section.setdefault("seed", seed)
        paths = data.get("paths", {})
        if not isinstance(paths, dict):
            raise ConfigError("'paths' must be an object")
        return cls(
            backbone=_section(BackboneConfig, data.get("backbone", {}), "backbone"),
            maturation=_section(MaturationConfig, data.get("maturation", {}), "maturation"),
            loss=_section(LossConfig, data.get("loss", {}), "loss"),
            train=_section(TrainConfig, train_section, "train"),
            paths=dict(paths),
            seed=seed,
            radius=float(data.get("radius", 1.0)),
        )

    def to_dict(self) -> dict:
        return {
            "backbone": dataclasses.asdict(self.backbone),
            "maturation": dataclasses.asdict(self.maturation),
            "loss": dataclasses.asdict(self.loss),
            "train": dataclasses.asdict(self.train),
            "paths": dict(self.paths),
            "seed": self.seed,
            "radius": self.radius,
        }


def load_config(path: str | Path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return RunConfig.from_dict(data)


def build_model(cfg: RunConfig) -> tuple[Backbone, EmbeddingTable]:
    """Fresh model + embedding table, fully determined by the config seed."""
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    model = Backbone(cfg.backbone, rng)
    model.eval()
    source = cfg.paths.get("embeddings")
    if source:
        ck = load_checkpoint(source)
        if "embeddings" not in ck.tensors:
            raise ConfigError(f"{source}: no 'embeddings' tensor")
        table = normalize_to_sphere(ck.tensors["embeddings"], cfg.radius)
    else:
        table = random_table(VOCAB_SIZE, cfg.backbone.dim, cfg.radius, rng)
    if table.dim != cfg.backbone.dim:
        raise ConfigError(
            f"embedding dim {table.dim} does not match backbone dim {cfg.backbone.dim}"
        )
    return model, table


def model_from_checkpoint(
    path: str | Path,
) -> tuple[Backbone, EmbeddingTable, RunConfig, Checkpoint]:
    """Rebuild backbone + table from a checkpoint and its embedded config."""
    ck = load_checkpoint(path)
    cfg = RunConfig.from_dict(ck.config)
    model = Backbone(cfg.backbone)
    state = {}
    for name, arr in ck.tensors.items():
        if name.startswith("backbone."):
            state[name[len("backbone.") :]] = torch.from_numpy(arr)
    missing = set(dict(model.named_parameters())) - set(state)
    if missing:
        raise ConfigError(f"{path}: checkpoint missing parameters {sorted(missing)[:4]}...")
    model.load_state_dict(state)
    model.eval()
    if "embeddings" not in ck.tensors:
        raise ConfigError(f"{path}: no 'embeddings' tensor")
    table = EmbeddingTable(vectors=ck.tensors["embeddings"], radius=cfg.radius)
    return model, table, cfg, ck
