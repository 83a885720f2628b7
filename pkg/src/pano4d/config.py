"""Run configuration: a single JSON document with strict validation (unknown
keys rejected), dot-path overrides, and content hashing for run manifests.

Defaults mirror the reference training recipe: 0.1 m voxels, 2-frame clips,
T_hist 4, learning rates 3e-3 (LiDAR feature extractor) / 1e-4 (rest), decay
x0.1 at epochs 30 and 60.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import ConfigError
from .model import ModelConfig
from .supervision import TrainSettings
from .synthworld import AugmentParams, SceneConfig, scene_config_from_dict, scene_config_to_dict


@dataclass
class TrackingConfig:
    tau: float = 0.5
    t_hist: int = 4

    def validate(self):
        if self.t_hist < 1:
            raise ConfigError("tracking.t_hist: must be >= 1")


@dataclass
class TamTrainConfig:
    lr: float = 1e-4
    epochs: int = 2
    batch_size: int = 64
    gaps: tuple[int, ...] = (1, 2, 3, 4)

    def validate(self):
        if self.epochs < 0:
            raise ConfigError("tam.epochs: must be >= 0")
        if any(g < 1 for g in self.gaps):
            raise ConfigError("tam.gaps: gaps must be >= 1")


@dataclass
class DataConfig:
    num_scenes: int = 4
    scene: SceneConfig = field(default_factory=SceneConfig)

    def validate(self):
        if self.num_scenes < 1:
            raise ConfigError("data.num_scenes: must be >= 1")
        self.scene.validate()


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainSettings = field(default_factory=TrainSettings)
    tam: TamTrainConfig = field(default_factory=TamTrainConfig)
    tracking: TrackingConfig = field(default_factory=TrackingConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0

    def validate(self):
        if self.model.d % 4 != 0 or self.model.d <= 0:
            raise ConfigError("model.d: must be a positive multiple of 4")
        if self.model.num_queries < 1:
            raise ConfigError("model.num_queries: must be >= 1")
        if self.model.voxel_size <= 0:
            raise ConfigError("model.voxel_size: must be positive")
        if self.training.epochs < 0:
            raise ConfigError("training.epochs: must be >= 0")
        if len(self.training.loss_weights) != 3:
            raise ConfigError("training.loss_weights: need (ce, dice, cls)")
        if self.training.augment.point_budget <= 0:
            raise ConfigError("training.augment.point_budget: must be positive")
        self.tam.validate()
        self.tracking.validate()
        self.data.validate()
        if not any(c.id == self.model.fallback_class and c.kind == "stuff"
                   for c in self.data.scene.classes):
            raise ConfigError("model.fallback_class: must name a stuff class")


def _strict_kwargs(cls, d: dict, path: str) -> dict:
    known = {f.name for f in fields(cls)}
    for key in d:
        if key not in known:
            raise ConfigError(f"{path}.{key}: unknown key")
    return dict(d)


def _augment_from_dict(d: dict) -> AugmentParams:
    return AugmentParams(**_strict_kwargs(AugmentParams, d, "training.augment"))


def config_from_dict(doc: dict) -> RunConfig:
    known_top = {"model", "training", "tam", "tracking", "data", "seed"}
    for key in doc:
        if key not in known_top:
            raise ConfigError(f"{key}: unknown key")
    cfg = RunConfig()
    if "model" in doc:
        cfg.model = ModelConfig(**_strict_kwargs(ModelConfig, doc["model"], "model"))
    if "training" in doc:
        t = dict(doc["training"])
        aug = t.pop("augment", None)
        kwargs = _strict_kwargs(TrainSettings, t, "training")
        if "decay_epochs" in kwargs:
            kwargs["decay_epochs"] = tuple(kwargs["decay_epochs"])
        if "loss_weights" in kwargs:
            kwargs["loss_weights"] = tuple(kwargs["loss_weights"])
        cfg.training = TrainSettings(**kwargs)
        if aug is not None:
            cfg.training.augment = _augment_from_dict(aug)
    if "tam" in doc:
        kwargs = _strict_kwargs(TamTrainConfig, doc["tam"], "tam")
        if "gaps" in kwargs:
            kwargs["gaps"] = tuple(kwargs["gaps"])
        cfg.tam = TamTrainConfig(**kwargs)
    if "tracking" in doc:
        cfg.tracking = TrackingConfig(
            **_strict_kwargs(TrackingConfig, doc["tracking"], "tracking"))
    if "data" in doc:
        d = dict(doc["data"])
        scene = d.pop("scene", None)
        kwargs = _strict_kwargs(DataConfig, d, "data")
        cfg.data = DataConfig(**{k: v for k, v in kwargs.items() if k != "scene"})
        if scene is not None:
            cfg.data.scene = scene_config_from_dict(scene)
    if "seed" in doc:
        if not isinstance(doc["seed"], int):
            raise ConfigError("seed: must be an integer")
        cfg.seed = doc["seed"]
    cfg.validate()
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    doc = {
        "model": asdict(cfg.model),
        "training": asdict(cfg.training),
        "tam": asdict(cfg.tam),
        "tracking": asdict(cfg.tracking),
        "data": {"num_scenes": cfg.data.num_scenes,
                 "scene": scene_config_to_dict(cfg.data.scene)},
        "seed": cfg.seed,
    }
    doc["training"]["decay_epochs"] = list(cfg.training.decay_epochs)
    doc["training"]["loss_weights"] = list(cfg.training.loss_weights)
    doc["tam"]["gaps"] = list(cfg.tam.gaps)
    return doc


def load_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: malformed JSON ({e})") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return config_from_dict(doc)


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Apply ``--set dot.path=value`` overrides; values parse as JSON with a
    bare-string fallback."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set '{item}': expected dot.path=value")
        path, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        parts = path.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set '{item}': '{part}' is not an object")
        node[parts[-1]] = value
    return doc


def config_hash(doc: dict) -> str:
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def hash_tree(paths: list[str]) -> str:
    """Stable content hash over a sorted list of files."""
    h = hashlib.sha256()
    for p in sorted(paths):
        h.update(p.encode("utf-8"))
        with open(p, "rb") as fh:
            h.update(fh.read())
    return h.hexdigest()
