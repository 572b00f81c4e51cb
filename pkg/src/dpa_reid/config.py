"""Run configuration in line-oriented ``section.key = value`` form.

Blank lines and ``#`` comments are ignored. Every key must be known;
anything else is rejected so a typo can never be silently dropped.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

from .exceptions import ConfigInvalid
from .losses import HmtParams, LossWeights, LsceParams
from .model import BackboneConfig
from .optim import Schedule


def _ints(text):
    text = text.strip()
    return tuple(int(t) for t in text.split(",") if t.strip()) if text else ()


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> parser
SCHEMA = {
    "model.stage_channels": _ints,
    "model.blocks_per_stage": _ints,
    "model.input_size": _ints,
    "model.dpa_after_stage": _ints,
    "model.fusion": str,
    "model.gem_alpha": float,
    "model.num_kernels": int,
    "model.attention": str,
    "loss.epsilon": float,
    "loss.margin": float,
    "loss.normalize": _bool,
    "loss.lambda1": float,
    "loss.lambda2": float,
    "optim.name": str,
    "optim.base_lr": float,
    "optim.momentum": float,
    "optim.weight_decay": float,
    "schedule.warmup_epochs": int,
    "schedule.warmup_start_factor": float,
    "schedule.decay": str,
    "schedule.milestones": _ints,
    "schedule.gamma": float,
    "train.epochs": int,
    "train.P": int,
    "train.K": int,
    "train.seed": int,
    "train.iters_per_epoch": int,
    "data.manifest": str,
    "synth.ids": int,
    "synth.per_id": int,
    "synth.held_out": int,
    "synth.cameras": int,
    "synth.image_size": int,
    "eval.metric": str,
    "eval.cross_camera": _bool,
    "eval.ranks_k": int,
}


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    lsce: LsceParams = field(default_factory=LsceParams)
    hmt: HmtParams = field(default_factory=HmtParams)
    weights: LossWeights = field(default_factory=LossWeights)
    optimizer: str = "sgd"
    base_lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    warmup_epochs: int = 5
    warmup_start_factor: float = 0.1
    decay: str = "cosine"
    milestones: tuple = (30, 50)
    gamma: float = 0.1
    epochs: int = 60
    P: int = 8
    K: int = 4
    seed: int = 7
    iters_per_epoch: int = 0
    manifest: str = "data/manifest.json"
    synth_ids: int = 30
    synth_per_id: int = 10
    synth_held_out: int = 10
    synth_cameras: int = 2
    synth_image_size: int = 32
    metric: str = "euclidean"
    cross_camera: bool = True
    ranks_k: int = 10
    source: Path | None = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.epochs < 1:
            raise ConfigInvalid("train.epochs must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigInvalid("schedule.warmup_epochs must be in [0, epochs)")
        if self.P < 2 or self.K < 2:
            raise ConfigInvalid("train.P and train.K must both be >= 2")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigInvalid(f"optim.name must be sgd or adam, got {self.optimizer!r}")
        if self.decay not in ("cosine", "multistep"):
            raise ConfigInvalid(f"schedule.decay must be cosine or multistep, got {self.decay!r}")
        if self.metric not in ("euclidean", "cosine"):
            raise ConfigInvalid(f"eval.metric must be euclidean or cosine, got {self.metric!r}")
        if self.base_lr <= 0:
            raise ConfigInvalid("optim.base_lr must be positive")

    def schedule(self) -> Schedule:
        return Schedule(self.base_lr, self.epochs, self.warmup_epochs, self.warmup_start_factor,
                        self.decay, tuple(self.milestones), self.gamma)

    def manifest_path(self) -> Path:
        # relative paths resolve against the working directory
        return Path(self.manifest)


def parse_config(text: str, source: Path | None = None, overrides: dict | None = None) -> RunConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigInvalid(f"line {lineno}: expected 'section.key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigInvalid(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = SCHEMA[key](value)
        except ValueError as exc:
            raise ConfigInvalid(f"line {lineno}: bad value for {key}: {exc}") from exc
    for key, value in (overrides or {}).items():
        if key not in SCHEMA:
            raise ConfigInvalid(f"unknown key {key!r}")
        values[key] = value
    return build_config(values, source)


def build_config(values: dict, source: Path | None = None) -> RunConfig:
    bb_keys = {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith("model.")}
    try:
        backbone = BackboneConfig(**bb_keys)
        lsce = LsceParams(values.get("loss.epsilon", 0.1))
        hmt = HmtParams(values.get("loss.margin", 0.3), values.get("loss.normalize", False))
        weights = LossWeights(values.get("loss.lambda1", 1.0), values.get("loss.lambda2", 1.0))
    except (ValueError, TypeError) as exc:
        raise ConfigInvalid(str(exc)) from exc
    flat = {
        "optimizer": "optim.name", "base_lr": "optim.base_lr", "momentum": "optim.momentum",
        "weight_decay": "optim.weight_decay", "warmup_epochs": "schedule.warmup_epochs",
        "warmup_start_factor": "schedule.warmup_start_factor", "decay": "schedule.decay",
        "milestones": "schedule.milestones", "gamma": "schedule.gamma", "epochs": "train.epochs",
        "P": "train.P", "K": "train.K", "seed": "train.seed", "iters_per_epoch": "train.iters_per_epoch",
        "manifest": "data.manifest", "synth_ids": "synth.ids", "synth_per_id": "synth.per_id",
        "synth_held_out": "synth.held_out", "synth_cameras": "synth.cameras",
        "synth_image_size": "synth.image_size", "metric": "eval.metric",
        "cross_camera": "eval.cross_camera", "ranks_k": "eval.ranks_k",
    }
    kwargs = {attr: values[key] for attr, key in flat.items() if key in values}
    return RunConfig(backbone=backbone, lsce=lsce, hmt=hmt, weights=weights, source=source, **kwargs)


def load_config(path, overrides: dict | None = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, source=path, overrides=overrides)


def with_overrides(cfg: RunConfig, **changes) -> RunConfig:
    return replace(cfg, **changes)
