"""Run configuration: every tunable default, loadable from JSON."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .detgeom import DEFAULT_CONF_THRESHOLD, DEFAULT_NMS_IOU
from .errors import ConfigInvalid, IoFailure
from .models import DetectorConfig, GrasperConfig
from .optim import GraspLossParams, YoloLossParams
from .synth import AugSpec, DatasetConfig, GeneratorConfig


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # grasper only: crops drawn per training object and their box jitter
    crops_per_object: int = 3
    box_jitter: float = 0.1

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0 or self.crops_per_object < 1:
            raise ConfigInvalid("invalid training settings")


@dataclass(frozen=True)
class EvalConfig:
    conf_threshold: float = DEFAULT_CONF_THRESHOLD
    nms_iou: float = DEFAULT_NMS_IOU
    match_iou: float = 0.5
    crop_expand: float = 0.1


@dataclass(frozen=True)
class Config:
    seed: int = 0
    n_samples: int = 300
    dataset: DatasetConfig = DatasetConfig()
    detector: DetectorConfig = DetectorConfig.desk()
    grasper: GrasperConfig = GrasperConfig.desk()
    yolo_loss: YoloLossParams = field(default_factory=lambda: YoloLossParams(mode="canonical"))
    grasp_loss: GraspLossParams = field(default_factory=lambda: GraspLossParams(lambda_reg=1e-5))
    train_detector: TrainConfig = TrainConfig()
    train_grasper: TrainConfig = TrainConfig(epochs=25, batch_size=16)
    eval: EvalConfig = EvalConfig()

    def validate(self) -> None:
        self.dataset.validate()
        self.detector.validate()
        self.grasper.validate()
        self.train_detector.validate()
        self.train_grasper.validate()
        if self.detector.C != self.dataset.generator.num_classes:
            raise ConfigInvalid("detector class count differs from the generator's")
        if self.n_samples < 1:
            raise ConfigInvalid("n_samples must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _section(cls, d: dict | None, base, tuple_fields: dict | None = None):
    if d is None:
        return base
    if not isinstance(d, dict):
        raise ConfigInvalid(f"section for {cls.__name__} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigInvalid(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    merged = {**asdict(base), **d}
    for name, conv in (tuple_fields or {}).items():
        if name in merged and merged[name] is not None:
            merged[name] = conv(merged[name])
    try:
        return cls(**merged)
    except TypeError as exc:
        raise ConfigInvalid(str(exc)) from exc


def config_from_dict(d: dict) -> Config:
    base = Config()
    top_known = {f.name for f in fields(Config)}
    unknown = set(d) - top_known
    if unknown:
        raise ConfigInvalid(f"unknown top-level config keys: {sorted(unknown)}")
    ds = d.get("dataset") or {}
    if not isinstance(ds, dict):
        raise ConfigInvalid("dataset section must be an object")
    extra = set(ds) - {"generator", "augment", "augment_train", "split"}
    if extra:
        raise ConfigInvalid(f"unknown dataset keys: {sorted(extra)}")
    gen = _section(GeneratorConfig, ds.get("generator"), base.dataset.generator)
    aug = _section(AugSpec, ds.get("augment"), base.dataset.augment,
                   {"brightness": tuple, "contrast": tuple})
    dataset = DatasetConfig(gen, aug, bool(ds.get("augment_train", base.dataset.augment_train)),
                            tuple(ds.get("split", base.dataset.split)))
    cfg = Config(
        seed=int(d.get("seed", base.seed)),
        n_samples=int(d.get("n_samples", base.n_samples)),
        dataset=dataset,
        detector=_section(DetectorConfig, d.get("detector"), base.detector, {"widths": tuple}),
        grasper=_section(GrasperConfig, d.get("grasper"), base.grasper,
                         {"stages": lambda s: tuple(tuple(x) for x in s), "fc": tuple}),
        yolo_loss=_section(YoloLossParams, d.get("yolo_loss"), base.yolo_loss),
        grasp_loss=_section(GraspLossParams, d.get("grasp_loss"), base.grasp_loss),
        train_detector=_section(TrainConfig, d.get("train_detector"), base.train_detector),
        train_grasper=_section(TrainConfig, d.get("train_grasper"), base.train_grasper),
        eval=_section(EvalConfig, d.get("eval"), base.eval),
    )
    cfg.validate()
    return cfg


def load_config(path) -> Config:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise IoFailure(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigInvalid(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigInvalid("config root must be a JSON object")
    return config_from_dict(raw)
