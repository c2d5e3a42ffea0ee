"""TOML experiment configuration.

Top-level keys and one table per stage; every field has a default, so an
empty file is a valid (desk-scale) config. Unknown keys are rejected.

    dataset_root = "data/shapes/classification"
    task = "classification"          # or "segmentation"
    backbone_id = "tiny-cnn"         # resnet18 | resnet50 | tiny-cnn
    output_dir = "runs/demo"
    global_seed = 0

    [model]       feature_dim, widths, pretrained ("" = no named weights)
    [preprocess]  crop_size, resize_size, flip_probability, scale, ratio, mean, std
    [train]       learning_rate, momentum, batch_size, epochs, num_classes,
                  head_classes, select ("last" | "best_val")
    [attack]      method, eps_grid, loss_target, clamp, baseline, workers, panel_images
    [detector]    metric, target_fpr, bandwidth (0 = median heuristic),
                  reference_cap, reference_split, calibration_split, test_split, eps_grid
    [dataset]     num_classes, image_size, train, val, test (make-dataset only)
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import tomli_w

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .attacks import DEFAULT_EPS_GRID
from .errors import ConfigError
from .pipeline import IMAGENET_MEAN, IMAGENET_STD


@dataclass
class ModelSection:
    feature_dim: int = 64
    widths: list = field(default_factory=lambda: [16, 32])
    pretrained: str = ""


@dataclass
class PreprocessSection:
    crop_size: int = 32
    resize_size: int = 36
    flip_probability: float = 0.5
    scale: list = field(default_factory=lambda: [0.5, 1.0])
    ratio: list = field(default_factory=lambda: [3 / 4, 4 / 3])
    mean: list = field(default_factory=lambda: list(IMAGENET_MEAN))
    std: list = field(default_factory=lambda: list(IMAGENET_STD))


@dataclass
class TrainSection:
    learning_rate: float = 0.001
    momentum: float = 0.9
    batch_size: int = 4
    epochs: int = 30
    num_classes: int = 4
    head_classes: int = 6
    select: str = "last"


@dataclass
class AttackSection:
    method: str = "fgsm"
    eps_grid: list = field(default_factory=lambda: list(DEFAULT_EPS_GRID))
    loss_target: str = "true_label"
    clamp: bool = True
    baseline: str = "predictions"
    workers: int = 1
    panel_images: int = 4


@dataclass
class DetectorSection:
    metric: str = "k_density"
    target_fpr: float = 0.05
    bandwidth: float = 0.0
    reference_cap: int = 200
    reference_split: str = "train"
    calibration_split: str = "val"
    test_split: str = "test"
    eps_grid: list = field(default_factory=lambda: [0.0, 0.05, 0.1])


@dataclass
class DatasetSection:
    num_classes: int = 4
    image_size: int = 40
    train: int = 400
    val: int = 100
    test: int = 200


SECTIONS = {
    "model": ModelSection,
    "preprocess": PreprocessSection,
    "train": TrainSection,
    "attack": AttackSection,
    "detector": DetectorSection,
    "dataset": DatasetSection,
}
_CHOICES = {
    ("", "task"): ("classification", "segmentation"),
    ("", "backbone_id"): ("resnet18", "resnet50", "tiny-cnn"),
    ("train", "select"): ("last", "best_val"),
    ("attack", "loss_target"): ("true_label", "predicted_label"),
    ("attack", "baseline"): ("predictions", "ground_truth"),
    ("attack", "method"): ("fgsm",),
    ("detector", "metric"): ("confidence", "non_me", "k_density"),
}


@dataclass
class ExperimentConfig:
    dataset_root: str = "data/shapes/classification"
    task: str = "classification"
    backbone_id: str = "tiny-cnn"
    output_dir: str = "runs/demo"
    global_seed: int = 0
    model: ModelSection = field(default_factory=ModelSection)
    preprocess: PreprocessSection = field(default_factory=PreprocessSection)
    train: TrainSection = field(default_factory=TrainSection)
    attack: AttackSection = field(default_factory=AttackSection)
    detector: DetectorSection = field(default_factory=DetectorSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)

    def to_dict(self):
        return asdict(self)

    def config_hash(self):
        """Digest of every setting except ``output_dir``, so relocated reruns hash alike."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def with_overrides(self, output=None, seed=None):
        out = self
        if output is not None:
            out = replace(out, output_dir=str(output))
        if seed is not None:
            out = replace(out, global_seed=int(seed))
        return out


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"[{where}] must be a table")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown keys in [{where or 'top level'}]: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name)
        if name in SECTIONS and where == "":
            kwargs[name] = _build(SECTIONS[name], value, name)
            continue
        if isinstance(default, bool) and not isinstance(value, bool):
            raise ConfigError(f"{where}.{name} must be a boolean")
        if isinstance(default, (int, float)) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where}.{name} must be a number")
            if isinstance(default, int) and not isinstance(value, int):
                raise ConfigError(f"{where}.{name} must be an integer")
            value = type(default)(value)
        if isinstance(default, list) and not isinstance(value, list):
            raise ConfigError(f"{where}.{name} must be an array")
        if isinstance(default, str) and not isinstance(value, str):
            raise ConfigError(f"{where}.{name} must be a string")
        choices = _CHOICES.get((where, name))
        if choices and value not in choices:
            raise ConfigError(f"{where or 'top level'}.{name} = {value!r}; expected one of {choices}")
        kwargs[name] = value
    return cls(**kwargs)


def from_dict(data):
    return _build(ExperimentConfig, dict(data), "")


def load_config(path=None):
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML ({exc})") from None
    return from_dict(data)


def dumps(cfg):
    return tomli_w.dumps(cfg.to_dict())


def save_config(cfg, path):
    Path(path).write_text(dumps(cfg))
