"""Image data model, pre-processing and dataset ingestion."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torchvision.transforms.functional as TF
from PIL import Image
from torchvision.transforms import InterpolationMode

from .errors import DatasetError, ValidationError
from .segmetrics import IGNORE_LABEL, LabelMap

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


def stage_seed(global_seed, stage):
    """Derive the 64-bit seed of a named pipeline stage from the global seed."""
    digest = hashlib.sha256(f"{int(global_seed)}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


@dataclass(frozen=True)
class NormSpec:
    mean: tuple = IMAGENET_MEAN
    std: tuple = IMAGENET_STD

    def __post_init__(self):
        object.__setattr__(self, "mean", tuple(float(m) for m in self.mean))
        object.__setattr__(self, "std", tuple(float(s) for s in self.std))
        if len(self.mean) != len(self.std):
            raise ValidationError("mean and std must have one entry per channel")
        if any(not s > 0 for s in self.std):
            raise ValidationError(f"std components must be strictly positive, got {self.std}")

    @property
    def channels(self):
        return len(self.mean)

    def mean_tensor(self, dtype=torch.float32):
        return torch.tensor(self.mean, dtype=dtype).view(-1, 1, 1)

    def std_tensor(self, dtype=torch.float32):
        return torch.tensor(self.std, dtype=dtype).view(-1, 1, 1)

    def to_dict(self):
        return {"mean": list(self.mean), "std": list(self.std)}


@dataclass(frozen=True)
class AugmentSpec:
    """Geometry of the crop pipeline.

    ``resize_size`` is the short side used before the eval center crop.
    ``scale`` and ``ratio`` bound the train-mode random resized crop.
    """

    crop_size: int = 224
    resize_size: int = 256
    flip_probability: float = 0.5
    mode: str = "train"
    rng_seed: int = 0
    scale: tuple = (0.08, 1.0)
    ratio: tuple = (3 / 4, 4 / 3)

    def __post_init__(self):
        if self.mode not in ("train", "eval"):
            raise ValidationError(f"mode must be 'train' or 'eval', got {self.mode!r}")
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ValidationError("flip_probability must lie in [0, 1]")
        if self.crop_size < 1 or self.resize_size < self.crop_size:
            raise ValidationError("need 1 <= crop_size <= resize_size")

    def with_seed(self, seed):
        return AugmentSpec(self.crop_size, self.resize_size, self.flip_probability,
                           self.mode, int(seed), self.scale, self.ratio)

    def eval(self):
        return AugmentSpec(self.crop_size, self.resize_size, self.flip_probability,
                           "eval", self.rng_seed, self.scale, self.ratio)


@dataclass
class RawImage:
    pixels: np.ndarray
    source_path: str = ""
    label: Optional[int] = None
    label_map: Optional[LabelMap] = None

    def validate(self, num_classes=None):
        px = self.pixels
        if px.ndim != 3:
            raise ValidationError(f"{self.source_path or 'image'}: expected H x W x C pixels, got {px.shape}")
        h, w, c = px.shape
        if h < 1 or w < 1:
            raise ValidationError(f"{self.source_path or 'image'}: degenerate image of size {h}x{w}")
        if c != 3:
            raise ValidationError(f"{self.source_path or 'image'}: expected 3 RGB channels, got {c}")
        if px.dtype != np.uint8:
            raise ValidationError(f"{self.source_path or 'image'}: pixels must be uint8, got {px.dtype}")
        if self.label is not None and num_classes is not None and not 0 <= self.label < num_classes:
            raise ValidationError(f"{self.source_path}: label {self.label} outside [0, {num_classes - 1}]")
        if self.label_map is not None and self.label_map.shape != (h, w):
            raise ValidationError(f"{self.source_path}: mask shape {self.label_map.shape} != image {h}x{w}")
        return self


@dataclass
class TensorImage:
    data: torch.Tensor
    norm: NormSpec = field(default_factory=NormSpec)
    is_normalized: bool = False

    @property
    def shape(self):
        return tuple(self.data.shape)


def to_tensor(img: RawImage) -> TensorImage:
    """Convert uint8 H x W x C pixels to an unnormalized C x H x W tensor in [0, 1]."""
    img.validate()
    data = torch.from_numpy(np.ascontiguousarray(img.pixels)).permute(2, 0, 1).float() / 255.0
    return TensorImage(data, NormSpec(), False)


def normalize(t: TensorImage, norm: Optional[NormSpec] = None) -> TensorImage:
    if t.is_normalized:
        raise ValidationError("tensor is already normalized")
    norm = norm or t.norm
    if t.data.shape[-3] != norm.channels:
        raise ValidationError(f"{t.data.shape[-3]} channels but NormSpec has {norm.channels}")
    dtype = t.data.dtype
    data = (t.data - norm.mean_tensor(dtype)) / norm.std_tensor(dtype)
    return TensorImage(data, norm, True)


def denormalize(t: TensorImage) -> TensorImage:
    """Map back to [0, 1] pixel space and clamp."""
    if not t.is_normalized:
        raise ValidationError("tensor is not normalized; refusing to denormalize twice")
    dtype = t.data.dtype
    data = t.data * t.norm.std_tensor(dtype) + t.norm.mean_tensor(dtype)
    return TensorImage(data.clamp(0.0, 1.0), t.norm, False)


def _resize_short_side(x, size, interpolation):
    h, w = x.shape[-2:]
    if min(h, w) == size:
        return x
    if h <= w:
        new = (size, max(1, int(round(w * size / h))))
    else:
        new = (max(1, int(round(h * size / w))), size)
    return TF.resize(x, list(new), interpolation=interpolation,
                     antialias=interpolation == InterpolationMode.BILINEAR)


def center_crop_box(h, w, size):
    """Top-left corner of a ``size`` x ``size`` window centered in an h x w grid."""
    return int(round((h - size) / 2.0)), int(round((w - size) / 2.0))


def _random_resized_box(h, w, scale, ratio, rng):
    area = h * w
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(*log_ratio))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    # fall back to the largest centered crop within the ratio bounds
    in_ratio = w / h
    if in_ratio < min(ratio):
        cw, ch = w, int(round(w / min(ratio)))
    elif in_ratio > max(ratio):
        ch, cw = h, int(round(h * max(ratio)))
    else:
        cw, ch = w, h
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def _geometry(h, w, aug):
    """Sample the crop box and flip decision. Returns (top, left, ch, cw, flip, resized_hw)."""
    if aug.mode == "eval":
        if h <= w:
            rh, rw = aug.resize_size, max(1, int(round(w * aug.resize_size / h)))
        else:
            rh, rw = max(1, int(round(h * aug.resize_size / w))), aug.resize_size
        top, left = center_crop_box(rh, rw, aug.crop_size)
        return top, left, aug.crop_size, aug.crop_size, False, (rh, rw)
    rng = np.random.default_rng(aug.rng_seed)
    top, left, ch, cw = _random_resized_box(h, w, aug.scale, aug.ratio, rng)
    flip = bool(rng.random() < aug.flip_probability)
    return top, left, ch, cw, flip, None


def _apply(x, aug, geom, interpolation):
    top, left, ch, cw, flip, resized = geom
    if aug.mode == "eval":
        x = _resize_short_side(x, aug.resize_size, interpolation)
        x = x[..., top:top + ch, left:left + cw]
    else:
        x = x[..., top:top + ch, left:left + cw]
        if (ch, cw) != (aug.crop_size, aug.crop_size):
            x = TF.resize(x, [aug.crop_size, aug.crop_size], interpolation=interpolation,
                          antialias=interpolation == InterpolationMode.BILINEAR)
        if flip:
            x = x.flip(-1)
    return x.contiguous()


def preprocess_with_mask(img: RawImage, aug: AugmentSpec, norm: Optional[NormSpec] = None):
    """Crop/flip/normalize an image and apply the same geometry to its mask.

    Returns ``(TensorImage, LabelMap or None)``. Masks use nearest-neighbour
    resampling so class ids never blend.
    """
    norm = norm or NormSpec()
    img.validate()
    if norm.channels != 3:
        raise ValidationError("RGB images need a 3-channel NormSpec")
    h, w, _ = img.pixels.shape
    geom = _geometry(h, w, aug)
    data = to_tensor(img).data
    data = _apply(data, aug, geom, InterpolationMode.BILINEAR).clamp(0.0, 1.0)
    tensor = normalize(TensorImage(data, norm, False))
    mask = None
    if img.label_map is not None:
        m = torch.from_numpy(img.label_map.labels.astype(np.int64))[None]
        # nearest resize on an integer tensor is exact
        m = _apply(m.to(torch.uint8) if m.max() < 256 else m.float(), aug, geom, InterpolationMode.NEAREST)
        mask = LabelMap(m[0].numpy().astype(np.int64), img.label_map.num_classes,
                        img.label_map.ignore_value)
    return tensor, mask


def preprocess(img: RawImage, aug: AugmentSpec, norm: Optional[NormSpec] = None) -> TensorImage:
    return preprocess_with_mask(img, aug, norm)[0]


# dataset ingestion -----------------------------------------------------------

def load_image(path, label=None) -> RawImage:
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.mode != "RGB":
                raise DatasetError(f"expected an RGB image, got mode {im.mode}", [path])
            pixels = np.asarray(im, dtype=np.uint8).copy()
    except (OSError, SyntaxError) as exc:
        raise DatasetError(f"unreadable image ({exc})", [path]) from None
    return RawImage(pixels, str(path), label)


def load_mask(path, num_classes, ignore_value=IGNORE_LABEL) -> LabelMap:
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "P"):
                raise DatasetError(f"mask must be single-channel, got mode {im.mode}", [path])
            labels = np.asarray(im, dtype=np.int64).copy()
    except (OSError, SyntaxError) as exc:
        raise DatasetError(f"unreadable mask ({exc})", [path]) from None
    try:
        return LabelMap(labels, num_classes, ignore_value)
    except ValidationError as exc:
        raise DatasetError(str(exc), [path]) from None


def save_image(pixels, path):
    Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="RGB").save(path)


def save_mask(labels, path):
    Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="L").save(path)


def _image_files(directory):
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def scan_classification_tree(root, class_names: Optional[Sequence[str]] = None):
    """List ``(path, label)`` pairs of a ``root/<class_name>/<image>`` tree.

    Class ids follow sorted directory names unless ``class_names`` fixes the order.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError("dataset directory does not exist", [root])
    dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if class_names is None:
        class_names = [d.name for d in dirs]
    if not class_names:
        raise DatasetError("no class directories found", [root])
    index = {name: i for i, name in enumerate(class_names)}
    unknown = [d for d in dirs if d.name not in index]
    if unknown:
        raise DatasetError("class directories not in the class list", unknown)
    samples, empty, stray = [], [], []
    for name in class_names:
        d = root / name
        if not d.is_dir():
            empty.append(d)
            continue
        files = _image_files(d)
        stray.extend(p for p in d.iterdir() if p.is_file() and p.suffix.lower() not in IMAGE_SUFFIXES)
        if not files:
            empty.append(d)
        samples.extend((p, index[name]) for p in files)
    if empty:
        raise DatasetError("class directories without images", empty)
    if stray:
        raise DatasetError("non-image files in dataset tree", stray)
    return samples, list(class_names)


def scan_segmentation_pairs(root):
    """Pair ``root/images/<stem>.*`` with ``root/masks/<stem>.png``."""
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    missing = [d for d in (img_dir, mask_dir) if not d.is_dir()]
    if missing:
        raise DatasetError("segmentation tree needs images/ and masks/", missing)
    images = {p.stem: p for p in _image_files(img_dir)}
    masks = {p.stem: p for p in mask_dir.iterdir() if p.is_file() and p.suffix.lower() == ".png"}
    unpaired = [images[s] for s in images.keys() - masks.keys()]
    unpaired += [masks[s] for s in masks.keys() - images.keys()]
    if unpaired:
        raise DatasetError("images and masks with no partner", sorted(unpaired))
    if not images:
        raise DatasetError("no image/mask pairs found", [root])
    return [(images[s], masks[s]) for s in sorted(images)]


class ImageDataset(torch.utils.data.Dataset):
    """Pre-processing view over in-memory raw images.

    Train-mode augmentation is seeded per (epoch, index) from
    ``aug.rng_seed``; call ``set_epoch`` between passes.
    """

    def __init__(self, images: Sequence[RawImage], aug: AugmentSpec, norm: Optional[NormSpec] = None,
                 dense: bool = False):
        self.images = list(images)
        self.aug = aug
        self.norm = norm or NormSpec()
        self.dense = dense
        self.epoch = 0

    def set_epoch(self, epoch):
        self.epoch = int(epoch)

    def __len__(self):
        return len(self.images)

    def sample_aug(self, index):
        if self.aug.mode == "eval":
            return self.aug
        return self.aug.with_seed(stage_seed(self.aug.rng_seed, f"sample:{self.epoch}:{index}"))

    def __getitem__(self, index):
        img = self.images[index]
        tensor, mask = preprocess_with_mask(img, self.sample_aug(index), self.norm)
        if self.dense:
            if mask is None:
                raise DatasetError("dense dataset sample has no mask", [img.source_path])
            return tensor.data, torch.from_numpy(mask.labels)
        if img.label is None:
            raise DatasetError("sample has no label", [img.source_path])
        return tensor.data, img.label

    def path(self, index):
        return self.images[index].source_path
