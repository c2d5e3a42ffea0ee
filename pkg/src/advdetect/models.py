"""Frozen-backbone classifiers, head training, head slicing and checkpoints."""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import segmetrics
from .errors import CheckpointError, ValidationError
from .pipeline import NormSpec, TensorImage
from .segmetrics import IGNORE_LABEL

BACKBONES = ("resnet18", "resnet50", "tiny-cnn")
RESNET_DIMS = {"resnet18": 512, "resnet50": 2048}


# building blocks -------------------------------------------------------------

class TinyCNN(nn.Module):
    """Three conv blocks; the last two halve the resolution."""

    def __init__(self, in_channels=3, widths=(16, 32), feature_dim=64):
        super().__init__()
        w1, w2 = widths
        self.block1 = nn.Sequential(nn.Conv2d(in_channels, w1, 3, padding=1), nn.ReLU())
        self.block2 = nn.Sequential(nn.Conv2d(w1, w2, 3, stride=2, padding=1), nn.ReLU())
        self.block3 = nn.Sequential(nn.Conv2d(w2, feature_dim, 3, stride=2, padding=1), nn.ReLU())
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
                nn.init.zeros_(m.bias)

    def forward(self, x):
        return self.block3(self.block2(self.block1(x)))


class _ResNetTrunk(nn.Module):
    def __init__(self, net):
        super().__init__()
        self.body = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool,
                                  net.layer1, net.layer2, net.layer3, net.layer4)

    def forward(self, x):
        return self.body(x)


def _make_backbone(backbone_id, in_channels, feature_dim, widths, pretrained):
    if backbone_id == "tiny-cnn":
        return TinyCNN(in_channels, widths, feature_dim), feature_dim
    if backbone_id not in RESNET_DIMS:
        raise ValidationError(f"unknown backbone {backbone_id!r}; choose from {BACKBONES}")
    import torchvision.models as tvm

    ctor = getattr(tvm, backbone_id)
    net = ctor(weights=pretrained) if pretrained else ctor(weights=None)
    if in_channels != 3:
        raise ValidationError("ResNet backbones take 3-channel input")
    return _ResNetTrunk(net), RESNET_DIMS[backbone_id]


class LinearHead(nn.Module):
    """logits = weight @ z + bias."""

    def __init__(self, feature_dim, num_classes=102, generator=None):
        super().__init__()
        bound = 1.0 / math.sqrt(feature_dim)
        w = torch.empty(num_classes, feature_dim).uniform_(-bound, bound, generator=generator)
        b = torch.empty(num_classes).uniform_(-bound, bound, generator=generator)
        self.weight = nn.Parameter(w)
        self.bias = nn.Parameter(b)

    @property
    def num_classes(self):
        return self.weight.shape[0]

    def forward(self, z):
        return F.linear(z, self.weight, self.bias)


class ClassifierModel(nn.Module):
    """Frozen backbone -> global average pool -> linear head.

    With ``dense=True`` the head is also applied at every location of the
    final feature map and upsampled to the input size, giving per-pixel
    logits for segmentation targets. ``z`` is always the pooled feature.
    """

    source_layer = "global_avg_pool"

    def __init__(self, backbone_id="tiny-cnn", num_classes=102, feature_dim=64, in_channels=3,
                 input_size=224, norm=None, dense=False, seed=0, widths=(16, 32), pretrained=None):
        super().__init__()
        self.backbone_id = backbone_id
        self.in_channels = in_channels
        self.input_size = int(input_size)
        self.norm = norm or NormSpec()
        self.dense = bool(dense)
        self.widths = tuple(widths)
        self.pretrained = pretrained
        self.train_config = {}
        gen = torch.Generator().manual_seed(int(seed))
        state = torch.random.get_rng_state()
        try:
            # module constructors draw from the global generator
            torch.manual_seed(int(seed))
            self.backbone, self.feature_dim = _make_backbone(backbone_id, in_channels, feature_dim,
                                                             self.widths, pretrained)
        finally:
            torch.random.set_rng_state(state)
        self.head = LinearHead(self.feature_dim, num_classes, gen)
        self.freeze_backbone()

    @property
    def num_classes(self):
        return self.head.num_classes

    @property
    def backbone_frozen(self):
        return not any(p.requires_grad for p in self.backbone.parameters())

    def freeze_backbone(self):
        for p in self.backbone.parameters():
            p.requires_grad_(False)
        self.backbone.eval()

    def train(self, mode=True):
        super().train(mode)
        # frozen backbone keeps its normalization statistics
        self.backbone.eval()
        return self

    def features(self, x):
        return self.backbone(x).mean(dim=(-2, -1))

    def forward(self, x):
        fmap = self.backbone(x)
        z = fmap.mean(dim=(-2, -1))
        if not self.dense:
            return self.head(z), z
        logits = self.head(fmap.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)
        logits = F.interpolate(logits, size=x.shape[-2:], mode="bilinear", align_corners=False)
        return logits, z


def build_model(backbone_id="tiny-cnn", num_classes=102, feature_dim=64, **kwargs):
    return ClassifierModel(backbone_id, num_classes, feature_dim, **kwargs)


# value types -----------------------------------------------------------------

@dataclass
class FeatureVector:
    z: np.ndarray
    source_layer: str = ClassifierModel.source_layer

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        if not np.isfinite(self.z).all():
            raise ValidationError("feature vector has non-finite entries")


@dataclass
class ProbVector:
    p: np.ndarray

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64)
        if self.p.ndim != 1 or self.p.size < 1:
            raise ValidationError("probability vector must be 1-D and non-empty")
        if (self.p < 0).any() or (self.p > 1).any() or abs(self.p.sum() - 1.0) > 1e-6:
            raise ValidationError("probability vector must lie on the simplex")

    @classmethod
    def from_logits(cls, logits):
        logits = torch.as_tensor(logits, dtype=torch.float64)
        return cls(torch.softmax(logits, dim=-1).numpy())


# inference -------------------------------------------------------------------

def _check_input(model, data):
    if data.shape[-3] != model.in_channels:
        raise ValidationError(f"expected {model.in_channels} channels, got {data.shape[-3]}")
    if tuple(data.shape[-2:]) != (model.input_size, model.input_size):
        raise ValidationError(
            f"spatial size {tuple(data.shape[-2:])} does not match the model's "
            f"{model.input_size}x{model.input_size}"
        )


def forward(model: ClassifierModel, x: TensorImage):
    """Logits and pooled feature for one normalized image, in eval mode."""
    if not x.is_normalized:
        raise ValidationError("forward expects a normalized TensorImage")
    _check_input(model, x.data)
    model.eval()
    with torch.no_grad():
        logits, z = model(x.data.unsqueeze(0))
    return logits[0], FeatureVector(z[0].numpy(), model.source_layer)


def forward_batch(model, batch, batch_size=256):
    """Eval-mode logits and features for an N x C x H x W normalized tensor."""
    _check_input(model, batch)
    model.eval()
    logits, feats = [], []
    with torch.no_grad():
        for start in range(0, batch.shape[0], batch_size):
            lg, z = model(batch[start:start + batch_size])
            logits.append(lg)
            feats.append(z)
    return torch.cat(logits), torch.cat(feats)


def argmax(logits):
    """Index of the largest entry along the last axis; ties go to the lowest index."""
    return torch.as_tensor(logits).argmax(dim=-1)


def predict(model, x: TensorImage) -> int:
    logits, _ = forward(model, x)
    if model.dense:
        raise ValidationError("predict returns a single class; use forward for dense models")
    return int(argmax(logits))


# training --------------------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    momentum: float = 0.9
    batch_size: int = 4
    epochs: int = 10
    num_classes: int = 100
    head_classes: int = 102
    rng_seed: int = 0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


EPOCH_LOG_HEADER = ["epoch", "phase", "loss", "accuracy", "precision_macro", "recall_macro", "f1_macro"]


@dataclass
class EpochLogRow:
    epoch: int
    phase: str
    loss: float
    accuracy: float
    precision_macro: float
    recall_macro: float
    f1_macro: float

    def as_row(self):
        return [self.epoch, self.phase] + [repr(float(getattr(self, k))) for k in EPOCH_LOG_HEADER[2:]]


def write_epoch_log(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(EPOCH_LOG_HEADER)
        for r in rows:
            w.writerow(r.as_row())


def read_epoch_log(path):
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != EPOCH_LOG_HEADER:
            raise ValidationError(f"{path}: epoch log header {header} != {EPOCH_LOG_HEADER}")
        return [EpochLogRow(int(r[0]), r[1], *map(float, r[2:])) for r in reader]


def _dataset_labels(data):
    images = getattr(data, "images", None)
    if images is not None and not getattr(data, "dense", False):
        return [(img.label, img.source_path) for img in images]
    if images is not None:
        return []
    return [(int(data[i][1]), f"sample {i}") for i in range(len(data))]


def backbone_checksum(model):
    h = hashlib.sha256()
    for name, t in sorted(model.backbone.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _log_row(epoch, phase, loss_sum, n, cm):
    def safe(v):
        return 0.0 if math.isnan(v) else v

    return EpochLogRow(
        epoch=epoch,
        phase=phase,
        loss=loss_sum / max(n, 1),
        accuracy=safe(segmetrics.pixel_accuracy(cm)),
        precision_macro=safe(segmetrics.macro_precision(cm)),
        recall_macro=safe(segmetrics.macro_recall(cm)),
        f1_macro=safe(segmetrics.dice_f1(cm)),
    )


def _run_epoch(model, loader, optimizer, epoch, phase):
    dense = model.dense
    cm = segmetrics.ConfusionMatrix(model.num_classes)
    loss_sum, n = 0.0, 0
    training = optimizer is not None
    model.train(training)
    for x, y in loader:
        y = torch.as_tensor(y, dtype=torch.long)
        with torch.set_grad_enabled(training):
            logits, _ = model(x)
            loss = F.cross_entropy(logits, y, ignore_index=IGNORE_LABEL, reduction="sum")
            count = int((y != IGNORE_LABEL).sum()) if dense else y.shape[0]
            if training:
                optimizer.zero_grad()
                (loss / max(count, 1)).backward()
                optimizer.step()
        loss_sum += float(loss.detach())
        n += count
        cm.update(argmax(logits.detach()).numpy() if not dense else logits.detach().argmax(1).numpy(),
                  y.numpy())
    model.eval()
    return _log_row(epoch, phase, loss_sum, n, cm)


def train_head(model, data, cfg: TrainConfig, val_data=None, callback=None):
    """SGD on the head only; one log row per (epoch, phase).

    ``callback(epoch, model, rows)`` runs after each epoch, e.g. to keep the
    best checkpoint. The model is trained in place and returned.
    """
    if not model.backbone_frozen:
        raise ValidationError("train_head requires a frozen backbone")
    if len(data) == 0:
        raise ValidationError("training dataset is empty")
    if cfg.num_classes > model.num_classes:
        raise ValidationError(f"{cfg.num_classes} training classes exceed head width {model.num_classes}")
    for d in (data, val_data):
        if d is None:
            continue
        for label, path in _dataset_labels(d):
            if label is None or not 0 <= label < cfg.num_classes:
                raise ValidationError(f"label {label} outside [0, {cfg.num_classes - 1}] for {path}")

    gen = torch.Generator().manual_seed(int(cfg.rng_seed))
    loader = torch.utils.data.DataLoader(data, batch_size=cfg.batch_size, shuffle=True, generator=gen)
    val_loader = None
    if val_data is not None and len(val_data):
        val_loader = torch.utils.data.DataLoader(val_data, batch_size=max(cfg.batch_size, 64))
    optimizer = torch.optim.SGD(model.head.parameters(), lr=cfg.learning_rate,
                                momentum=cfg.momentum, nesterov=False, weight_decay=0.0)
    rows = []
    for epoch in range(1, cfg.epochs + 1):
        if hasattr(data, "set_epoch"):
            data.set_epoch(epoch)
        rows.append(_run_epoch(model, loader, optimizer, epoch, "train"))
        if val_loader is not None:
            with torch.no_grad():
                rows.append(_run_epoch(model, val_loader, None, epoch, "val"))
        if callback is not None:
            callback(epoch, model, rows)
    model.train_config = cfg.to_dict()
    return model, rows


def slice_head(model, num_rows=2):
    """Model whose head is the first ``num_rows`` rows of ``model``'s head.

    The backbone module is shared, not copied.
    """
    if model.num_classes < num_rows:
        raise ValidationError(f"cannot slice {num_rows} rows from a {model.num_classes}-class head")
    sliced = copy.copy(model)
    sliced._modules = model._modules.copy()
    sliced._parameters = model._parameters.copy()
    sliced._buffers = model._buffers.copy()
    head = LinearHead(model.feature_dim, num_rows)
    with torch.no_grad():
        head.weight.copy_(model.head.weight[:num_rows])
        head.bias.copy_(model.head.bias[:num_rows])
    sliced.head = head
    return sliced


# checkpoints -----------------------------------------------------------------
#
# layout, all little-endian:
#   8 bytes   magic b"ADVDCKPT"
#   uint32    format version
#   uint32    header length H
#   H bytes   UTF-8 JSON header
#   float32   head weight, num_classes x feature_dim, row-major
#   float32   head bias, num_classes
#   tensors   embedded backbone tensors in header order (tiny-cnn, or
#             ResNets without named pretrained weights)

CHECKPOINT_MAGIC = b"ADVDCKPT"
CHECKPOINT_VERSION = 1
_DTYPES = {"float32": (torch.float32, "<f4", 4), "int64": (torch.int64, "<i8", 8)}


def checkpoint_header(model, extra=None):
    embedded = model.pretrained is None
    tensors = []
    if embedded:
        for name, t in model.backbone.state_dict().items():
            dtype = "int64" if t.dtype == torch.int64 else "float32"
            tensors.append([name, list(t.shape), dtype])
    header = {
        "backbone_id": model.backbone_id,
        "num_classes": model.num_classes,
        "feature_dim": model.feature_dim,
        "in_channels": model.in_channels,
        "input_size": model.input_size,
        "dense": model.dense,
        "widths": list(model.widths),
        "norm": model.norm.to_dict(),
        "train_config": model.train_config,
        "backbone_weights": "embedded" if embedded else str(model.pretrained),
        "backbone_tensors": tensors,
    }
    if extra:
        header["extra"] = extra
    return header


def save_checkpoint(model, path, extra=None):
    header = json.dumps(checkpoint_header(model, extra), sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(header)), header]
    parts.append(model.head.weight.detach().numpy().astype("<f4").tobytes())
    parts.append(model.head.bias.detach().numpy().astype("<f4").tobytes())
    if model.pretrained is None:
        for _, t in model.backbone.state_dict().items():
            code = "<i8" if t.dtype == torch.int64 else "<f4"
            parts.append(t.detach().contiguous().numpy().astype(code).tobytes())
    Path(path).write_bytes(b"".join(parts))


def _expected_backbone_shapes(header):
    probe = ClassifierModel(header["backbone_id"], 1, header["feature_dim"], in_channels=header["in_channels"],
                            input_size=header["input_size"], widths=tuple(header.get("widths", (16, 32))))
    return {k: list(v.shape) for k, v in probe.backbone.state_dict().items()}


def load_checkpoint(path, expected_backbone=None):
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint ({exc.strerror})", path) from None
    if len(blob) < 16 or blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)", path, CHECKPOINT_VERSION)
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported format version {version}", path, CHECKPOINT_VERSION)
    try:
        header = json.loads(blob[16:16 + hlen].decode())
        backbone_id = header["backbone_id"]
        k, d = int(header["num_classes"]), int(header["feature_dim"])
        norm = NormSpec(**header["norm"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt header ({exc})", path, CHECKPOINT_VERSION) from None
    if backbone_id not in BACKBONES:
        raise CheckpointError(f"unknown backbone_id {backbone_id!r}", path, CHECKPOINT_VERSION)
    if expected_backbone is not None and backbone_id != expected_backbone:
        raise CheckpointError(f"checkpoint holds {backbone_id}, expected {expected_backbone}", path)

    tensors = header.get("backbone_tensors", [])
    embedded = header.get("backbone_weights") == "embedded"
    if embedded:
        try:
            expected = _expected_backbone_shapes(header)
        except ValidationError as exc:
            raise CheckpointError(str(exc), path) from None
        declared = {name: shape for name, shape, _ in tensors}
        if declared != expected:
            raise CheckpointError(f"backbone tensors do not match a {backbone_id} backbone", path,
                                  CHECKPOINT_VERSION)
    size = 16 + hlen + 4 * (k * d + k)
    size += sum(int(np.prod(shape)) * _DTYPES[dt][2] for _, shape, dt in tensors)
    if len(blob) != size:
        raise CheckpointError(f"truncated or padded file: {len(blob)} bytes, layout needs {size}", path,
                              CHECKPOINT_VERSION)

    offset = 16 + hlen
    weight = np.frombuffer(blob, "<f4", k * d, offset).reshape(k, d)
    offset += 4 * k * d
    bias = np.frombuffer(blob, "<f4", k, offset)
    offset += 4 * k
    pretrained = None if embedded else header.get("backbone_weights")
    try:
        model = ClassifierModel(backbone_id, k, d, in_channels=header["in_channels"],
                                input_size=header["input_size"], norm=norm, dense=header.get("dense", False),
                                widths=tuple(header.get("widths", (16, 32))), pretrained=pretrained)
    except Exception as exc:  # torchvision weight download or construction failure
        raise CheckpointError(f"cannot build backbone ({exc})", path) from None
    if embedded:
        state = {}
        for name, shape, dt in tensors:
            torch_dtype, code, width = _DTYPES[dt]
            n = int(np.prod(shape))
            arr = np.frombuffer(blob, code, n, offset).reshape(shape)
            state[name] = torch.from_numpy(np.array(arr, dtype=arr.dtype.newbyteorder("="))).to(torch_dtype)
            offset += n * width
        model.backbone.load_state_dict(state)
    with torch.no_grad():
        model.head.weight.copy_(torch.from_numpy(weight.astype(np.float32)))
        model.head.bias.copy_(torch.from_numpy(bias.astype(np.float32)))
    model.train_config = header.get("train_config", {})
    model.freeze_backbone()
    model.eval()
    return model


def read_checkpoint_header(path):
    blob = Path(path).read_bytes()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)", path, CHECKPOINT_VERSION)
    _, hlen = struct.unpack("<II", blob[8:16])
    return json.loads(blob[16:16 + hlen].decode()), 16 + hlen
