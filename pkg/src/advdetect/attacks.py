"""FGSM adversarial examples and the epsilon-sweep degradation driver.

Epsilon is an L-inf budget in [0, 1] pixel units. Inputs live in
normalized space, so the step on channel c is ``epsilon / std[c]``.
"""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import torch
import torch.nn.functional as F

from . import segmetrics
from .errors import ValidationError
from .pipeline import NormSpec, TensorImage
from .segmetrics import IGNORE_LABEL, ConfusionMatrix, MetricBundle

DEFAULT_EPS_GRID = (0.0, 0.02, 0.04, 0.05, 0.06, 0.07, 0.08, 0.09, 0.10)
SWEEP_HEADER = ["epsilon", "pixel_acc", "mIoU", "PA", "mAcc", "mIoU_agg", "mF1"]


@dataclass(frozen=True)
class AttackSpec:
    method: str = "fgsm"
    epsilon: float = 0.0
    loss_target: str = "true_label"
    clamp: bool = True

    def __post_init__(self):
        if self.method != "fgsm":
            raise ValidationError(f"unsupported attack method {self.method!r}")
        if not self.epsilon >= 0:
            raise ValidationError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.loss_target not in ("true_label", "predicted_label"):
            raise ValidationError(f"loss_target must be true_label or predicted_label, got {self.loss_target!r}")


@dataclass
class AdversarialPair:
    clean: TensorImage
    adversarial: TensorImage
    epsilon: float
    linf_achieved: float
    label_used: object
    zero_gradient: bool = False


def _loss(model, logits, y):
    if model.dense:
        # mean CE over the non-ignore pixels of each image, summed over the batch
        per_pixel = F.cross_entropy(logits, y, ignore_index=IGNORE_LABEL, reduction="none")
        valid = (y != IGNORE_LABEL).flatten(1).sum(1).clamp(min=1)
        return (per_pixel.flatten(1).sum(1) / valid).sum()
    return F.cross_entropy(logits, y, reduction="sum")


def input_gradient(model, x, y):
    """Gradient of the attack loss w.r.t. a normalized input batch."""
    x = x.detach().clone().requires_grad_(True)
    model.eval()
    logits, _ = model(x)
    (grad,) = torch.autograd.grad(_loss(model, logits, y), x)
    return grad


def _targets(model, x, y, loss_target):
    if loss_target == "predicted_label" or y is None:
        with torch.no_grad():
            logits, _ = model(x)
        return logits.argmax(1)
    return torch.as_tensor(y, dtype=torch.long)


def _pixel_bounds(norm, dtype):
    mean, std = norm.mean_tensor(dtype), norm.std_tensor(dtype)
    return (0.0 - mean) / std, (1.0 - mean) / std


def fgsm_batch(model, x, y, spec: AttackSpec, norm: Optional[NormSpec] = None):
    """Perturb a normalized N x C x H x W batch.

    Returns ``(x_adv, labels_used, zero_gradient)`` where ``zero_gradient``
    is a bool tensor marking images whose gradient vanished everywhere.
    """
    norm = norm or model.norm
    labels = _targets(model, x, y, spec.loss_target)
    if spec.epsilon == 0:
        return x.clone(), labels, torch.zeros(x.shape[0], dtype=torch.bool)
    grad = input_gradient(model, x, labels)
    zero = (grad.flatten(1) == 0).all(1)
    step = spec.epsilon / norm.std_tensor(x.dtype)
    x_adv = x + step * grad.sign()
    if spec.clamp:
        lo, hi = _pixel_bounds(norm, x.dtype)
        x_adv = torch.maximum(torch.minimum(x_adv, hi), lo)
    return x_adv.detach(), labels, zero


def pixel_linf(a, b, norm):
    """Max absolute difference of two normalized tensors, measured in pixel units."""
    diff = (a - b) * norm.std_tensor(a.dtype)
    return float(diff.abs().max()) if diff.numel() else 0.0


def fgsm(model, x: TensorImage, y, spec: AttackSpec) -> AdversarialPair:
    """One-step sign-gradient attack on a single normalized image."""
    if not x.is_normalized:
        raise ValidationError("fgsm expects a normalized TensorImage")
    if y is not None and not model.dense and not 0 <= int(y) < model.num_classes:
        raise ValidationError(f"label {y} outside [0, {model.num_classes - 1}]")
    batch = x.data.unsqueeze(0)
    yb = None if y is None else torch.as_tensor(y, dtype=torch.long).unsqueeze(0)
    adv, labels, zero = fgsm_batch(model, batch, yb, spec, x.norm)
    adv_img = TensorImage(adv[0], x.norm, True)
    label = labels[0]
    return AdversarialPair(
        clean=x,
        adversarial=adv_img,
        epsilon=spec.epsilon,
        linf_achieved=pixel_linf(adv[0], x.data, x.norm),
        label_used=int(label) if label.ndim == 0 else label.numpy(),
        zero_gradient=bool(zero[0]),
    )


# epsilon sweep ---------------------------------------------------------------

@dataclass
class SweepRow:
    epsilon: float
    pixel_acc: float
    mIoU: float
    PA: float
    mAcc: float
    mIoU_agg: float
    mF1: float
    lost_classes: set = field(default_factory=set)

    def as_row(self):
        return [_num(getattr(self, k)) for k in SWEEP_HEADER]

    @classmethod
    def from_bundle(cls, epsilon, bundle: MetricBundle):
        # pixel_acc and PA are one quantity written to both columns
        return cls(epsilon, bundle.pixel_acc, bundle.miou, bundle.pixel_acc, bundle.macc,
                   bundle.miou_agg, bundle.dice_f1, set(bundle.lost_classes))


def _num(v):
    return "nan" if isinstance(v, float) and math.isnan(v) else repr(float(v))


@dataclass
class PairRecord:
    index: int
    epsilon: float
    linf: float
    flipped: bool
    zero_gradient: bool
    path: str = ""


def _check_grid(eps_list):
    eps = [float(e) for e in eps_list]
    if not eps:
        raise ValidationError("epsilon grid is empty")
    if eps[0] != 0.0:
        raise ValidationError("epsilon grid must start at 0.0")
    if any(b <= a for a, b in zip(eps, eps[1:])):
        raise ValidationError(f"epsilon grid must be strictly ascending, got {eps}")
    return eps


def _stack(dataset, start, stop):
    xs, ys = [], []
    for i in range(start, stop):
        x, y = dataset[i]
        xs.append(x.data if isinstance(x, TensorImage) else x)
        ys.append(torch.as_tensor(y, dtype=torch.long))
    return torch.stack(xs), torch.stack(ys)


def _as_maps(pred, dense):
    pred = pred.numpy()
    return [p if dense else p.reshape(1, 1) for p in pred]


def _predict(model, x):
    with torch.no_grad():
        logits, _ = model(x)
    return logits.argmax(1)


def _sweep_batch(model, dataset, start, stop, eps, spec_kw, baseline, norm):
    x, y = _stack(dataset, start, stop)
    base = _predict(model, x)
    truth = base if baseline == "predictions" else y
    out = []
    for e in eps:
        spec = AttackSpec(epsilon=e, **spec_kw)
        adv, _, zero = fgsm_batch(model, x, y, spec, norm)
        pred = _predict(model, adv)
        linf = ((adv - x) * norm.std_tensor(x.dtype)).abs().flatten(1).max(1).values
        flipped = (pred != base).reshape(pred.shape[0], -1).any(1)
        records = [PairRecord(start + i, e, float(linf[i]), bool(flipped[i]), bool(zero[i]))
                   for i in range(x.shape[0])]
        out.append((_as_maps(truth, model.dense), _as_maps(pred, model.dense),
                    _as_maps(base, model.dense), records))
    return out


def epsilon_sweep(model, dataset, eps_list=DEFAULT_EPS_GRID, baseline="predictions",
                  loss_target="true_label", clamp=True, batch_size=64, workers=1, records=None,
                  bundles=None):
    """One SweepRow per epsilon.

    ``dataset[i]`` yields ``(x, y)`` with ``x`` a normalized C x H x W tensor
    and ``y`` a class id (classification) or an H x W label map (dense model).
    With ``baseline="predictions"`` the clean-input predictions are the
    reference, so the epsilon = 0 row is all ones. Batches are fixed
    before sharding across ``workers``, so outputs do not depend on the
    worker count. Per-image ``PairRecord``s are appended to ``records``
    and ``(epsilon, aggregate ConfusionMatrix, MetricBundle)`` triples to
    ``bundles`` when lists are supplied.
    """
    if baseline not in ("predictions", "ground_truth"):
        raise ValidationError(f"baseline must be predictions or ground_truth, got {baseline!r}")
    eps = _check_grid(eps_list)
    n = len(dataset)
    if n == 0:
        raise ValidationError("sweep dataset is empty")
    spec_kw = {"loss_target": loss_target, "clamp": clamp}
    model.eval()
    norm = model.norm
    bounds = [(s, min(s + batch_size, n)) for s in range(0, n, batch_size)]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda b: _sweep_batch(model, dataset, *b, eps, spec_kw, baseline, norm),
                                  bounds))
    else:
        parts = [_sweep_batch(model, dataset, *b, eps, spec_kw, baseline, norm) for b in bounds]

    k = model.num_classes
    rows = []
    for j, e in enumerate(eps):
        aggregate = ConfusionMatrix(k)
        per_image, base_maps, adv_maps = [], [], []
        for part in parts:
            truth, pred, base, recs = part[j]
            shard = ConfusionMatrix(k)
            for t, p in zip(truth, pred):
                cm = ConfusionMatrix(k).update(p, t)
                per_image.append(cm)
                shard = shard.merge(cm)
            aggregate = aggregate.merge(shard)
            base_maps.extend(base)
            adv_maps.extend(pred)
            if records is not None:
                records.extend(recs)
        lost = segmetrics.lost_classes(base_maps, adv_maps)
        bundle = MetricBundle.from_confusion(aggregate, per_image, lost)
        rows.append(SweepRow.from_bundle(e, bundle))
        if bundles is not None:
            bundles.append((e, aggregate, bundle))
    return rows


def write_sweep_csv(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SWEEP_HEADER)
        for r in rows:
            w.writerow(r.as_row())


def read_sweep_csv(path):
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != SWEEP_HEADER:
            raise ValidationError(f"{path}: sweep header {header} != {SWEEP_HEADER}")
        rows = []
        for line in reader:
            if len(line) != len(SWEEP_HEADER):
                raise ValidationError(f"{path}: row {line} has {len(line)} fields")
            rows.append(SweepRow(*map(float, line)))
    return rows


def write_pair_records(records, path):
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps({"index": r.index, "path": r.path, "epsilon": r.epsilon, "linf": r.linf,
                                "flipped": r.flipped, "zero_gradient": r.zero_gradient}) + "\n")


def write_lost_classes(rows, path):
    payload = [{"epsilon": r.epsilon, "lost_classes": sorted(int(c) for c in r.lost_classes)} for r in rows]
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def reference_sweep():
    """Bundled reference degradation trend, for exercising report rendering only."""
    with resources.files("advdetect").joinpath("data/reference_sweep.csv").open() as f:
        reader = csv.reader(f)
        header = next(reader)
        assert header == SWEEP_HEADER
        return [SweepRow(*map(float, line)) for line in reader]
