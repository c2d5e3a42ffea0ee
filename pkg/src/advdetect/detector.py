"""Detection statistics, reference sets, threshold calibration and ROC analysis.

All three scores are "higher means more normal": an input whose score is
at least the threshold is clean, anything below is flagged adversarial.
The non-maximal entropy is sum_{i != argmax} p_i ln p_i, which is <= 0 and
reaches 0 only for one-hot probabilities.
"""
from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
import torch

from . import kernels
from .errors import CheckpointError, UnknownClassError, ValidationError
from .models import FeatureVector, ProbVector, forward_batch
from .pipeline import TensorImage

METRICS = ("confidence", "non_me", "k_density")
MIN_CALIBRATION = 20


@dataclass
class ReferenceSet:
    """Clean per-class feature banks backing the kernel density score."""

    per_class: Mapping[int, np.ndarray]
    bandwidth: float
    kernel: str = "rbf"

    def __post_init__(self):
        self.per_class = {int(c): np.atleast_2d(np.asarray(v, dtype=np.float64))
                          for c, v in sorted(self.per_class.items())}
        if self.kernel != "rbf":
            raise ValidationError(f"unsupported kernel {self.kernel!r}")
        if not self.bandwidth > 0 or not math.isfinite(self.bandwidth):
            raise ValidationError(f"bandwidth must be a positive finite number, got {self.bandwidth}")
        dims = {v.shape[1] for v in self.per_class.values()}
        if len(dims) > 1:
            raise ValidationError(f"reference vectors disagree on dimension: {sorted(dims)}")
        for c, v in self.per_class.items():
            if v.shape[0] < 1:
                raise ValidationError(f"class {c} has no reference vectors")

    @property
    def dim(self):
        return next(iter(self.per_class.values())).shape[1]

    @property
    def classes(self):
        return list(self.per_class)

    def vectors(self, class_id):
        try:
            return self.per_class[int(class_id)]
        except KeyError:
            raise UnknownClassError(class_id) from None


def median_bandwidth(per_class):
    """Median pairwise Euclidean distance within classes, pooled over classes."""
    dists = []
    for v in per_class.values():
        v = np.asarray(v, dtype=np.float64)
        if v.shape[0] < 2:
            continue
        diff = v[:, None, :] - v[None, :, :]
        d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        dists.append(d[np.triu_indices(v.shape[0], 1)])
    if not dists:
        return 1.0
    pooled = np.concatenate(dists)
    med = float(np.median(pooled))
    if med > 0:
        return med
    positive = pooled[pooled > 0]
    return float(positive.mean()) if positive.size else 1.0


def _reservoir(indices, cap, rng):
    chosen = list(indices[:cap])
    for seen, idx in enumerate(indices[cap:], start=cap):
        j = int(rng.integers(0, seen + 1))
        if j < cap:
            chosen[j] = idx
    return sorted(chosen)


def build_reference_set(features, labels, cap=200, seed=0, bandwidth=None):
    """Group clean features by label, reservoir-sampling at most ``cap`` per class.

    Features are rounded to float32 so the set survives a save/load cycle
    bit for bit. ``bandwidth=None`` selects the median heuristic.
    """
    features = np.asarray(features, dtype=np.float32).astype(np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 2 or features.shape[0] != labels.shape[0]:
        raise ValidationError("features must be N x D with one label per row")
    if features.shape[0] == 0:
        raise ValidationError("cannot build a reference set from no features")
    rng = np.random.default_rng(seed)
    per_class = {}
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if cap is not None and idx.size > cap:
            idx = np.asarray(_reservoir(idx, cap, rng))
        per_class[int(c)] = features[idx]
    bw = median_bandwidth(per_class) if bandwidth is None else float(bandwidth)
    return ReferenceSet(per_class, bw)


# reference-set file, little-endian:
#   8 bytes magic b"ADVDREFS", uint32 version, uint32 class count,
#   uint32 D, float64 bandwidth, uint32 kernel id (0 = rbf),
#   then per class: uint32 class id, uint32 count, count x D float32 row-major
REFSET_MAGIC = b"ADVDREFS"
REFSET_VERSION = 1
_KERNEL_IDS = {"rbf": 0}


def save_reference_set(ref, path):
    parts = [REFSET_MAGIC, struct.pack("<IIIdI", REFSET_VERSION, len(ref.per_class), ref.dim,
                                       ref.bandwidth, _KERNEL_IDS[ref.kernel])]
    for c, v in ref.per_class.items():
        parts.append(struct.pack("<II", c, v.shape[0]))
        parts.append(v.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_reference_set(path):
    path = Path(path)
    blob = path.read_bytes()
    head = struct.calcsize("<IIIdI")
    if len(blob) < 8 + head or blob[:8] != REFSET_MAGIC:
        raise CheckpointError("not a reference-set file (bad magic)", path, REFSET_VERSION)
    version, count, dim, bw, kid = struct.unpack_from("<IIIdI", blob, 8)
    if version != REFSET_VERSION:
        raise CheckpointError(f"unsupported reference-set version {version}", path, REFSET_VERSION)
    kernel = {v: k for k, v in _KERNEL_IDS.items()}.get(kid)
    if kernel is None:
        raise CheckpointError(f"unknown kernel id {kid}", path, REFSET_VERSION)
    offset = 8 + head
    per_class = {}
    try:
        for _ in range(count):
            c, n = struct.unpack_from("<II", blob, offset)
            offset += 8
            per_class[c] = np.frombuffer(blob, "<f4", n * dim, offset).reshape(n, dim).astype(np.float64)
            offset += 4 * n * dim
    except (struct.error, ValueError):
        raise CheckpointError("truncated reference-set file", path, REFSET_VERSION) from None
    if offset != len(blob):
        raise CheckpointError("trailing bytes after reference-set body", path, REFSET_VERSION)
    return ReferenceSet(per_class, bw, kernel)


# scores ----------------------------------------------------------------------

def _probs(p):
    if isinstance(p, ProbVector):
        return p.p
    return np.asarray(p, dtype=np.float64)


def confidence_score(p):
    return float(_probs(p).max())


def non_max_entropy(p):
    return float(kernels.non_max_entropy(_probs(p))[0])


def kernel_density(z, predicted_class, ref: ReferenceSet):
    """Sum over the class bank of exp(-|z_i - z|^2 / (2 h^2))."""
    z = z.z if isinstance(z, FeatureVector) else np.asarray(z, dtype=np.float64)
    return float(kernels.rbf_density(z, ref.vectors(predicted_class), ref.bandwidth)[0])


def kernel_density_batch(features, predicted, ref: ReferenceSet):
    features = np.asarray(features, dtype=np.float64)
    predicted = np.asarray(predicted, dtype=np.int64)
    out = np.empty(features.shape[0])
    for c in np.unique(predicted):
        rows = np.flatnonzero(predicted == c)
        out[rows] = kernels.rbf_density(features[rows], ref.vectors(c), ref.bandwidth)
    return out


@dataclass
class DetectionScores:
    confidence: float
    non_me: float
    k_density: float
    predicted_class: int

    def get(self, metric):
        if metric not in METRICS:
            raise ValidationError(f"unknown metric {metric!r}; choose from {METRICS}")
        return getattr(self, metric)


def score_batch(model, x, ref: Optional[ReferenceSet] = None, batch_size=256):
    """All three scores for a normalized N x C x H x W batch.

    Returns a dict of numpy arrays keyed by metric name plus ``predicted``
    and ``features``. ``k_density`` is omitted when ``ref`` is None.
    """
    logits, z = forward_batch(model, x, batch_size)
    probs = torch.softmax(logits.double(), dim=1).numpy()
    predicted = logits.argmax(1).numpy()
    out = {
        "predicted": predicted,
        "features": z.numpy(),
        "confidence": probs.max(axis=1),
        "non_me": kernels.non_max_entropy(probs),
    }
    if ref is not None:
        out["k_density"] = kernel_density_batch(out["features"], predicted, ref)
    return out


# thresholds ------------------------------------------------------------------

@dataclass(frozen=True)
class ThresholdPolicy:
    metric: str
    T: float
    target_fpr: float = 0.05
    calibration_set_size: int = 0

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValidationError(f"unknown metric {self.metric!r}; choose from {METRICS}")

    def verdict(self, score):
        return "clean" if score >= self.T else "adversarial"

    def flags(self, scores):
        """Boolean array, True where the input is flagged adversarial."""
        return np.asarray(scores, dtype=np.float64) < self.T

    def to_dict(self):
        return {"metric": self.metric, "T": self.T, "target_fpr": self.target_fpr,
                "calibration_set_size": self.calibration_set_size}


def calibrate_threshold(clean_scores, target_fpr=0.05, metric="k_density"):
    """Lower-tail ``target_fpr`` quantile of clean scores (linear interpolation)."""
    scores = np.asarray(clean_scores, dtype=np.float64).ravel()
    if scores.size < MIN_CALIBRATION:
        raise ValidationError(
            f"calibration needs at least {MIN_CALIBRATION} clean scores, got {scores.size}"
        )
    if not 0 < target_fpr < 1:
        raise ValidationError(f"target_fpr must lie in (0, 1), got {target_fpr}")
    if not np.isfinite(scores).all():
        raise ValidationError("calibration scores must be finite")
    T = float(np.quantile(scores, target_fpr, method="linear"))
    return ThresholdPolicy(metric, T, float(target_fpr), int(scores.size))


@dataclass
class DetectionReport:
    scores: DetectionScores
    policy: ThresholdPolicy
    verdict: str
    margin: float
    path: str = ""

    def to_dict(self):
        return {
            "path": self.path,
            "predicted_class": int(self.scores.predicted_class),
            "confidence": float(self.scores.confidence),
            "non_me": float(self.scores.non_me),
            "k_density": float(self.scores.k_density),
            "metric": self.policy.metric,
            "threshold": float(self.policy.T),
            "verdict": self.verdict,
            "margin": float(self.margin),
        }


def make_report(scores: DetectionScores, policy: ThresholdPolicy, path=""):
    s = scores.get(policy.metric)
    margin = s - policy.T
    return DetectionReport(scores, policy, "clean" if margin >= 0 else "adversarial", margin, path)


def detect(x: TensorImage, model, ref: ReferenceSet, policy: ThresholdPolicy, path=""):
    if not x.is_normalized:
        raise ValidationError("detect expects a normalized TensorImage")
    s = score_batch(model, x.data.unsqueeze(0), ref)
    scores = DetectionScores(float(s["confidence"][0]), float(s["non_me"][0]),
                             float(s["k_density"][0]), int(s["predicted"][0]))
    return make_report(scores, policy, path)


def reports_from_batch(scored, policy, paths=None):
    n = len(scored["predicted"])
    paths = paths or [""] * n
    kd = scored.get("k_density", np.full(n, np.nan))
    return [make_report(DetectionScores(float(scored["confidence"][i]), float(scored["non_me"][i]),
                                        float(kd[i]), int(scored["predicted"][i])), policy, paths[i])
            for i in range(n)]


def write_reports_jsonl(reports, path):
    with open(path, "w") as f:
        for r in reports:
            f.write(json.dumps(r.to_dict()) + "\n")


# ROC -------------------------------------------------------------------------

def _midranks(values):
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auroc(clean_scores, adversarial_scores):
    """P(clean score > adversarial score) + P(tie) / 2, via the rank-sum statistic."""
    clean = np.asarray(clean_scores, dtype=np.float64).ravel()
    adv = np.asarray(adversarial_scores, dtype=np.float64).ravel()
    if clean.size == 0 or adv.size == 0:
        raise ValidationError("both score sets must be non-empty")
    ranks = _midranks(np.concatenate([clean, adv]))
    u_clean = ranks[:clean.size].sum() - clean.size * (clean.size + 1) / 2.0
    return float(u_clean / (clean.size * adv.size))


def roc_points(clean_scores, adversarial_scores):
    """(fpr, tpr, threshold) for every distinct threshold, flagging score < threshold."""
    clean = np.sort(np.asarray(clean_scores, dtype=np.float64).ravel())
    adv = np.sort(np.asarray(adversarial_scores, dtype=np.float64).ravel())
    thresholds = np.unique(np.concatenate([clean, adv]))
    thresholds = np.append(thresholds, np.inf)
    fpr = np.searchsorted(clean, thresholds, side="left") / clean.size
    tpr = np.searchsorted(adv, thresholds, side="left") / adv.size
    return [(float(f), float(t), float(th)) for f, t, th in zip(fpr, tpr, thresholds)]


def evaluate_detector(clean_scores, adversarial_scores):
    return {"auroc": auroc(clean_scores, adversarial_scores),
            "roc_points": roc_points(clean_scores, adversarial_scores)}


def write_roc_csv(points, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["fpr", "tpr", "threshold"])
        for fpr, tpr, th in points:
            w.writerow([repr(fpr), repr(tpr), repr(th)])
