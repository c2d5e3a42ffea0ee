"""Numpy implementations of the compiled kernels in ``_ckernels``."""
import numpy as np

_CHUNK = 256


def confusion_counts(truth, pred, num_classes, ignore_value):
    truth = np.asarray(truth, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if truth.shape != pred.shape:
        raise ValueError("truth and pred must have the same length")
    keep = truth != ignore_value
    ignored = int(truth.size - keep.sum())
    t = truth[keep]
    p = pred[keep]
    if t.size and (t.min() < 0 or t.max() >= num_classes):
        bad = t[(t < 0) | (t >= num_classes)][0]
        raise ValueError(f"truth label {bad} outside [0, {num_classes - 1}]")
    if p.size and (p.min() < 0 or p.max() >= num_classes):
        bad = p[(p < 0) | (p >= num_classes)][0]
        raise ValueError(f"predicted label {bad} outside [0, {num_classes - 1}]")
    counts = np.bincount(t * num_classes + p, minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes).astype(np.int64), ignored


def rbf_density(queries, refs, bandwidth):
    queries = np.asarray(queries, dtype=np.float64)
    refs = np.asarray(refs, dtype=np.float64)
    if refs.shape[1] != queries.shape[1]:
        raise ValueError("query and reference dimensions differ")
    inv = 1.0 / (2.0 * bandwidth * bandwidth)
    out = np.empty(queries.shape[0], dtype=np.float64)
    for start in range(0, queries.shape[0], _CHUNK):
        q = queries[start:start + _CHUNK]
        diff = refs[None, :, :] - q[:, None, :]
        dist = np.einsum("nmd,nmd->nm", diff, diff)
        out[start:start + _CHUNK] = np.exp(-dist * inv).sum(axis=1)
    return out


def non_max_entropy(probs):
    probs = np.asarray(probs, dtype=np.float64)
    top = probs.argmax(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0, probs * np.log(probs), 0.0)
    terms[np.arange(probs.shape[0]), top] = 0.0
    return terms.sum(axis=1)
