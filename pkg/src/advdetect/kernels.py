"""Backend selection for the hot scoring loops.

The compiled extension is used when it was built; otherwise the numpy
fallback is imported. Set ``ADVDETECT_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from . import _pykernels

if os.environ.get("ADVDETECT_PURE_PYTHON") == "1":
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        _impl = _pykernels

BACKEND = "cython" if _impl is not _pykernels else "python"


def confusion_counts(truth, pred, num_classes, ignore_value=255):
    """Return ``(counts, ignored)`` for flat integer label arrays."""
    truth = np.ascontiguousarray(truth, dtype=np.int64).ravel()
    pred = np.ascontiguousarray(pred, dtype=np.int64).ravel()
    return _impl.confusion_counts(truth, pred, int(num_classes), int(ignore_value))


def rbf_density(queries, refs, bandwidth):
    queries = np.ascontiguousarray(np.atleast_2d(queries), dtype=np.float64)
    refs = np.ascontiguousarray(np.atleast_2d(refs), dtype=np.float64)
    return _impl.rbf_density(queries, refs, float(bandwidth))


def non_max_entropy(probs):
    probs = np.ascontiguousarray(np.atleast_2d(probs), dtype=np.float64)
    return _impl.non_max_entropy(probs)


def backends():
    """Map backend name to module, for benchmarking and parity tests."""
    out = {"python": _pykernels}
    if _impl is not _pykernels:
        out["cython"] = _impl
    else:
        try:
            from . import _ckernels
            out["cython"] = _ckernels
        except ImportError:
            pass
    return out
