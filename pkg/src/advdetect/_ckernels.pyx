# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops for scoring and confusion tallies.

Every function here has a drop-in twin in ``_pykernels``; the two are
interchangeable and tested against each other.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()


def confusion_counts(const long long[::1] truth, const long long[::1] pred,
                     Py_ssize_t num_classes, long long ignore_value):
    """Tally a K x K confusion matrix (rows = truth) and the ignored count."""
    cdef Py_ssize_t n = truth.shape[0]
    cdef Py_ssize_t i
    cdef long long t, p
    cdef long long ignored = 0
    if pred.shape[0] != n:
        raise ValueError("truth and pred must have the same length")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    cdef long long[:, ::1] c = counts
    for i in range(n):
        t = truth[i]
        if t == ignore_value:
            ignored += 1
            continue
        p = pred[i]
        if t < 0 or t >= num_classes:
            raise ValueError(f"truth label {t} outside [0, {num_classes - 1}]")
        if p < 0 or p >= num_classes:
            raise ValueError(f"predicted label {p} outside [0, {num_classes - 1}]")
        c[t, p] += 1
    return counts, ignored


def rbf_density(const double[:, ::1] queries, const double[:, ::1] refs,
                double bandwidth):
    """Sum of exp(-|r - q|^2 / (2 h^2)) over reference rows, per query row."""
    cdef Py_ssize_t n = queries.shape[0]
    cdef Py_ssize_t m = refs.shape[0]
    cdef Py_ssize_t d = queries.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double acc, dist, diff
    cdef double inv = 1.0 / (2.0 * bandwidth * bandwidth)
    if refs.shape[1] != d:
        raise ValueError("query and reference dimensions differ")
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    for i in range(n):
        acc = 0.0
        for j in range(m):
            dist = 0.0
            for k in range(d):
                diff = refs[j, k] - queries[i, k]
                dist += diff * diff
            acc += exp(-dist * inv)
        o[i] = acc
    return out


def non_max_entropy(const double[:, ::1] probs):
    """Row-wise sum of p log p over every entry except the first argmax."""
    cdef Py_ssize_t n = probs.shape[0]
    cdef Py_ssize_t k = probs.shape[1]
    cdef Py_ssize_t i, j, top
    cdef double best, acc, p
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    for i in range(n):
        top = 0
        best = probs[i, 0]
        for j in range(1, k):
            if probs[i, j] > best:
                best = probs[i, j]
                top = j
        acc = 0.0
        for j in range(k):
            p = probs[i, j]
            if j != top and p > 0.0:
                acc += p * log(p)
        o[i] = acc
    return out
