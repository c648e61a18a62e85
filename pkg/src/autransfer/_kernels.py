"""Counting kernels behind the metrics and threshold search.

Two implementations exist for each kernel: a numba ``@njit`` loop and a
vectorised numpy version. Set ``AUTRANSFER_DISABLE_NUMBA=1`` (or run without
numba installed) to force the numpy path. Both produce identical integer
tallies, so downstream floats are identical too.
"""

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("AUTRANSFER_DISABLE_NUMBA", "") not in ("1", "true", "yes")


# ---------------------------------------------------------------------------
# numpy fallbacks
# ---------------------------------------------------------------------------


def confusion_counts_numpy(pred, labels):
    pred = pred.astype(bool)
    labels = labels.astype(bool)
    tp = np.sum(pred & labels, axis=0)
    fp = np.sum(pred & ~labels, axis=0)
    fn = np.sum(~pred & labels, axis=0)
    tn = np.sum(~pred & ~labels, axis=0)
    return np.stack([tp, fp, fn, tn], axis=1).astype(np.int64)


def grid_counts_numpy(scores, labels, grid):
    # (N, A, G) comparison cube; fine at the sizes calibration sees
    pos = labels.astype(bool)[:, :, None]
    hit = scores[:, :, None] >= grid[None, None, :]
    tp = np.sum(hit & pos, axis=0)
    fp = np.sum(hit & ~pos, axis=0)
    fn = np.sum(~hit & pos, axis=0)
    return np.stack([tp, fp, fn], axis=2).astype(np.int64)


def apply_thresholds_numpy(scores, thresholds):
    return (scores >= thresholds[None, :]).astype(np.int8)


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def confusion_counts_numba(pred, labels):
        n, a = pred.shape
        out = np.zeros((a, 4), dtype=np.int64)
        for i in range(n):
            for j in range(a):
                p = pred[i, j] != 0
                y = labels[i, j] != 0
                if p and y:
                    out[j, 0] += 1
                elif p:
                    out[j, 1] += 1
                elif y:
                    out[j, 2] += 1
                else:
                    out[j, 3] += 1
        return out

    @njit(cache=True)
    def grid_counts_numba(scores, labels, grid):
        n, a = scores.shape
        g = grid.shape[0]
        out = np.zeros((a, g, 3), dtype=np.int64)
        for i in range(n):
            for j in range(a):
                s = scores[i, j]
                y = labels[i, j] != 0
                for t in range(g):
                    if s >= grid[t]:
                        if y:
                            out[j, t, 0] += 1
                        else:
                            out[j, t, 1] += 1
                    elif y:
                        out[j, t, 2] += 1
        return out

    @njit(cache=True)
    def apply_thresholds_numba(scores, thresholds):
        n, a = scores.shape
        out = np.zeros((n, a), dtype=np.int8)
        for i in range(n):
            for j in range(a):
                if scores[i, j] >= thresholds[j]:
                    out[i, j] = 1
        return out

else:  # pragma: no cover
    confusion_counts_numba = confusion_counts_numpy
    grid_counts_numba = grid_counts_numpy
    apply_thresholds_numba = apply_thresholds_numpy


def backend():
    return "numba" if USE_NUMBA else "numpy"


def confusion_counts(pred, labels):
    """Per-column (tp, fp, fn, tn) for two binary (N, A) arrays -> (A, 4) int64."""
    pred = np.ascontiguousarray(pred, dtype=np.int8)
    labels = np.ascontiguousarray(labels, dtype=np.int8)
    if USE_NUMBA:
        return confusion_counts_numba(pred, labels)
    return confusion_counts_numpy(pred, labels)


def grid_counts(scores, labels, grid):
    """(tp, fp, fn) for every column and every threshold -> (A, G, 3) int64."""
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.int8)
    grid = np.ascontiguousarray(grid, dtype=np.float64)
    if USE_NUMBA:
        return grid_counts_numba(scores, labels, grid)
    return grid_counts_numpy(scores, labels, grid)


def apply_thresholds(scores, thresholds):
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    thresholds = np.ascontiguousarray(thresholds, dtype=np.float64)
    if USE_NUMBA:
        return apply_thresholds_numba(scores, thresholds)
    return apply_thresholds_numpy(scores, thresholds)
