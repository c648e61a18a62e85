"""Per-AU decision thresholds chosen to maximise F1 on held-out scores.

Macro-F1 is a plain mean of per-AU F1, so searching each AU on its own is
globally optimal. The grid must contain 0.5: the per-AU maximum can then
never fall below the default 0.5 cut, which makes calibrated macro-F1 at
least the uncalibrated one on the calibration set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import ContractError, DatasetFormatError, DimensionError
from .losses_metrics import f1_from_counts


def default_grid() -> np.ndarray:
    """0.05, 0.10, ..., 0.95 (19 points)."""
    return np.round(np.arange(1, 20) * 0.05, 10)


@dataclass
class ThresholdVector:
    thresholds: np.ndarray
    best_f1: np.ndarray = field(default=None, repr=False)
    degenerate: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.thresholds = np.asarray(self.thresholds, dtype=np.float64).reshape(-1)
        if not np.all((self.thresholds > 0) & (self.thresholds < 1)):
            raise ContractError("thresholds must lie strictly inside (0, 1)")

    def __len__(self):
        return self.thresholds.shape[0]

    def to_line(self) -> str:
        return ",".join(repr(float(t)) for t in self.thresholds)

    @classmethod
    def uniform(cls, num_aus: int, value: float = 0.5) -> "ThresholdVector":
        return cls(np.full(num_aus, value))

    @classmethod
    def from_line(cls, line: str) -> "ThresholdVector":
        try:
            values = [float(v) for v in line.strip().split(",")]
        except ValueError as exc:
            raise DatasetFormatError(f"bad threshold line: {exc}", line=1) from None
        try:
            return cls(np.array(values))
        except ContractError as exc:
            raise DatasetFormatError(str(exc), line=1) from None


def write_thresholds(tv: ThresholdVector, path) -> None:
    with open(path, "w") as fh:
        fh.write(tv.to_line() + "\n")


def read_thresholds(path) -> ThresholdVector:
    with open(path) as fh:
        text = fh.read().strip()
    if not text or "\n" in text:
        raise DatasetFormatError("threshold file must hold exactly one line")
    return ThresholdVector.from_line(text)


def _check_grid(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64).reshape(-1)
    if grid.size == 0:
        raise ContractError("threshold grid is empty")
    if not np.all((grid > 0) & (grid < 1)):
        raise ContractError("grid values must lie in (0, 1)")
    if np.any(np.diff(grid) <= 0):
        raise ContractError("grid must be strictly ascending")
    if not np.any(grid == 0.5):
        raise ContractError("grid must contain 0.5")
    return grid


def grid_f1(scores, labels, grid) -> np.ndarray:
    """(A, G) F1 of every AU at every grid threshold."""
    counts = _kernels.grid_counts(scores, labels, grid)
    return f1_from_counts(counts[..., 0], counts[..., 1], counts[..., 2])


def calibrate_thresholds(scores, labels, grid=None) -> ThresholdVector:
    """Per AU, the smallest grid value attaining the maximum F1."""
    grid = _check_grid(default_grid() if grid is None else grid)
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape != labels.shape:
        raise DimensionError(f"scores {scores.shape} and labels {labels.shape} must be equal 2-d shapes")
    if scores.shape[0] < 1:
        raise ContractError("calibration needs at least one sample")
    if not np.all((labels == 0) | (labels == 1)):
        raise ContractError("labels must be binary (0/1)")
    f1 = grid_f1(scores, labels, grid)
    # argmax returns the first (smallest-threshold) maximiser
    best = np.argmax(f1, axis=1)
    cols = np.arange(f1.shape[0])
    counts_pos = labels.sum(axis=0)
    return ThresholdVector(grid[best], best_f1=f1[cols, best], degenerate=counts_pos == 0)


def apply_thresholds(scores, tv) -> np.ndarray:
    """1 where score >= threshold, per AU column."""
    thresholds = tv.thresholds if isinstance(tv, ThresholdVector) else np.asarray(tv, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[1] != thresholds.shape[0]:
        raise DimensionError(f"scores {scores.shape} vs {thresholds.shape[0]} thresholds")
    return _kernels.apply_thresholds(scores, thresholds)


SCORES_HEADER = "AUTRANSFER-SCORES v1"


def scores_text(scores, labels=None) -> str:
    """Header ``AUTRANSFER-SCORES v1,<A>``, then per sample A scores and A labels (-1 if unknown)."""
    scores = np.asarray(scores, dtype=np.float64)
    n, a = scores.shape
    labels = np.full((n, a), -1, dtype=np.int64) if labels is None else np.asarray(labels, dtype=np.int64)
    lines = [f"{SCORES_HEADER},{a}"]
    for s_row, y_row in zip(scores, labels):
        lines.append(",".join([*(repr(float(v)) for v in s_row), *(str(int(v)) for v in y_row)]))
    return "\n".join(lines) + "\n"


def write_scores(path, scores, labels=None) -> None:
    with open(path, "w") as fh:
        fh.write(scores_text(scores, labels))


def read_scores(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path) as fh:
        lines = fh.read().splitlines()
    head = lines[0].split(",") if lines else []
    if len(head) != 2 or head[0] != SCORES_HEADER:
        raise DatasetFormatError(f"expected header '{SCORES_HEADER},<num_aus>'", line=1)
    try:
        a = int(head[1])
    except ValueError:
        raise DatasetFormatError("header AU count must be an integer", line=1) from None
    scores, labels = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 2 * a:
            raise DatasetFormatError(f"expected {2 * a} fields, got {len(parts)}", line=lineno)
        try:
            scores.append([float(v) for v in parts[:a]])
            labels.append([int(v) for v in parts[a:]])
        except ValueError as exc:
            raise DatasetFormatError(str(exc), line=lineno) from None
    return np.array(scores, dtype=np.float64).reshape(-1, a), np.array(labels, dtype=np.int64).reshape(-1, a)
