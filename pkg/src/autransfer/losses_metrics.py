"""Training losses and evaluation metrics.

The expression loss is softmax cross-entropy; the AU loss is per-AU binary
cross-entropy on sigmoid outputs, optionally up-weighting positives. Both
are fused ops: they compute a stable forward value and register a single
backward rule on the tape.

F1 is computed from integer counts as ``2tp / (2tp + fp + fn)``. That is
algebraically ``2PR / (P + R)`` with the 0/0 -> 0 convention, and because it
is a single correctly-rounded division of integers, equal F1 ratios always
give bit-equal floats (which the threshold search relies on for ties).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .diffcore import Tape, Tensor, custom_op, log_softmax_array, stable_sigmoid
from .errors import ContractError, DimensionError


def _softplus(z):
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def cross_entropy(logits: Tensor, labels, tape: Tape | None = None) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    z = logits.data
    if z.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be 2-d, got {logits.shape}")
    labels = np.asarray(labels)
    n, c = z.shape
    if labels.shape != (n,):
        raise DimensionError(f"cross_entropy: {labels.shape} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= c or not np.all(labels == np.round(labels))):
        raise ContractError(f"cross_entropy: labels must be class indices in [0, {c})")
    labels = labels.astype(np.int64)
    ls = log_softmax_array(z)
    rows = np.arange(n)
    value = -ls[rows, labels].mean()

    def rule(g):
        d = np.exp(ls)
        d[rows, labels] -= 1.0
        return (d * (float(g) / n),)

    return custom_op(np.array(value), (logits,), rule, tape)


def _check_binary(labels, name="labels"):
    labels = np.asarray(labels)
    if not np.all((labels == 0) | (labels == 1)):
        raise ContractError(f"{name} must be binary (0/1)")
    return labels.astype(np.float64)


def multi_label_loss(logits: Tensor, labels, pos_weights=None, tape: Tape | None = None) -> Tensor:
    """Mean binary cross-entropy over all (sample, AU) cells.

    Positive cells are scaled by ``pos_weights[j]`` when given; negatives
    always carry weight 1.
    """
    z = logits.data
    y = _check_binary(labels)
    if y.shape != z.shape or z.ndim != 2:
        raise DimensionError(f"multi_label_loss: logits {z.shape} vs labels {y.shape}")
    if pos_weights is None:
        w = np.ones(z.shape[1])
    else:
        w = np.asarray(pos_weights, dtype=np.float64)
        if w.shape != (z.shape[1],):
            raise DimensionError(f"pos_weights has shape {w.shape}, expected ({z.shape[1]},)")
        if np.any(w <= 0):
            raise ContractError("pos_weights must be positive")
    # -log sigmoid(z) = softplus(-z);  -log(1 - sigmoid(z)) = softplus(z)
    wpos = y * w[None, :]
    cell = wpos * _softplus(-z) + (1.0 - y) * _softplus(z)
    count = z.size
    value = cell.sum() / count

    def rule(g):
        s = stable_sigmoid(z)
        return ((wpos * (s - 1.0) + (1.0 - y) * s) * (float(g) / count),)

    return custom_op(np.array(value), (logits,), rule, tape)


def compute_pos_weights(labels) -> np.ndarray:
    """negatives / positives per AU; 1.0 where either count is zero."""
    y = _check_binary(labels)
    if y.ndim != 2 or y.shape[0] < 1:
        raise ContractError("compute_pos_weights needs a non-empty (N, A) label matrix")
    pos = y.sum(axis=0)
    neg = y.shape[0] - pos
    out = np.ones(y.shape[1])
    ok = (pos > 0) & (neg > 0)
    out[ok] = neg[ok] / pos[ok]
    return out


def accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.size == 0:
        raise ContractError("accuracy of an empty prediction set is undefined")
    if predictions.shape != labels.shape:
        raise DimensionError(f"accuracy: {predictions.shape} vs {labels.shape}")
    return float(np.mean(predictions == labels))


def _binary_pair(pred, labels):
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    if pred.shape != labels.shape or pred.ndim != 2:
        raise DimensionError(f"predictions {pred.shape} and labels {labels.shape} must be equal 2-d shapes")
    _check_binary(pred, "predictions")
    _check_binary(labels)
    return pred, labels


def confusion_counts(pred_binary, labels) -> np.ndarray:
    """(A, 4) integer array of per-AU (tp, fp, fn, tn)."""
    pred, labels = _binary_pair(pred_binary, labels)
    return _kernels.confusion_counts(pred, labels)


def f1_from_counts(tp, fp, fn):
    """Elementwise F1 from integer counts, 0 where tp == 0."""
    tp = np.asarray(tp, dtype=np.int64)
    denom = 2 * tp + np.asarray(fp, dtype=np.int64) + np.asarray(fn, dtype=np.int64)
    out = np.zeros(np.broadcast(tp, denom).shape)
    np.divide(2 * tp, denom, out=out, where=tp > 0)
    return out


def _ratio(num, den):
    return num / den if den else 0.0


@dataclass
class AUScore:
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float
    degenerate: bool = False


@dataclass
class MetricsReport:
    """Per-AU confusion/F1 summary.

    ``accuracy`` is the fraction of correct binary decisions over all cells.
    ``degenerate`` marks AUs with no positives in either predictions or
    labels, whose F1 is 0 by convention.
    """

    accuracy: float
    per_au: list[AUScore] = field(default_factory=list)
    macro_f1: float = 0.0

    @property
    def num_samples(self) -> int:
        a = self.per_au[0] if self.per_au else None
        return 0 if a is None else a.tp + a.fp + a.fn + a.tn

    def f1_vector(self) -> np.ndarray:
        return np.array([a.f1 for a in self.per_au])

    def to_kv(self, prefix: str = "") -> dict[str, str]:
        kv = {
            f"{prefix}accuracy": repr(self.accuracy),
            f"{prefix}macro_f1": repr(self.macro_f1),
            f"{prefix}num_samples": str(self.num_samples),
            f"{prefix}num_aus": str(len(self.per_au)),
        }
        for j, a in enumerate(self.per_au, start=1):
            key = f"{prefix}au{j:02d}"
            kv[f"{key}_tp"] = str(a.tp)
            kv[f"{key}_fp"] = str(a.fp)
            kv[f"{key}_fn"] = str(a.fn)
            kv[f"{key}_tn"] = str(a.tn)
            kv[f"{key}_precision"] = repr(a.precision)
            kv[f"{key}_recall"] = repr(a.recall)
            kv[f"{key}_f1"] = repr(a.f1)
            kv[f"{key}_degenerate"] = str(int(a.degenerate))
        return kv

    def to_text(self, prefix: str = "") -> str:
        return format_kv(self.to_kv(prefix))

    @classmethod
    def from_kv(cls, kv: dict[str, str], prefix: str = "") -> "MetricsReport":
        n_aus = int(kv[f"{prefix}num_aus"])
        per_au = []
        for j in range(1, n_aus + 1):
            key = f"{prefix}au{j:02d}"
            per_au.append(
                AUScore(
                    tp=int(kv[f"{key}_tp"]),
                    fp=int(kv[f"{key}_fp"]),
                    fn=int(kv[f"{key}_fn"]),
                    tn=int(kv[f"{key}_tn"]),
                    precision=float(kv[f"{key}_precision"]),
                    recall=float(kv[f"{key}_recall"]),
                    f1=float(kv[f"{key}_f1"]),
                    degenerate=bool(int(kv[f"{key}_degenerate"])),
                )
            )
        return cls(
            accuracy=float(kv[f"{prefix}accuracy"]),
            per_au=per_au,
            macro_f1=float(kv[f"{prefix}macro_f1"]),
        )


def f1_report(pred_binary, labels) -> MetricsReport:
    pred, labels = _binary_pair(pred_binary, labels)
    counts = _kernels.confusion_counts(pred, labels)
    f1 = f1_from_counts(counts[:, 0], counts[:, 1], counts[:, 2])
    per_au = []
    for j, (tp, fp, fn, tn) in enumerate(counts.tolist()):
        per_au.append(
            AUScore(
                tp=tp,
                fp=fp,
                fn=fn,
                tn=tn,
                precision=_ratio(tp, tp + fp),
                recall=_ratio(tp, tp + fn),
                f1=float(f1[j]),
                degenerate=(tp + fp + fn) == 0,
            )
        )
    total = counts.sum(axis=0)
    cells = int(total.sum())
    acc = (int(total[0]) + int(total[3])) / cells if cells else 0.0
    macro = float(np.mean(f1)) if len(f1) else 0.0
    return MetricsReport(accuracy=acc, per_au=per_au, macro_f1=macro)


def format_kv(kv: dict[str, str]) -> str:
    return "".join(f"{k}={v}\n" for k, v in kv.items())


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"not a key=value line: {line!r}")
        out[key.strip()] = value.strip()
    return out
