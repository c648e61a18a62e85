"""Synthetic AU/expression data, its text file format, and subject folds.

Each expression has a fixed multi-hot AU template. A sample takes its
expression's template, flips each AU bit with ``au_flip_prob``, and is
rendered as ``features = M @ intensity + subject_offset + noise``. Template
bits carry intensity 1; bits switched on by a flip get a uniform(0.5, 1)
intensity. ``M`` is a seeded Gaussian mixing matrix.

With no flips, no offset and no noise the features are an exact linear
function of the expression template, and the AU labels are a deterministic
function of the expression. Pretraining on expressions can then help AU
recognition.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DatasetFormatError

DATA_HEADER = "AUTRANSFER-DATA v1"

# Default AU order: AU1, AU2, AU4, AU6, AU7, AU10, AU12, AU15, AU23, AU24, AU25, AU26.
AU_NAMES = ("AU01", "AU02", "AU04", "AU06", "AU07", "AU10", "AU12", "AU15", "AU23", "AU24", "AU25", "AU26")
EXPRESSION_NAMES = ("anger", "disgust", "fear", "happiness", "sadness", "surprise")

# Prototype AU sets per expression, as column indices into AU_NAMES.
_DEFAULT_TEMPLATES = {
    "anger": (2, 4, 8, 9),  # AU4 AU7 AU23 AU24
    "disgust": (5, 7, 10),  # AU10 AU15 AU25
    "fear": (0, 1, 2, 4, 10, 11),  # AU1 AU2 AU4 AU7 AU25 AU26
    "happiness": (3, 6, 10),  # AU6 AU12 AU25
    "sadness": (0, 2, 7),  # AU1 AU4 AU15
    "surprise": (0, 1, 10, 11),  # AU1 AU2 AU25 AU26
}


def expression_templates(num_expressions: int = 6, num_aus: int = 12) -> np.ndarray:
    """(num_expressions, num_aus) 0/1 prototype table, fixed for given sizes.

    The default 6x12 table follows common FACS prototypes. Other sizes get a
    deterministic random table with distinct, non-empty rows.
    """
    if num_expressions == 6 and num_aus == 12:
        table = np.zeros((6, 12), dtype=np.int8)
        for k, name in enumerate(EXPRESSION_NAMES):
            table[k, list(_DEFAULT_TEMPLATES[name])] = 1
        return table
    if num_expressions > 2**num_aus - 1:
        raise ContractError(f"cannot build {num_expressions} distinct templates over {num_aus} AUs")
    rng = np.random.default_rng([num_expressions, num_aus, 7919])
    rows: list[tuple[int, ...]] = []
    while len(rows) < num_expressions:
        row = tuple(int(v) for v in (rng.random(num_aus) < 0.35))
        if any(row) and row not in rows:
            rows.append(row)
    return np.array(rows, dtype=np.int8)


@dataclass(frozen=True)
class GenConfig:
    num_subjects: int = 40
    samples_per_subject: int = 25
    num_expressions: int = 6
    num_aus: int = 12
    input_dim: int = 64
    noise_sigma: float = 0.3
    subject_offset_sigma: float = 0.5
    au_flip_prob: float = 0.05
    # expression prior p_k proportional to (k + 1) ** -imbalance_skew; 0 is uniform
    imbalance_skew: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.num_subjects < 1 or self.samples_per_subject < 1:
            raise ContractError("num_subjects and samples_per_subject must be >= 1")
        if self.num_expressions < 1 or self.num_aus < 1 or self.input_dim < 1:
            raise ContractError("num_expressions, num_aus and input_dim must be >= 1")
        if self.noise_sigma < 0 or self.subject_offset_sigma < 0 or self.imbalance_skew < 0:
            raise ContractError("sigmas and imbalance_skew must be >= 0")
        if not 0.0 <= self.au_flip_prob <= 1.0:
            raise ContractError("au_flip_prob must lie in [0, 1]")

    def expression_priors(self) -> np.ndarray:
        w = np.arange(1, self.num_expressions + 1, dtype=np.float64) ** -self.imbalance_skew
        return w / w.sum()


def _as_matrix(values, n, dtype):
    arr = np.asarray(values, dtype=dtype)
    if arr.ndim == 2 and arr.shape[0] == n:
        return arr
    if n == 0:
        return arr.reshape(0, 0)
    return arr.reshape(n, -1)


@dataclass
class Dataset:
    """Column-wise sample store.

    ``expression`` uses -1 for "no label"; ``au_labels`` rows of all -1 mean
    the AU labels are absent for that sample.
    """

    subject_ids: np.ndarray
    expression: np.ndarray
    au_labels: np.ndarray
    features: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.subject_ids = np.asarray(self.subject_ids, dtype=np.int64).reshape(-1)
        n = self.subject_ids.shape[0]
        self.expression = np.asarray(self.expression, dtype=np.int64).reshape(n)
        self.au_labels = _as_matrix(self.au_labels, n, np.int8)
        self.features = _as_matrix(self.features, n, np.float64)

    def __len__(self):
        return self.subject_ids.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_aus(self) -> int:
        return self.au_labels.shape[1]

    def has_expression(self) -> np.ndarray:
        return self.expression >= 0

    def has_au(self) -> np.ndarray:
        return np.all(self.au_labels >= 0, axis=1) if self.num_aus else np.zeros(len(self), bool)

    def subjects(self) -> np.ndarray:
        return np.unique(self.subject_ids)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            self.subject_ids[idx], self.expression[idx], self.au_labels[idx], self.features[idx], dict(self.meta)
        )

    def without_au(self) -> "Dataset":
        return Dataset(self.subject_ids, self.expression, np.full_like(self.au_labels, -1), self.features, dict(self.meta))

    def without_expression(self) -> "Dataset":
        return Dataset(self.subject_ids, np.full_like(self.expression, -1), self.au_labels, self.features, dict(self.meta))

    def equals(self, other: "Dataset") -> bool:
        return (
            np.array_equal(self.subject_ids, other.subject_ids)
            and np.array_equal(self.expression, other.expression)
            and np.array_equal(self.au_labels, other.au_labels)
            and self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
        )


def generate_synthetic(config: GenConfig) -> Dataset:
    rng = np.random.default_rng(config.seed)
    templates = expression_templates(config.num_expressions, config.num_aus)
    mixing = rng.standard_normal((config.input_dim, config.num_aus))
    offsets = rng.normal(0.0, config.subject_offset_sigma, size=(config.num_subjects, config.input_dim))
    priors = config.expression_priors()

    n = config.num_subjects * config.samples_per_subject
    subjects = np.repeat(np.arange(config.num_subjects), config.samples_per_subject)
    expression = rng.choice(config.num_expressions, size=n, p=priors)
    base = templates[expression]
    flips = rng.random((n, config.num_aus)) < config.au_flip_prob
    au = np.where(flips, 1 - base, base).astype(np.int8)
    intensity = np.where((au == 1) & (base == 0), rng.uniform(0.5, 1.0, size=au.shape), au.astype(np.float64))
    noise = rng.normal(0.0, config.noise_sigma, size=(n, config.input_dim))
    features = intensity @ mixing.T + offsets[subjects] + noise
    return Dataset(subjects, expression, au, features, meta={"seed": config.seed})


# ---------------------------------------------------------------------------
# text format
# ---------------------------------------------------------------------------


def dataset_text(ds: Dataset) -> str:
    lines = [f"{DATA_HEADER},{ds.input_dim},{ds.num_aus}"]
    for i in range(len(ds)):
        fields = [str(int(ds.subject_ids[i])), str(int(ds.expression[i]))]
        fields.extend(str(int(v)) for v in ds.au_labels[i])
        fields.extend(repr(float(v)) for v in ds.features[i])
        lines.append(",".join(fields))
    return "\n".join(lines) + "\n"


def write_dataset(ds: Dataset, path) -> None:
    with open(path, "w") as fh:
        fh.write(dataset_text(ds))


def parse_dataset(text: str) -> Dataset:
    lines = text.splitlines()
    if not lines:
        raise DatasetFormatError("missing header", line=1)
    head = lines[0].strip().split(",")
    if len(head) != 3 or head[0] != DATA_HEADER:
        raise DatasetFormatError(f"expected header '{DATA_HEADER},<input_dim>,<num_aus>'", line=1)
    try:
        input_dim, num_aus = int(head[1]), int(head[2])
    except ValueError:
        raise DatasetFormatError("header dimensions must be integers", line=1) from None
    width = 2 + num_aus + input_dim
    subj, expr, aus, feats = [], [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != width:
            raise DatasetFormatError(f"expected {width} fields (input_dim={input_dim}), got {len(parts)}", line=lineno)
        try:
            s = int(parts[0])
            e = int(parts[1])
            a = [int(v) for v in parts[2 : 2 + num_aus]]
            f = [float(v) for v in parts[2 + num_aus :]]
        except ValueError as exc:
            raise DatasetFormatError(str(exc), line=lineno) from None
        if s < 0 or e < -1:
            raise DatasetFormatError("subject id must be >= 0 and expression >= -1", line=lineno)
        missing = all(v == -1 for v in a)
        if not missing and any(v not in (0, 1) for v in a):
            raise DatasetFormatError("AU fields must be all 0/1 or all -1", line=lineno)
        if e == -1 and missing:
            raise DatasetFormatError("sample carries neither expression nor AU labels", line=lineno)
        subj.append(s)
        expr.append(e)
        aus.append(a)
        feats.append(f)
    return Dataset(
        np.array(subj, dtype=np.int64),
        np.array(expr, dtype=np.int64),
        np.array(aus, dtype=np.int8).reshape(len(subj), num_aus),
        np.array(feats, dtype=np.float64).reshape(len(subj), input_dim),
    )


def read_dataset(path) -> Dataset:
    with open(path) as fh:
        return parse_dataset(fh.read())


# ---------------------------------------------------------------------------
# subject-independent folds
# ---------------------------------------------------------------------------


@dataclass
class FoldSplit:
    fold_subjects: list[np.ndarray]
    train_indices: list[np.ndarray]
    val_indices: list[np.ndarray]

    @property
    def k(self) -> int:
        return len(self.fold_subjects)


def deal_subjects(subjects, k: int, seed: int) -> list[np.ndarray]:
    """Shuffle subject ids by ``seed`` and deal them round-robin into ``k`` folds."""
    subjects = np.unique(np.asarray(subjects))
    if k < 1:
        raise ContractError("k must be >= 1")
    if len(subjects) < k:
        raise ContractError(f"{len(subjects)} subjects cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(subjects)
    return [np.sort(order[i::k]) for i in range(k)]


def split_subject_folds(ds: Dataset, k: int, seed: int) -> FoldSplit:
    folds = deal_subjects(ds.subject_ids, k, seed)
    train, val = [], []
    for members in folds:
        in_fold = np.isin(ds.subject_ids, members)
        val.append(np.flatnonzero(in_fold))
        train.append(np.flatnonzero(~in_fold))
    return FoldSplit(folds, train, val)


def split_subjects(ds: Dataset, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Sample indices of a subject-disjoint (first, rest) split.

    ``fraction`` of the subjects (rounded, at least one on each side) go
    to the first part.
    """
    subjects = ds.subjects()
    if len(subjects) < 2:
        raise ContractError("need at least two subjects to split")
    order = np.random.default_rng(seed).permutation(subjects)
    n_first = min(max(int(round(fraction * len(subjects))), 1), len(subjects) - 1)
    first = np.isin(ds.subject_ids, order[:n_first])
    return np.flatnonzero(first), np.flatnonzero(~first)
