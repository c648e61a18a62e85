"""Two-stage training: expression pretraining, then AU fine-tuning.

Randomness is fanned out from ``TrainConfig.seed``: weight init uses the
seed directly (see :mod:`autransfer.model`), mini-batch shuffling uses the
stream ``[seed, 1, stage]`` and fold dealing uses the seed itself. The data
partition inside :func:`run_pipeline` is keyed on the generator seed.
"""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .calibration import ThresholdVector, apply_thresholds, calibrate_thresholds, default_grid
from .data import Dataset, GenConfig, generate_synthetic, split_subject_folds, split_subjects
from .diffcore import Tape, zero_grad
from .errors import ContractError
from .losses_metrics import (
    MetricsReport,
    accuracy,
    compute_pos_weights,
    cross_entropy,
    f1_report,
    format_kv,
    multi_label_loss,
)
from .model import (
    ModelConfig,
    ModelParameters,
    checkpoint_text,
    forward_au,
    forward_expression,
    forward_features,
    group_of,
    init_parameters,
    load_checkpoint,
    predict_au_scores,
    predict_expression,
    save_checkpoint,
    transfer_backbone,
)

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "RunRecord",
    "sgd_step",
    "train_stage_one",
    "train_stage_two",
    "cross_validate_stage_one",
    "run_pipeline",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class TrainConfig:
    epochs_stage1: int = 30
    epochs_stage2: int = 30
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    shuffle: bool = True
    pos_weighting: bool = False

    def __post_init__(self):
        if self.epochs_stage1 < 0 or self.epochs_stage2 < 0:
            raise ContractError("epoch counts must be >= 0")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ContractError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ContractError("momentum must lie in [0, 1)")


@dataclass
class RunRecord:
    """Everything a run produced, in a form that compares and dumps cleanly."""

    seed: int
    stage1_loss: list[float] = field(default_factory=list)
    stage2_loss: list[float] = field(default_factory=list)
    reports: dict[str, MetricsReport] = field(default_factory=dict)
    scalars: dict[str, float] = field(default_factory=dict)
    config: dict[str, str] = field(default_factory=dict)
    thresholds: ThresholdVector | None = None
    params: ModelParameters | None = field(default=None, repr=False, compare=False)

    def to_kv(self) -> dict[str, str]:
        kv = {"seed": str(self.seed)}
        kv.update({f"config.{k}": v for k, v in self.config.items()})
        for k, v in self.scalars.items():
            kv[k] = repr(v) if isinstance(v, float) else str(v)
        kv["stage1_epochs_run"] = str(len(self.stage1_loss))
        kv["stage2_epochs_run"] = str(len(self.stage2_loss))
        if self.stage1_loss:
            kv["stage1_final_loss"] = repr(self.stage1_loss[-1])
        if self.stage2_loss:
            kv["stage2_final_loss"] = repr(self.stage2_loss[-1])
        if self.thresholds is not None:
            kv["thresholds"] = self.thresholds.to_line()
        for name, report in self.reports.items():
            kv.update(report.to_kv(prefix=f"{name}."))
        return kv

    def to_text(self) -> str:
        return format_kv(self.to_kv())

    def loss_csv(self, stage: int) -> str:
        curve = self.stage1_loss if stage == 1 else self.stage2_loss
        return "epoch,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(curve, start=1))


def _config_echo(**configs) -> dict[str, str]:
    out = {}
    for prefix, cfg in configs.items():
        if cfg is None:
            continue
        for k, v in asdict(cfg).items():
            if isinstance(v, (tuple, list)):
                v = ",".join(str(x) for x in v)
            out[f"{prefix}.{k}"] = str(v)
    return out


def params_digest(params: ModelParameters) -> str:
    return hashlib.sha256(checkpoint_text(params).encode()).hexdigest()


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


def sgd_step(params: ModelParameters, learning_rate: float, momentum: float, velocity: dict) -> None:
    """Momentum SGD over trainable blocks: v <- m*v + g; p <- p - lr*v.

    ``velocity`` maps tensor names to buffers and is updated in place.
    Tensors without a gradient buffer are left alone.
    """
    for name, (w, b) in params.blocks.items():
        if not params.trainable.get(group_of(name), True):
            continue
        for t in (w, b):
            if t.grad is None:
                continue
            v = velocity.get(t.name)
            v = t.grad.copy() if v is None else momentum * v + t.grad
            velocity[t.name] = v
            t.data = t.data - learning_rate * v


def _run_epochs(params, n, config: TrainConfig, epochs: int, stage: int, loss_fn) -> list[float]:
    rng = np.random.default_rng([int(config.seed), 1, stage])
    velocity: dict = {}
    tensors = params.tensors()
    curve = []
    for epoch in range(epochs):
        order = rng.permutation(n) if config.shuffle else np.arange(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            zero_grad(tensors)
            with Tape() as tape:
                loss = loss_fn(idx, tape)
            tape.backward(loss)
            sgd_step(params, config.learning_rate, config.momentum, velocity)
            total += loss.item() * len(idx)
        curve.append(total / n)
        log.debug("stage %d epoch %d loss %.6f", stage, epoch + 1, curve[-1])
    return curve


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def train_stage_one(params: ModelParameters, dataset: Dataset, config: TrainConfig) -> RunRecord:
    """Fit backbone and expression head with cross-entropy on expression labels."""
    if len(dataset) == 0 or not np.all(dataset.has_expression()):
        raise ContractError("stage one needs an expression label on every sample")
    x, y = dataset.features, dataset.expression

    def loss_fn(idx, tape):
        logits = forward_expression(params, forward_features(params, x[idx], tape), tape)
        return cross_entropy(logits, y[idx], tape)

    curve = _run_epochs(params, len(dataset), config, config.epochs_stage1, 1, loss_fn)
    rec = RunRecord(seed=config.seed, stage1_loss=curve, config=_config_echo(train=config))
    rec.scalars["stage1_train_accuracy"] = accuracy(predict_expression(params, x), y)
    rec.params = params
    return rec


def train_stage_two(
    params: ModelParameters,
    dataset: Dataset,
    config: TrainConfig,
    validation: Dataset | None = None,
) -> RunRecord:
    """Fit the AU head (and the backbone unless frozen) with multi-label BCE."""
    if len(dataset) == 0 or not np.all(dataset.has_au()):
        raise ContractError("stage two needs AU labels on every sample")
    x, y = dataset.features, dataset.au_labels
    pos_weights = compute_pos_weights(y) if config.pos_weighting else None

    def loss_fn(idx, tape):
        logits = forward_au(params, forward_features(params, x[idx], tape), tape)
        return multi_label_loss(logits, y[idx], pos_weights, tape)

    curve = _run_epochs(params, len(dataset), config, config.epochs_stage2, 2, loss_fn)
    rec = RunRecord(seed=config.seed, stage2_loss=curve, config=_config_echo(train=config))
    if pos_weights is not None:
        rec.config["pos_weights"] = ",".join(repr(float(w)) for w in pos_weights)
    if validation is not None:
        if not np.all(validation.has_au()):
            raise ContractError("validation set needs AU labels on every sample")
        scores = predict_au_scores(params, validation.features)
        rec.reports["validation"] = f1_report(apply_thresholds(scores, ThresholdVector.uniform(scores.shape[1])), validation.au_labels)
    rec.params = params
    return rec


def _fold_accuracy(dataset, train_idx, val_idx, model_config, train_config):
    params = init_parameters(model_config, train_config.seed)
    train_stage_one(params, dataset.subset(train_idx), train_config)
    val = dataset.subset(val_idx)
    return accuracy(predict_expression(params, val.features), val.expression)


def cross_validate_stage_one(
    dataset: Dataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
    k: int = 5,
    fold_seed: int | None = None,
    workers: int = 1,
) -> list[float]:
    """Subject-independent k-fold accuracy of stage-one training.

    Every fold starts from the same initial weights. Folds share nothing
    mutable, so ``workers > 1`` runs them on a thread pool with identical
    results.
    """
    split = split_subject_folds(dataset, k, train_config.seed if fold_seed is None else fold_seed)
    jobs = list(zip(split.train_indices, split.val_indices))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_fold_accuracy, dataset, tr, va, model_config, train_config) for tr, va in jobs]
            return [f.result() for f in futures]
    return [_fold_accuracy(dataset, tr, va, model_config, train_config) for tr, va in jobs]


# ---------------------------------------------------------------------------
# end to end
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PipelineSplits:
    stage1: Dataset
    train: Dataset
    validation: Dataset
    calib_a: Dataset
    calib_b: Dataset


def make_pipeline_splits(
    ds: Dataset, data_seed: int, stage1_fraction=0.5, val_fraction=0.3, au_label_fraction=1.0
) -> PipelineSplits:
    """Partition a generated dataset by subject for the two stages.

    Stage-one subjects keep only expression labels; stage-two subjects keep
    only AU labels and are split into train / validation, with validation
    further halved into calibration parts A and B. ``au_label_fraction``
    keeps that share of the stage-two training samples.
    """
    if not 0 < au_label_fraction <= 1:
        raise ContractError("au_label_fraction must lie in (0, 1]")
    s1_idx, s2_idx = split_subjects(ds, stage1_fraction, [data_seed, 10])
    stage1 = ds.subset(s1_idx).without_au()
    stage2 = ds.subset(s2_idx).without_expression()
    val_idx, train_idx = split_subjects(stage2, val_fraction, [data_seed, 11])
    if au_label_fraction < 1:
        keep = max(1, int(round(au_label_fraction * len(train_idx))))
        pick = np.random.default_rng([data_seed, 12]).choice(len(train_idx), size=keep, replace=False)
        train_idx = train_idx[np.sort(pick)]
    validation = stage2.subset(val_idx)
    a_idx, b_idx = split_subjects(validation, 0.5, [data_seed, 13])
    return PipelineSplits(stage1, stage2.subset(train_idx), validation, validation.subset(a_idx), validation.subset(b_idx))


def _calibration_reports(params, splits: PipelineSplits, grid, rec: RunRecord) -> None:
    val = splits.validation
    scores = predict_au_scores(params, val.features)
    half = ThresholdVector.uniform(val.num_aus)
    pre = f1_report(apply_thresholds(scores, half), val.au_labels)
    tv = calibrate_thresholds(scores, val.au_labels, grid)
    post = f1_report(apply_thresholds(scores, tv), val.au_labels)
    rec.reports["validation_pre"] = pre
    rec.reports["validation_post"] = post
    rec.thresholds = tv
    rec.scalars["macro_f1_pre"] = pre.macro_f1
    rec.scalars["macro_f1_post"] = post.macro_f1

    # calibrate on part A, report on held-out part B
    sa = predict_au_scores(params, splits.calib_a.features)
    sb = predict_au_scores(params, splits.calib_b.features)
    tv_a = calibrate_thresholds(sa, splits.calib_a.au_labels, grid)
    b_pre = f1_report(apply_thresholds(sb, half), splits.calib_b.au_labels)
    b_post = f1_report(apply_thresholds(sb, tv_a), splits.calib_b.au_labels)
    rec.scalars["heldout_macro_f1_pre"] = b_pre.macro_f1
    rec.scalars["heldout_macro_f1_post"] = b_post.macro_f1


def run_pipeline(
    gen_config: GenConfig,
    train_config: TrainConfig,
    calib_grid=None,
    model_config: ModelConfig | None = None,
    *,
    pretrain: bool = True,
    au_label_fraction: float = 1.0,
    k: int = 5,
    workers: int = 1,
) -> RunRecord:
    """Generate data, pretrain with CV, transfer, fine-tune, calibrate.

    ``pretrain=False`` is the scratch baseline: stage two starts from the
    plain initialisation with no stage-one run and no transfer step.
    """
    grid = default_grid() if calib_grid is None else np.asarray(calib_grid, dtype=np.float64)
    if model_config is None:
        model_config = ModelConfig(
            input_dim=gen_config.input_dim, num_expressions=gen_config.num_expressions, num_aus=gen_config.num_aus
        )
    ds = generate_synthetic(gen_config)
    splits = make_pipeline_splits(ds, gen_config.seed, au_label_fraction=au_label_fraction)
    seed = train_config.seed

    rec = RunRecord(seed=seed, config=_config_echo(gen=gen_config, train=train_config, model=model_config))
    rec.config["pipeline.mode"] = "transfer" if pretrain else "scratch"
    rec.config["pipeline.au_label_fraction"] = repr(float(au_label_fraction))
    rec.config["pipeline.k"] = str(k)
    rec.config["pipeline.grid"] = ",".join(repr(float(g)) for g in grid)
    rec.scalars["num_stage1_samples"] = len(splits.stage1)
    rec.scalars["num_stage2_train_samples"] = len(splits.train)
    rec.scalars["num_validation_samples"] = len(splits.validation)

    if pretrain:
        fold_acc = cross_validate_stage_one(splits.stage1, model_config, train_config, k=k, workers=workers)
        for i, a in enumerate(fold_acc, start=1):
            rec.scalars[f"cv_fold{i}_accuracy"] = a
        rec.scalars["cv_mean_accuracy"] = float(np.mean(fold_acc))
        pretrained = init_parameters(model_config, seed)
        s1 = train_stage_one(pretrained, splits.stage1, train_config)
        rec.stage1_loss = s1.stage1_loss
        rec.scalars["stage1_train_accuracy"] = s1.scalars["stage1_train_accuracy"]
        params = transfer_backbone(pretrained, model_config, seed)
    else:
        params = init_parameters(model_config, seed)
        del params.blocks["expr_head"]
        params.trainable = {"backbone": not model_config.freeze_backbone_in_stage2, "au_head": True}

    s2 = train_stage_two(params, splits.train, train_config, validation=splits.validation)
    rec.stage2_loss = s2.stage2_loss
    _calibration_reports(params, splits, grid, rec)
    rec.scalars["stage2_param_sha256"] = params_digest(params)
    rec.params = params
    return rec
