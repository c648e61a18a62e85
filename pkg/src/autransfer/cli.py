"""Command line front end.

    autransfer gen-data --subjects 10 --per-subject 50 --seed 7 -o d.csv
    autransfer pipeline --seed 1 -o run1/

Every option may also come from a ``key=value`` file passed with
``--config``; flags win over the file, the file wins over defaults. Each
command writes a manifest (same ``key=value`` format, all settings
resolved) next to its outputs, so ``--config <manifest>`` repeats a run.

Exit codes: 0 ok, 2 usage, 3 I/O, 4 file format or shape conflict.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time

import numpy as np

from . import __version__, _kernels
from .calibration import (
    ThresholdVector,
    apply_thresholds,
    calibrate_thresholds,
    read_scores,
    read_thresholds,
    write_scores,
    write_thresholds,
)
from .data import GenConfig, generate_synthetic, read_dataset, write_dataset
from .errors import AutransferError, ContractError
from .losses_metrics import accuracy, f1_report, format_kv, parse_kv
from .model import (
    ModelConfig,
    init_parameters,
    load_checkpoint,
    predict_au_scores,
    predict_expression,
    save_checkpoint,
    transfer_backbone,
)
from .training import TrainConfig, cross_validate_stage_one, run_pipeline, train_stage_one, train_stage_two

log = logging.getLogger("autransfer")

EXIT_USAGE = 2
EXIT_IO = 3
EXIT_FORMAT = 4


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# option tables: dest -> (flags, type, default, help)
# ---------------------------------------------------------------------------


def _int_list(text):
    try:
        return tuple(int(v) for v in str(text).split(",") if v.strip())
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text):
    try:
        return tuple(float(v) for v in str(text).split(",") if v.strip())
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def _bool(text):
    if isinstance(text, bool):
        return text
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"expected a boolean, got {text!r}")


GEN_OPTS = {
    "subjects": (("--subjects",), int, 40, "number of subjects"),
    "per_subject": (("--per-subject",), int, 25, "samples per subject"),
    "num_expressions": (("--num-expressions",), int, 6, "expression classes"),
    "num_aus": (("--num-aus",), int, 12, "action units"),
    "input_dim": (("--input-dim",), int, 64, "feature vector width"),
    "noise_sigma": (("--noise-sigma",), float, 0.3, "feature noise std"),
    "subject_offset_sigma": (("--subject-offset-sigma",), float, 0.5, "per-subject offset std"),
    "au_flip_prob": (("--au-flip-prob",), float, 0.05, "AU bit flip probability"),
    "imbalance_skew": (("--imbalance-skew",), float, 0.0, "expression prior skew (0 = uniform)"),
}

TRAIN_OPTS = {
    "epochs_stage1": (("--epochs-stage1",), int, 30, "stage-one epochs"),
    "epochs_stage2": (("--epochs-stage2",), int, 30, "stage-two epochs"),
    "batch_size": (("--batch-size",), int, 32, "mini-batch size"),
    "lr": (("--lr",), float, 0.01, "learning rate"),
    "momentum": (("--momentum",), float, 0.9, "SGD momentum"),
    "shuffle": (("--shuffle",), _bool, True, "shuffle each epoch (true/false)"),
    "pos_weighting": (("--pos-weighting",), _bool, False, "weight positive AU cells by neg/pos ratio"),
}

MODEL_OPTS = {
    "backbone": (("--backbone",), _int_list, (128, 64), "backbone hidden widths, comma-separated"),
    "au_hidden": (("--au-hidden",), _int_list, (32, 16), "AU head hidden widths (exactly two)"),
    "freeze_backbone": (("--freeze-backbone",), _bool, False, "freeze backbone in stage two"),
}

GRID_OPTS = {
    "grid": (("--grid",), _float_list, None, "explicit threshold grid (must contain 0.5)"),
    "grid_step": (("--grid-step",), float, 0.05, "grid spacing when --grid is not given"),
}

SEED_OPT = {"seed": (("--seed",), int, 0, "master seed")}

FOLD_OPTS = {
    "k": (("--k",), int, 5, "number of stage-one CV folds"),
    "workers": (("--workers",), int, 1, "threads for parallel folds"),
}

PRETRAIN_OPTS = {"num_expressions": GEN_OPTS["num_expressions"]}

CROSSVAL_OPTS = {**FOLD_OPTS, **PRETRAIN_OPTS}

PIPELINE_OPTS = {
    **FOLD_OPTS,
    "au_label_fraction": (("--au-label-fraction",), float, 1.0, "share of stage-two training samples kept"),
    "scratch": (("--scratch",), _bool, False, "skip stage one (baseline)"),
}


def _add(parser, table):
    for dest, (flags, _type, default, help_) in table.items():
        kwargs = {"dest": dest, "default": None, "help": f"{help_} (default: {default})"}
        if _type is _bool:
            # bare --flag means true; --flag false also accepted
            kwargs.update(nargs="?", const="true")
        parser.add_argument(*flags, **kwargs)


def _resolve(args, file_cfg, *tables):
    out = {}
    for table in tables:
        for dest, (_flags, conv, default, _h) in table.items():
            raw = getattr(args, dest, None)
            if raw is None:
                raw = file_cfg.get(dest)
            if raw is None:
                out[dest] = default
                continue
            try:
                out[dest] = conv(raw)
            except (TypeError, ValueError):
                raise UsageError(f"bad value for {dest}: {raw!r}") from None
    return out


def _gen_config(cfg) -> GenConfig:
    return GenConfig(
        num_subjects=cfg["subjects"],
        samples_per_subject=cfg["per_subject"],
        num_expressions=cfg["num_expressions"],
        num_aus=cfg["num_aus"],
        input_dim=cfg["input_dim"],
        noise_sigma=cfg["noise_sigma"],
        subject_offset_sigma=cfg["subject_offset_sigma"],
        au_flip_prob=cfg["au_flip_prob"],
        imbalance_skew=cfg["imbalance_skew"],
        seed=cfg["seed"],
    )


def _train_config(cfg) -> TrainConfig:
    return TrainConfig(
        epochs_stage1=cfg["epochs_stage1"],
        epochs_stage2=cfg["epochs_stage2"],
        batch_size=cfg["batch_size"],
        learning_rate=cfg["lr"],
        momentum=cfg["momentum"],
        seed=cfg["seed"],
        shuffle=cfg["shuffle"],
        pos_weighting=cfg["pos_weighting"],
    )


def _grid(cfg):
    if cfg["grid"]:
        if 0.5 not in cfg["grid"]:
            raise UsageError("--grid must contain 0.5")
        return np.array(cfg["grid"])
    step = cfg["grid_step"]
    if not 0 < step < 0.5:
        raise UsageError("--grid-step must lie in (0, 0.5)")
    n = int(round(1.0 / step))
    if abs(n * step - 1.0) > 1e-9 or n % 2:
        raise UsageError("--grid-step must divide 1 into an even number of steps so 0.5 is on the grid")
    return np.round(np.arange(1, n) * step, 10)


def _fmt(value):
    if isinstance(value, (tuple, list, np.ndarray)):
        return ",".join(str(v) for v in value)
    return str(value)


def _write_manifest(path, command, cfg, paths):
    kv = {"command": command, "version": __version__, "kernel_backend": _kernels.backend()}
    kv.update({k: _fmt(v) for k, v in cfg.items() if v is not None})
    kv.update({k: v for k, v in paths.items() if v is not None})
    with open(path, "w") as fh:
        fh.write(format_kv(kv))


def _ensure_dir(path):
    if not path:
        raise UsageError("an output path (-o) is required")
    os.makedirs(path, exist_ok=True)
    return path


def _require_file(path, what):
    if not path:
        raise UsageError(f"--{what} is required")
    if not os.path.isfile(path):
        raise FileNotFoundError(f"{what} file not found: {path}")
    return path


def _emit(text, out_path=None):
    sys.stdout.write(text)
    if out_path:
        with open(out_path, "w") as fh:
            fh.write(text)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args, file_cfg):
    cfg = _resolve(args, file_cfg, GEN_OPTS, SEED_OPT)
    output = args.output or file_cfg.get("output")
    if not output:
        raise UsageError("gen-data needs -o/--output")
    try:
        gen = _gen_config(cfg)
    except ContractError as exc:
        raise UsageError(str(exc)) from None
    ds = generate_synthetic(gen)
    write_dataset(ds, output)
    _write_manifest(output + ".manifest", "gen-data", cfg, {"output": output})
    marg = ds.au_labels.mean(axis=0)
    summary = {
        "samples": str(len(ds)),
        "subjects": str(len(ds.subjects())),
        "au_marginals": ",".join(f"{m:.4f}" for m in marg),
        "output": output,
    }
    _emit(format_kv(summary))


def _model_config_for(ds, cfg, num_expressions=None) -> ModelConfig:
    if num_expressions is None:
        num_expressions = cfg.get("num_expressions") or 6
    return ModelConfig(
        input_dim=ds.input_dim,
        backbone_layers=cfg["backbone"],
        num_expressions=num_expressions,
        num_aus=ds.num_aus,
        au_head_hidden=cfg["au_hidden"],
        freeze_backbone_in_stage2=cfg["freeze_backbone"],
    )


def _checked(fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except ContractError as exc:
        raise UsageError(str(exc)) from None


def cmd_pretrain(args, file_cfg):
    cfg = _resolve(args, file_cfg, TRAIN_OPTS, MODEL_OPTS, SEED_OPT, PRETRAIN_OPTS)
    data = _require_file(args.data or file_cfg.get("data"), "data")
    out = _ensure_dir(args.output or file_cfg.get("output"))
    ds = read_dataset(data)
    if int(ds.expression.max(initial=-1)) >= cfg["num_expressions"]:
        raise UsageError(f"dataset has expression ids beyond --num-expressions={cfg['num_expressions']}")
    model_cfg = _checked(_model_config_for, ds, cfg)
    train_cfg = _checked(_train_config, cfg)
    params = init_parameters(model_cfg, train_cfg.seed)
    rec = train_stage_one(params, ds.subset(np.flatnonzero(ds.has_expression())), train_cfg)
    save_checkpoint(params, os.path.join(out, "checkpoint.txt"))
    with open(os.path.join(out, "loss_stage1.csv"), "w") as fh:
        fh.write(rec.loss_csv(1))
    _emit(rec.to_text(), os.path.join(out, "report.txt"))
    _write_manifest(os.path.join(out, "manifest.txt"), "pretrain", cfg, {"data": data, "output": out})


def cmd_finetune(args, file_cfg):
    cfg = _resolve(args, file_cfg, TRAIN_OPTS, MODEL_OPTS, SEED_OPT)
    data = _require_file(args.data or file_cfg.get("data"), "data")
    ckpt = _require_file(args.checkpoint or file_cfg.get("checkpoint"), "checkpoint")
    val_path = args.val_data or file_cfg.get("val_data")
    if val_path:
        _require_file(val_path, "val-data")
    out = _ensure_dir(args.output or file_cfg.get("output"))
    ds = read_dataset(data)
    pretrained = load_checkpoint(ckpt)
    src_cfg = pretrained.config()
    if src_cfg.input_dim != ds.input_dim:
        raise AutransferError(f"checkpoint expects input width {src_cfg.input_dim}, dataset has {ds.input_dim}")
    cfg["backbone"] = src_cfg.backbone_layers
    model_cfg = _checked(_model_config_for, ds, cfg, num_expressions=src_cfg.num_expressions)
    train_cfg = _checked(_train_config, cfg)
    params = transfer_backbone(pretrained, model_cfg, train_cfg.seed)
    validation = read_dataset(val_path) if val_path else None
    train = ds.subset(np.flatnonzero(ds.has_au()))
    rec = train_stage_two(params, train, train_cfg, validation=validation)
    save_checkpoint(params, os.path.join(out, "checkpoint.txt"))
    if validation is not None:
        write_scores(os.path.join(out, "scores.txt"), predict_au_scores(params, validation.features), validation.au_labels)
    with open(os.path.join(out, "loss_stage2.csv"), "w") as fh:
        fh.write(rec.loss_csv(2))
    _emit(rec.to_text(), os.path.join(out, "report.txt"))
    _write_manifest(
        os.path.join(out, "manifest.txt"),
        "finetune",
        cfg,
        {"data": data, "checkpoint": ckpt, "val_data": val_path, "output": out},
    )


def cmd_evaluate(args, file_cfg):
    cfg = _resolve(args, file_cfg, SEED_OPT)
    data = _require_file(args.data or file_cfg.get("data"), "data")
    ckpt = _require_file(args.checkpoint or file_cfg.get("checkpoint"), "checkpoint")
    thr_path = args.thresholds or file_cfg.get("thresholds")
    out = _ensure_dir(args.output or file_cfg.get("output"))
    ds = read_dataset(data)
    params = load_checkpoint(ckpt)
    if params.config().input_dim != ds.input_dim:
        raise AutransferError(f"checkpoint expects input width {params.config().input_dim}, dataset has {ds.input_dim}")
    kv = {"samples": str(len(ds))}
    if params.has_group("au_head"):
        if params.config().num_aus != ds.num_aus:
            raise AutransferError(f"checkpoint predicts {params.config().num_aus} AUs, dataset has {ds.num_aus}")
        tv = read_thresholds(_require_file(thr_path, "thresholds")) if thr_path else ThresholdVector.uniform(ds.num_aus)
        if len(tv) != ds.num_aus:
            raise AutransferError(f"{len(tv)} thresholds for {ds.num_aus} AUs")
        scores = predict_au_scores(params, ds.features)
        write_scores(os.path.join(out, "scores.txt"), scores, ds.au_labels)
        labelled = ds.has_au()
        if labelled.any():
            report = f1_report(apply_thresholds(scores[labelled], tv), ds.au_labels[labelled])
            kv.update(report.to_kv())
        kv["thresholds"] = tv.to_line()
    if "expr_head" in params.blocks and ds.has_expression().any():
        m = ds.has_expression()
        kv["expression_accuracy"] = repr(accuracy(predict_expression(params, ds.features[m]), ds.expression[m]))
    _emit(format_kv(kv), os.path.join(out, "report.txt"))
    _write_manifest(
        os.path.join(out, "manifest.txt"),
        "evaluate",
        cfg,
        {"data": data, "checkpoint": ckpt, "thresholds": thr_path, "output": out},
    )


def cmd_calibrate(args, file_cfg):
    cfg = _resolve(args, file_cfg, GRID_OPTS)
    scores_path = _require_file(args.scores or file_cfg.get("scores"), "scores")
    output = args.output or file_cfg.get("output")
    if not output:
        raise UsageError("calibrate needs -o/--output for the threshold file")
    scores, labels = read_scores(scores_path)
    keep = np.all(labels >= 0, axis=1)
    if not keep.any():
        raise AutransferError("scores file carries no labelled rows")
    scores, labels = scores[keep], labels[keep]
    grid = _grid(cfg)
    tv = _checked(calibrate_thresholds, scores, labels, grid)
    write_thresholds(tv, output)
    pre = f1_report(apply_thresholds(scores, ThresholdVector.uniform(scores.shape[1])), labels)
    post = f1_report(apply_thresholds(scores, tv), labels)
    kv = {
        "samples": str(len(scores)),
        "macro_f1_pre": repr(pre.macro_f1),
        "macro_f1_post": repr(post.macro_f1),
        "thresholds": tv.to_line(),
    }
    heldout = args.heldout_scores or file_cfg.get("heldout_scores")
    if heldout:
        hs, hl = read_scores(_require_file(heldout, "heldout-scores"))
        m = np.all(hl >= 0, axis=1)
        kv["heldout_macro_f1_pre"] = repr(f1_report(apply_thresholds(hs[m], ThresholdVector.uniform(hs.shape[1])), hl[m]).macro_f1)
        kv["heldout_macro_f1_post"] = repr(f1_report(apply_thresholds(hs[m], tv), hl[m]).macro_f1)
    _emit(format_kv(kv), output + ".report")
    cfg["grid"] = tuple(float(g) for g in grid)
    _write_manifest(output + ".manifest", "calibrate", cfg, {"scores": scores_path, "heldout_scores": heldout, "output": output})


def cmd_crossval(args, file_cfg):
    cfg = _resolve(args, file_cfg, TRAIN_OPTS, MODEL_OPTS, SEED_OPT, CROSSVAL_OPTS)
    data = _require_file(args.data or file_cfg.get("data"), "data")
    out = args.output or file_cfg.get("output")
    ds = read_dataset(data)
    ds = ds.subset(np.flatnonzero(ds.has_expression()))
    model_cfg = _checked(_model_config_for, ds, cfg)
    train_cfg = _checked(_train_config, cfg)
    if cfg["k"] < 2:
        raise UsageError("--k must be at least 2")
    acc = _checked(cross_validate_stage_one, ds, model_cfg, train_cfg, k=cfg["k"], workers=max(1, cfg["workers"]))
    kv = {f"fold{i}_accuracy": repr(a) for i, a in enumerate(acc, start=1)}
    kv["mean_accuracy"] = repr(float(np.mean(acc)))
    report_path = None
    if out:
        _ensure_dir(out)
        report_path = os.path.join(out, "report.txt")
        _write_manifest(os.path.join(out, "manifest.txt"), "crossval", cfg, {"data": data, "output": out})
    _emit(format_kv(kv), report_path)


def cmd_pipeline(args, file_cfg):
    cfg = _resolve(args, file_cfg, GEN_OPTS, TRAIN_OPTS, MODEL_OPTS, GRID_OPTS, SEED_OPT, PIPELINE_OPTS)
    out = _ensure_dir(args.output or file_cfg.get("output"))
    gen = _checked(_gen_config, cfg)
    train_cfg = _checked(_train_config, cfg)
    model_cfg = _checked(
        ModelConfig,
        input_dim=gen.input_dim,
        backbone_layers=cfg["backbone"],
        num_expressions=gen.num_expressions,
        num_aus=gen.num_aus,
        au_head_hidden=cfg["au_hidden"],
        freeze_backbone_in_stage2=cfg["freeze_backbone"],
    )
    grid = _grid(cfg)
    if not 0 < cfg["au_label_fraction"] <= 1:
        raise UsageError("--au-label-fraction must lie in (0, 1]")
    started = time.perf_counter()
    rec = _checked(
        run_pipeline,
        gen,
        train_cfg,
        grid,
        model_cfg,
        pretrain=not cfg["scratch"],
        au_label_fraction=cfg["au_label_fraction"],
        k=cfg["k"],
        workers=max(1, cfg["workers"]),
    )
    log.info("pipeline finished in %.2f s", time.perf_counter() - started)
    save_checkpoint(rec.params, os.path.join(out, "checkpoint.txt"))
    write_thresholds(rec.thresholds, os.path.join(out, "thresholds.txt"))
    for stage in (1, 2):
        with open(os.path.join(out, f"loss_stage{stage}.csv"), "w") as fh:
            fh.write(rec.loss_csv(stage))
    _emit(rec.to_text(), os.path.join(out, "report.txt"))
    _write_manifest(os.path.join(out, "manifest.txt"), "pipeline", cfg, {"output": out})


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="autransfer", description="Two-stage transfer learning for AU recognition.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, fn, help_, tables, extra=()):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="key=value settings file (flags override it)")
        p.add_argument("-o", "--output", help="output path")
        for t in tables:
            _add(p, t)
        for flags, kw in extra:
            p.add_argument(*flags, **kw)
        p.set_defaults(func=fn)
        return p

    data_arg = (("--data",), {"help": "dataset file"})
    ckpt_arg = (("--checkpoint",), {"help": "checkpoint file"})
    command("gen-data", cmd_gen_data, "generate a synthetic dataset", [GEN_OPTS, SEED_OPT])
    command(
        "pretrain",
        cmd_pretrain,
        "stage one: train backbone on expressions",
        [TRAIN_OPTS, MODEL_OPTS, SEED_OPT, PRETRAIN_OPTS],
        [data_arg],
    )
    command(
        "finetune",
        cmd_finetune,
        "stage two: transfer backbone and train AU head",
        [TRAIN_OPTS, MODEL_OPTS, SEED_OPT],
        [data_arg, ckpt_arg, (("--val-data",), {"dest": "val_data", "help": "validation dataset"})],
    )
    command(
        "evaluate",
        cmd_evaluate,
        "score a dataset with a checkpoint",
        [SEED_OPT],
        [data_arg, ckpt_arg, (("--thresholds",), {"help": "threshold file (default: all 0.5)"})],
    )
    command(
        "calibrate",
        cmd_calibrate,
        "pick per-AU thresholds maximising F1",
        [GRID_OPTS],
        [
            (("--scores",), {"help": "scores file with labels"}),
            (("--heldout-scores",), {"dest": "heldout_scores", "help": "second scores file to report on"}),
        ],
    )
    command(
        "crossval",
        cmd_crossval,
        "subject-independent k-fold CV of stage one",
        [TRAIN_OPTS, MODEL_OPTS, SEED_OPT, CROSSVAL_OPTS],
        [data_arg],
    )
    command(
        "pipeline",
        cmd_pipeline,
        "generate, pretrain, fine-tune and calibrate end to end",
        [GEN_OPTS, TRAIN_OPTS, MODEL_OPTS, GRID_OPTS, SEED_OPT, PIPELINE_OPTS],
    )
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        file_cfg = {}
        if args.config:
            if not os.path.isfile(args.config):
                raise FileNotFoundError(f"config file not found: {args.config}")
            with open(args.config) as fh:
                try:
                    file_cfg = parse_kv(fh.read())
                except ValueError as exc:
                    raise UsageError(f"{args.config}: {exc}") from None
        args.func(args, file_cfg)
    except UsageError as exc:
        print(f"autransfer {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"autransfer {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except AutransferError as exc:
        print(f"autransfer {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    return 0


if __name__ == "__main__":
    sys.exit(main())
