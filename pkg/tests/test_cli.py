import numpy as np
import pytest

from autransfer.cli import main
from autransfer.data import read_dataset, split_subject_folds
from autransfer.losses_metrics import accuracy, parse_kv
from autransfer.model import ModelConfig, init_parameters, load_checkpoint, predict_expression
from autransfer.training import TrainConfig, train_stage_one

FAST = ["--epochs-stage1", "3", "--epochs-stage2", "3", "--backbone", "24,12", "--au-hidden", "8,6"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def dataset(tmp_path, capsys):
    path = tmp_path / "d.csv"
    code, out, _ = run(capsys, "gen-data", "--subjects", 10, "--per-subject", 20, "--input-dim", 16, "--seed", 7, "-o", path)
    assert code == 0
    return path


def test_gen_data_count_and_determinism(tmp_path, capsys):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    code, out, _ = run(capsys, "gen-data", "--subjects", 10, "--per-subject", 50, "--seed", 7, "-o", a)
    assert code == 0
    assert parse_kv(out)["samples"] == "500"
    assert len(read_dataset(a)) == 500
    run(capsys, "gen-data", "--subjects", 10, "--per-subject", 50, "--seed", 7, "-o", b)
    assert a.read_bytes() == b.read_bytes()
    manifest = parse_kv((tmp_path / "a.csv.manifest").read_text())
    assert manifest["command"] == "gen-data" and manifest["seed"] == "7" and manifest["noise_sigma"] == "0.3"


@pytest.mark.parametrize(
    "argv",
    [
        ["gen-data", "--subjects", "0", "-o", "x.csv"],
        ["gen-data", "--subjects", "ten", "-o", "x.csv"],
        ["gen-data", "--au-flip-prob", "2", "-o", "x.csv"],
        ["gen-data"],
        ["frobnicate"],
    ],
)
def test_usage_errors_exit_2(tmp_path, capsys, monkeypatch, argv):
    monkeypatch.chdir(tmp_path)
    assert run(capsys, *argv)[0] == 2


def test_missing_input_exits_3(tmp_path, capsys):
    code, _, err = run(capsys, "pretrain", "--data", tmp_path / "nope.csv", "-o", tmp_path / "o")
    assert code == 3 and "nope.csv" in err


def test_malformed_dataset_exits_4(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("AUTRANSFER-DATA v1,2,1\n0,1,1,0.5\n")
    code, _, err = run(capsys, "pretrain", "--data", bad, "-o", tmp_path / "o")
    assert code == 4 and "line 2" in err


def test_config_precedence(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("subjects=3\nper_subject=4\nseed=11\n")
    out = tmp_path / "d.csv"
    code, text, _ = run(capsys, "gen-data", "--config", cfg, "--per-subject", 5, "-o", out)
    assert code == 0 and parse_kv(text)["samples"] == "15"
    manifest = parse_kv((tmp_path / "d.csv.manifest").read_text())
    assert manifest["seed"] == "11" and manifest["per_subject"] == "5" and manifest["input_dim"] == "64"


def test_rerun_from_manifest_reproduces_bytes(tmp_path, capsys):
    first = tmp_path / "first.csv"
    run(capsys, "gen-data", "--subjects", 4, "--per-subject", 6, "--seed", 3, "--noise-sigma", 0.1, "-o", first)
    second = tmp_path / "second.csv"
    code, _, _ = run(capsys, "gen-data", "--config", tmp_path / "first.csv.manifest", "-o", second)
    assert code == 0 and first.read_bytes() == second.read_bytes()


def test_pretrain_finetune_evaluate_calibrate_chain(tmp_path, capsys, dataset):
    pre = tmp_path / "pre"
    assert run(capsys, "pretrain", "--data", dataset, "--seed", 1, "-o", pre, *FAST)[0] == 0
    for name in ("checkpoint.txt", "report.txt", "loss_stage1.csv", "manifest.txt"):
        assert (pre / name).exists()

    ft = tmp_path / "ft"
    code, out, _ = run(
        capsys, "finetune", "--data", dataset, "--checkpoint", pre / "checkpoint.txt", "--val-data", dataset,
        "--freeze-backbone", "--seed", 1, "-o", ft, *FAST,
    )
    assert code == 0 and "validation.macro_f1" in parse_kv(out)
    before = load_checkpoint(pre / "checkpoint.txt")
    after = load_checkpoint(ft / "checkpoint.txt")
    for name in after.block_names("backbone"):
        for a, b in zip(before.blocks[name], after.blocks[name]):
            np.testing.assert_array_equal(a.data, b.data)

    ev = tmp_path / "ev"
    code, out, _ = run(capsys, "evaluate", "--data", dataset, "--checkpoint", ft / "checkpoint.txt", "-o", ev)
    assert code == 0 and "macro_f1" in parse_kv(out)

    thr = tmp_path / "thr.txt"
    code, out, _ = run(capsys, "calibrate", "--scores", ev / "scores.txt", "--heldout-scores", ev / "scores.txt", "-o", thr)
    kv = parse_kv(out)
    assert code == 0 and float(kv["macro_f1_post"]) >= float(kv["macro_f1_pre"])
    assert len(thr.read_text().strip().split(",")) == 12

    code, out, _ = run(capsys, "evaluate", "--data", dataset, "--checkpoint", ft / "checkpoint.txt", "--thresholds", thr, "-o", ev)
    assert code == 0 and parse_kv(out)["macro_f1"] == kv["macro_f1_post"]


def test_finetune_shape_conflict_exits_4(tmp_path, capsys, dataset):
    other = tmp_path / "wide.csv"
    run(capsys, "gen-data", "--subjects", 3, "--per-subject", 3, "--input-dim", 20, "-o", other)
    pre = tmp_path / "pre"
    run(capsys, "pretrain", "--data", dataset, "-o", pre, *FAST)
    code, _, _ = run(capsys, "finetune", "--data", other, "--checkpoint", pre / "checkpoint.txt", "-o", tmp_path / "ft")
    assert code == 4


def test_crossval_matches_manual_reconstruction(tmp_path, capsys, dataset):
    code, out, _ = run(capsys, "crossval", "--data", dataset, "--k", 5, "--seed", 2, *FAST)
    kv = parse_kv(out)
    assert code == 0
    printed = [float(kv[f"fold{i}_accuracy"]) for i in range(1, 6)]
    assert float(kv["mean_accuracy"]) == float(np.mean(printed))

    ds = read_dataset(dataset)
    cfg = ModelConfig(input_dim=16, backbone_layers=(24, 12), au_head_hidden=(8, 6))
    tc = TrainConfig(epochs_stage1=3, epochs_stage2=3, seed=2)
    split = split_subject_folds(ds, 5, seed=2)
    manual = []
    for tr, va in zip(split.train_indices, split.val_indices):
        params = init_parameters(cfg, 2)
        train_stage_one(params, ds.subset(tr), tc)
        manual.append(accuracy(predict_expression(params, ds.features[va]), ds.expression[va]))
    assert printed == manual


def test_pipeline_command(tmp_path, capsys):
    out_dir = tmp_path / "run1"
    argv = ["pipeline", "--seed", 1, "--subjects", 10, "--per-subject", 20, "--input-dim", 16, "-o", out_dir, *FAST]
    code, out, _ = run(capsys, *argv)
    kv = parse_kv(out)
    assert code == 0
    assert float(kv["macro_f1_post"]) >= float(kv["macro_f1_pre"])
    for name in ("report.txt", "manifest.txt", "checkpoint.txt", "thresholds.txt", "loss_stage1.csv", "loss_stage2.csv"):
        assert (out_dir / name).exists()
    again = tmp_path / "run2"
    assert run(capsys, "pipeline", "--config", out_dir / "manifest.txt", "-o", again)[0] == 0
    assert (again / "report.txt").read_bytes() == (out_dir / "report.txt").read_bytes()
    assert (again / "checkpoint.txt").read_bytes() == (out_dir / "checkpoint.txt").read_bytes()


def test_pipeline_rejects_grid_without_half(tmp_path, capsys):
    code, _, _ = run(capsys, "pipeline", "--grid", "0.1,0.2", "-o", tmp_path / "r", *FAST)
    assert code == 2
