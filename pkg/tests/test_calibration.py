import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from autransfer.calibration import (
    ThresholdVector,
    apply_thresholds,
    calibrate_thresholds,
    default_grid,
    read_scores,
    read_thresholds,
    write_scores,
    write_thresholds,
)
from autransfer.errors import ContractError, DatasetFormatError, DimensionError
from autransfer.losses_metrics import f1_report


def exhaustive_thresholds(scores, labels, grid):
    """Pure-python recount at every grid point; smallest maximiser wins."""
    chosen, best = [], []
    for j in range(scores.shape[1]):
        top_f1, top_t = -1.0, None
        for t in grid:
            tp = fp = fn = 0
            for i in range(scores.shape[0]):
                p = scores[i, j] >= t
                if p and labels[i, j]:
                    tp += 1
                elif p:
                    fp += 1
                elif labels[i, j]:
                    fn += 1
            f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
            if f1 > top_f1:
                top_f1, top_t = f1, t
        chosen.append(top_t)
        best.append(top_f1)
    return np.array(chosen), np.array(best)


def test_default_grid():
    g = default_grid()
    assert len(g) == 19 and g[0] == 0.05 and g[-1] == 0.95 and 0.5 in g


def test_worked_example(kernel_backend):
    tv = calibrate_thresholds(np.array([[0.2], [0.6], [0.8]]), np.array([[0], [1], [1]]))
    assert tv.thresholds.tolist() == [0.25]
    assert tv.best_f1.tolist() == [1.0]


def test_all_negative_au_is_degenerate(kernel_backend):
    tv = calibrate_thresholds(np.array([[0.1], [0.9]]), np.array([[0], [0]]))
    assert tv.thresholds[0] == 0.05 and tv.best_f1[0] == 0.0 and tv.degenerate[0]


def test_tie_break_smallest_in_gap(kernel_backend):
    scores = np.array([[0.1], [0.15], [0.7], [0.9]])
    labels = np.array([[0], [0], [1], [1]])
    tv = calibrate_thresholds(scores, labels)
    assert tv.thresholds[0] == 0.2
    assert calibrate_thresholds(scores, labels).thresholds[0] == tv.thresholds[0]


def test_grid_must_contain_half():
    with pytest.raises(ContractError):
        calibrate_thresholds(np.ones((2, 1)) * 0.3, np.ones((2, 1)), grid=[0.1, 0.2, 0.3])
    with pytest.raises(ContractError):
        calibrate_thresholds(np.ones((2, 1)) * 0.3, np.ones((2, 1)), grid=[])
    with pytest.raises(DimensionError):
        calibrate_thresholds(np.ones((2, 2)), np.ones((2, 1)))


def test_matches_exhaustive_oracle(kernel_backend):
    rng = np.random.default_rng(77)
    grid = default_grid()
    for _ in range(30):
        labels = rng.integers(0, 2, size=(30, 4))
        scores = np.clip(labels * 0.3 + rng.random((30, 4)) * 0.7, 0, 1)
        tv = calibrate_thresholds(scores, labels, grid)
        thr, best = exhaustive_thresholds(scores, labels, grid)
        np.testing.assert_array_equal(tv.thresholds, thr)
        np.testing.assert_array_equal(tv.best_f1, best)


def test_apply_thresholds_rules(kernel_backend):
    scores = np.array([[0.5, 0.49, 0.51]])
    np.testing.assert_array_equal(apply_thresholds(scores, ThresholdVector.uniform(3)), [[1, 0, 1]])
    rng = np.random.default_rng(0)
    s = rng.random((20, 12))
    t = rng.uniform(0.05, 0.95, 12)
    np.testing.assert_array_equal(apply_thresholds(s, t), (s >= t[None, :]).astype(int))
    with pytest.raises(DimensionError):
        apply_thresholds(s, ThresholdVector.uniform(3))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 25), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_calibrated_macro_f1_never_below_default(n, a, seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=(n, a))
    scores = rng.random((n, a))
    tv = calibrate_thresholds(scores, labels)
    pre = f1_report(apply_thresholds(scores, ThresholdVector.uniform(a)), labels).macro_f1
    post = f1_report(apply_thresholds(scores, tv), labels).macro_f1
    assert post >= pre


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 20), st.integers(2, 5), st.integers(0, 2**31 - 1), st.data())
def test_order_invariance(n, a, seed, data):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=(n, a))
    scores = rng.random((n, a))
    rows = np.array(data.draw(st.permutations(range(n))))
    cols = np.array(data.draw(st.permutations(range(a))))
    base = calibrate_thresholds(scores, labels).thresholds
    np.testing.assert_array_equal(calibrate_thresholds(scores[rows], labels[rows]).thresholds, base)
    np.testing.assert_array_equal(calibrate_thresholds(scores[:, cols], labels[:, cols]).thresholds, base[cols])


def test_threshold_vector_validation_and_io(tmp_path):
    with pytest.raises(ContractError):
        ThresholdVector([0.0, 0.5])
    tv = ThresholdVector([0.25, 0.5, 0.1 + 0.2])
    path = tmp_path / "t.txt"
    write_thresholds(tv, path)
    assert path.read_text().count("\n") == 1
    np.testing.assert_array_equal(read_thresholds(path).thresholds, tv.thresholds)
    path.write_text("0.5,abc\n")
    with pytest.raises(DatasetFormatError):
        read_thresholds(path)


def test_scores_file_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    s = rng.random((5, 3))
    y = rng.integers(0, 2, size=(5, 3))
    path = tmp_path / "s.txt"
    write_scores(path, s, y)
    s2, y2 = read_scores(path)
    np.testing.assert_array_equal(s, s2)
    np.testing.assert_array_equal(y, y2)
