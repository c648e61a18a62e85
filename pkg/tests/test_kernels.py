"""The numba kernels and their numpy fallbacks must agree exactly."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from autransfer import _kernels

pytestmark = pytest.mark.skipif(not _kernels.HAVE_NUMBA, reason="numba not installed")


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40), st.integers(1, 13), st.integers(0, 2**31 - 1))
def test_confusion_counts_twins(n, a, seed):
    rng = np.random.default_rng(seed)
    pred = rng.integers(0, 2, size=(n, a)).astype(np.int8)
    lab = rng.integers(0, 2, size=(n, a)).astype(np.int8)
    np.testing.assert_array_equal(_kernels.confusion_counts_numba(pred, lab), _kernels.confusion_counts_numpy(pred, lab))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_grid_counts_twins(n, a, seed):
    rng = np.random.default_rng(seed)
    # quantised scores hit grid points exactly, exercising the >= boundary
    scores = np.round(rng.random((n, a)) * 20) / 20
    lab = rng.integers(0, 2, size=(n, a)).astype(np.int8)
    grid = np.round(np.arange(1, 20) * 0.05, 10)
    np.testing.assert_array_equal(
        _kernels.grid_counts_numba(scores, lab, grid), _kernels.grid_counts_numpy(scores, lab, grid)
    )


def test_apply_thresholds_twins():
    rng = np.random.default_rng(4)
    scores = np.round(rng.random((50, 12)) * 10) / 10
    thr = np.round(rng.uniform(0.05, 0.95, 12) * 10) / 10
    np.testing.assert_array_equal(
        _kernels.apply_thresholds_numba(scores, thr), _kernels.apply_thresholds_numpy(scores, thr)
    )


def test_env_flag_selects_numpy(monkeypatch):
    import importlib

    monkeypatch.setenv("AUTRANSFER_DISABLE_NUMBA", "1")
    mod = importlib.reload(_kernels)
    try:
        assert mod.backend() == "numpy"
    finally:
        monkeypatch.delenv("AUTRANSFER_DISABLE_NUMBA")
        importlib.reload(_kernels)
