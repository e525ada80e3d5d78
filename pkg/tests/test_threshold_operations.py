# #!/usr/bin/env python
# -*- coding: utf-8 -*-


import numpy as np
import pytest

from cfs_utils import data_operations as dao
from cfs_utils import simulation_operations as so
from cfs_utils import threshold_operations as to
from cfs_utils.basic_operations import DegenerateDataError


def _simulated(n=800, seed=0):
    return so.generate(so.GeneratorSpec('table1-uvt-homo', n, seed))


def test_make_threshold_grid_explicit():
    grid = to.make_threshold_grid(values=[3.0, 1.0, 2.0, 1.0])

    np.testing.assert_array_equal(grid.candidates, [1.0, 2.0, 3.0])
    assert grid.source == 'explicit'

    capped = to.make_threshold_grid(values=[3.0, 1.0, 2.0], upper=2.5)
    np.testing.assert_array_equal(capped.candidates, [1.0, 2.0])

    return


def test_make_threshold_grid_from_censoring_deciles():
    C = np.arange(1.0, 102.0)

    grid = to.make_threshold_grid(censoring=C)

    np.testing.assert_allclose(grid.candidates, np.arange(11.0, 92.0, 10.0))
    assert grid.source == 'censoring-deciles'

    return


def test_make_threshold_grid_errors():
    with pytest.raises(ValueError):
        to.make_threshold_grid()
    with pytest.raises(ValueError, match='empty'):
        to.make_threshold_grid(values=[])
    with pytest.raises(ValueError, match='cap'):
        to.make_threshold_grid(values=[3.0, 4.0], upper=1.0)
    with pytest.raises(ValueError, match='increasing'):
        to.ThresholdGrid(candidates=[2.0, 1.0])
    with pytest.raises(ValueError):
        to.ThresholdGrid(candidates=[-1.0, 1.0])

    return


def test_select_c0_train_singleton_grid():
    ds = _simulated()
    folds = dao.split(ds, 0.5, 0)

    c0 = to.select_c0_train(ds, folds.train, to.make_threshold_grid(values=[2.0]), 'CQR', 0.1, seed=0)

    assert c0 == 2.0

    return


def test_select_c0_train_prefers_informative_threshold():
    ds = _simulated(seed=1)
    folds = dao.split(ds, 0.5, 1)
    positive = float(np.median(ds.c))

    c0 = to.select_c0_train(ds, folds.train, to.make_threshold_grid(values=[0.0, positive]), 'CQR', 0.1, seed=1)

    assert c0 == positive

    return


def test_select_c0_train_is_deterministic():
    ds = _simulated(seed=2)
    folds = dao.split(ds, 0.5, 2)
    grid = to.make_threshold_grid(censoring=ds.c[folds.train])

    first = to.select_c0_train(ds, folds.train, grid, 'CQR', 0.1, seed=5)
    second = to.select_c0_train(ds, folds.train, grid, 'CQR', 0.1, seed=5, n_jobs=2)

    assert first == second
    assert first in grid.candidates

    return


def test_score_c0_candidates_skips_empty_subpopulations():
    ds = _simulated(seed=3)
    folds = dao.split(ds, 0.5, 3)
    too_large = float(ds.c.max()) + 1
    grid = to.make_threshold_grid(values=[1.0, too_large])

    scores = to.score_c0_candidates(ds, folds, folds.calib, grid, score='CQR', alpha=0.1)

    assert list(scores.columns) == ['c0', 'mean_lpb', 'skipped']
    assert list(scores['skipped']) == [False, True]
    assert np.isnan(scores['mean_lpb'][1])
    assert to.select_c0_calib(ds, folds, grid, 'CQR', 0.1) == 1.0

    with pytest.raises(DegenerateDataError, match='every threshold candidate'):
        to.select_c0_calib(ds, folds, to.make_threshold_grid(values=[too_large]), 'CQR', 0.1)

    return


def test_select_c0_calib_returns_a_candidate():
    ds = _simulated(seed=4)
    folds = dao.split(ds, 0.5, 4)
    grid = to.make_threshold_grid(censoring=ds.c[folds.train])

    c0 = to.select_c0_calib(ds, folds, grid, 'CDR', 0.1)

    assert c0 in grid.candidates

    return


def test_estimate_c_bar_discrete():
    C = np.arange(1.0, 11.0)
    labels = np.zeros(10)

    assert to.estimate_c_bar_discrete(labels, C, 0.2) == 7.0
    assert to.estimate_c_bar_discrete(labels, C, 0.25) == 6.0
    assert to.estimate_c_bar_discrete(labels, C, 0.49) == 1.0

    # Two identical levels give the same bound as one
    assert to.estimate_c_bar_discrete(np.repeat([0, 1], 10), np.tile(C, 2), 0.2) == 7.0

    # The level with the smaller censoring times sets the bound
    assert to.estimate_c_bar_discrete(np.repeat([0, 1], 10), np.concatenate([C, C / 2]), 0.2) == 3.5

    return


def test_estimate_c_bar_discrete_decreases_with_eta():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 3, size=300)
    C = rng.exponential(2.0, size=300)

    bounds = [to.estimate_c_bar_discrete(labels, C, eta) for eta in np.linspace(0.01, 0.49, 25)]

    assert all(a >= b for a, b in zip(bounds, bounds[1:]))

    return


def test_estimate_c_bar_discrete_errors():
    with pytest.raises(ValueError):
        to.estimate_c_bar_discrete([0, 0], [1.0, 2.0], 0.5)
    with pytest.raises(ValueError):
        to.estimate_c_bar_discrete([0], [1.0, 2.0], 0.2)

    return
