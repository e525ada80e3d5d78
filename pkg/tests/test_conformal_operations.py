# #!/usr/bin/env python
# -*- coding: utf-8 -*-


import dataclasses
import json
import math
from fractions import Fraction

import numpy as np
import pandas as pd
import pandas.testing as pdt
import pytest

from cfs_utils import conformal_operations as co
from cfs_utils import data_operations as dao
from cfs_utils import estimator_operations as eo
from cfs_utils import simulation_operations as so
from cfs_utils.basic_operations import DegenerateDataError
from cfs_utils.file_operations import dump_json


LEVELS = ['0.5', '0.6', '0.75', '0.8', '0.9', '0.95']


def _calibration(scores, weights):
    return co.CalibrationSet(scores=scores, weights=weights, c0=1.0)


def _brute_force_quantile(scores, weights, w_test, level):
    '''
    Smallest candidate z whose exact CDF reaches level, with +inf last
    '''
    total = sum(Fraction(int(w)) for w in weights) + Fraction(int(w_test))
    for z in sorted(set(scores)):
        mass = sum(Fraction(int(w)) for v, w in zip(scores, weights) if v <= z)
        if mass / total >= level:
            return z

    return math.inf


def _simulated(n=1000, seed=0, kind='table1-uvt-homo'):
    return so.generate(so.GeneratorSpec(kind, n, seed))


def test_score_kind_validation():
    assert co.ScoreKind('CDR', 0.2).alpha == 0.2

    with pytest.raises(ValueError, match='unknown score kind'):
        co.ScoreKind('XYZ')
    with pytest.raises(ValueError):
        co.ScoreKind('CQR', 1.0)

    return


def test_conformity_scores_hand_examples():
    cmr = co.ScoreModels(mean=eo.MeanModel(kind='linear-least-squares', intercept=4.5, coef=np.zeros(1)))
    cqr = co.ScoreModels(quantile=eo.QuantileModel(kind='linear-pinball', alpha=0.1, intercept=5.0, coef=np.zeros(1)))
    cdr = co.ScoreModels(cdf=eo.fit_knn_cdf(np.arange(10.0).reshape(-1, 1), np.arange(1.0, 11.0), k=10))

    assert co.conformity_score(co.ScoreKind('CMR'), cmr, [[0.0]], [2.0])[0] == 2.5
    assert co.conformity_score(co.ScoreKind('CQR', 0.1), cqr, [[0.0]], [5.0])[0] == 0.0
    assert co.conformity_score(co.ScoreKind('CDR', 0.1), cdr, [[0.0]], [1.0])[0] == 0.0

    with pytest.raises(ValueError, match='model kind mismatch'):
        co.conformity_score(co.ScoreKind('CQR', 0.1), cmr, [[0.0]], [2.0])

    return


def test_weighted_quantile_hand_examples():
    data = [
        (list(range(1, 10)), [1.0] * 9, 1.0, 0.9, 9.0),
        (list(range(1, 10)), [17.0] * 9, 17.0, 0.9, 9.0),
        (list(range(1, 10)), [0.1] * 9, 0.1, 0.9, 9.0),
        (list(range(1, 10)), [0.3] * 9, 0.3, 0.9, 9.0),
        (list(range(1, 10)), [1 / 3] * 9, 1 / 3, 0.9, 9.0),
        (list(range(1, 10)), [1e-6] * 9, 1e-6, 0.9, 9.0),
        ([1, 2, 3, 4], [0.3] * 4, 0.3, 0.8, 4.0),
        ([1, 2, 3, 4, 5], [0.3] * 5, 0.3, 0.5, 3.0),
        ([1, 2, 3], [1.0] * 3, 1.0, 0.9, math.inf),
        ([1, 2, 3], [1.0] * 3, 0.0, 0.9, 3.0),
        ([1, 2, 3], [1.0] * 3, math.inf, 0.5, math.inf),
        ([3, 1, 2, 2], [1.0] * 4, 1.0, 0.6, 2.0),
    ]

    df = pd.DataFrame(data, columns=['scores', 'weights', 'w_test', 'level', 'eta'])

    output = [
        co.weighted_quantile(_calibration(scores, weights), w_test, level)
        for scores, weights, w_test, level
        in zip(df['scores'], df['weights'], df['w_test'], df['level'])
    ]

    pdt.assert_series_equal(df['eta'], pd.Series(output, name='eta'))

    return


def test_weighted_quantile_with_equal_weights_is_order_statistic():
    rng = np.random.default_rng(0)

    for _ in range(200):
        n = int(rng.integers(1, 60))
        weight = float(rng.integers(1, 6))
        scores = rng.normal(size=n)
        level = LEVELS[int(rng.integers(len(LEVELS)))]

        rank = math.ceil(Fraction(level) * (n + 1))
        expected = np.sort(scores)[rank - 1] if rank <= n else math.inf

        assert co.weighted_quantile(_calibration(scores, np.full(n, weight)), weight, float(level)) == expected

    return


def test_weighted_quantile_order_statistic_for_fractional_weights():
    # Cumulative sums of these weights land on level only up to rounding
    for weight in [0.1, 0.3, 0.7, 1 / 3, 1e-6]:
        for n in range(1, 60):
            scores = np.arange(1.0, n + 1)
            cal = _calibration(scores, np.full(n, weight))
            for level in ['0.5', '0.8', '0.9', '0.95']:
                rank = math.ceil(Fraction(level) * (n + 1))
                expected = scores[rank - 1] if rank <= n else math.inf

                assert co.weighted_quantile(cal, weight, float(level)) == expected

    return


def test_weighted_quantile_matches_brute_force():
    rng = np.random.default_rng(1)

    for _ in range(200):
        n = int(rng.integers(1, 13))
        scores = [float(v) for v in rng.integers(0, 6, size=n)]
        weights = [float(w) for w in rng.integers(1, 21, size=n)]
        w_test = float(rng.integers(0, 21))
        level = LEVELS[int(rng.integers(len(LEVELS)))]

        expected = _brute_force_quantile(scores, weights, w_test, Fraction(level))

        assert co.weighted_quantile(_calibration(scores, weights), w_test, float(level)) == expected

    return


def test_weighted_quantile_is_invariant_to_rescaling():
    rng = np.random.default_rng(2)

    for _ in range(100):
        n = int(rng.integers(1, 40))
        scores = rng.normal(size=n)
        weights = rng.uniform(0.1, 10, size=n)
        w_test = float(rng.uniform(0.1, 10))
        level = float(rng.uniform(0.05, 0.95))

        baseline = co.weighted_quantile(_calibration(scores, weights), w_test, level)
        for factor in [1e-6, 1.0, 1e6]:
            assert co.weighted_quantile(_calibration(scores, factor * weights), factor * w_test, level) == baseline

    return


def test_weighted_quantile_monotone_weights_are_conservative():
    rng = np.random.default_rng(3)

    for _ in range(500):
        n = int(rng.integers(1, 40))
        scores = np.sort(np.round(rng.normal(size=n), 1))
        weights = np.cumsum(rng.uniform(0, 1, size=n)) + 0.1
        w_test = weights.max() * float(rng.uniform(1, 2))
        level = float(LEVELS[int(rng.integers(len(LEVELS)))])

        weighted = co.weighted_quantile(_calibration(scores, weights), w_test, level)
        unweighted = co.weighted_quantile(_calibration(scores, np.ones(n)), 1.0, level)

        assert weighted >= unweighted

    return


def test_weighted_quantile_errors():
    cal = _calibration([1.0, 2.0], [1.0, 1.0])

    with pytest.raises(ValueError):
        co.weighted_quantile(cal, -1.0, 0.9)
    with pytest.raises(ValueError):
        co.weighted_quantile(cal, 1.0, 1.0)
    with pytest.raises(ValueError):
        _calibration([1.0, 2.0], [1.0, 0.0])
    with pytest.raises(ValueError):
        _calibration([1.0, np.inf], [1.0, 1.0])

    return


def test_infinity_mass():
    cal = _calibration([1.0, 2.0, 3.0], [1.0, 2.0, 1.0])

    np.testing.assert_allclose(co.infinity_mass(cal, [4.0, 0.0, np.inf]), [0.5, 0.0, 1.0])

    return


def test_lpb_from_eta_cqr():
    models = co.ScoreModels(quantile=eo.QuantileModel(kind='linear-pinball', alpha=0.1, intercept=5.0, coef=np.zeros(1)))
    kind = co.ScoreKind('CQR', 0.1)
    X = np.zeros((3, 1))

    df = co.lpb_from_eta(kind, models, X, [0.0, 0.0, np.inf], 10.0)
    clamped = co.lpb_from_eta(kind, models, X[:1], 0.0, 3.0)

    np.testing.assert_array_equal(df['lpb'], [5.0, 5.0, 0.0])
    np.testing.assert_array_equal(df['uninformative'], [False, False, True])
    assert clamped['lpb'][0] == 3.0
    assert clamped['clamped_at_c0'][0]

    return


def test_lpb_from_eta_cdr():
    models = co.ScoreModels(cdf=eo.fit_knn_cdf(np.arange(5.0).reshape(-1, 1), np.arange(1.0, 6.0), k=5))
    kind = co.ScoreKind('CDR', 0.1)
    X = np.zeros((3, 1))

    df = co.lpb_from_eta(kind, models, X, [0.02, 0.5, -0.3], 10.0)

    # alpha - eta: 0.08 inverts to the first atom, -0.4 gives 0, 0.4 the second
    np.testing.assert_array_equal(df['lpb'], [1.0, 0.0, 2.0])
    np.testing.assert_array_equal(df['uninformative'], [False, False, False])

    return


def test_conformalize_bounds_and_weights():
    ds = _simulated()
    folds = dao.split(ds, 0.5, 0)

    model = co.conformalize(ds, folds, 'CQR', c0=2.0, floor=0.05)
    df = model.predict(_simulated(200, seed=1).X)

    assert list(df.columns) == co.PREDICTION_COLUMNS
    assert np.all((df['lpb'] >= 0) & (df['lpb'] <= 2.0))
    assert np.all((df['p_inf'] > 0) & (df['p_inf'] < 1))
    assert np.all(model.calibration.weights >= 1.0)
    assert np.all(model.calibration.weights <= 1 / 0.05 + 1e-12)
    assert model.metadata['n_calib'] == 500
    assert model.metadata['n_calib_selected'] == model.calibration.n

    return


def test_conformalize_every_score():
    ds = _simulated(600, seed=2)
    folds = dao.split(ds, 0.5, 2)
    test = _simulated(100, seed=3)

    for score in co.SCORE_KINDS:
        for options in [{}, {'censoring_kind': 'knn-frequency'}, {'censoring_kind': 'unit'}]:
            model = co.conformalize(ds, folds, score, c0=1.5, **options)
            lpb = model.predict(test.X)['lpb']
            assert np.all((lpb >= 0) & (lpb <= 1.5))

    linear = co.conformalize(ds, folds, 'CQR', c0=1.5, quantile_kind='linear-pinball', pinball_steps=500)
    least_squares = co.conformalize(ds, folds, 'CMR', c0=1.5, mean_kind='linear-least-squares')
    assert linear.models.quantile.kind == 'linear-pinball'
    assert least_squares.models.mean.kind == 'linear-least-squares'

    return


def test_conformalize_tiny_threshold_caps_every_response():
    ds = _simulated(400, seed=4)
    folds = dao.split(ds, 0.5, 4)
    c0 = float(min(ds.t_tilde.min(), ds.c.min())) / 2

    model = co.conformalize(ds, folds, 'CQR', c0=c0)

    assert model.metadata['n_calib_selected'] == 200
    assert np.all(model.predict(ds.X)['lpb'] <= c0)

    return


def test_conformalize_errors():
    ds = _simulated(200, seed=5)
    folds = dao.split(ds, 0.5, 5)

    with pytest.raises(ValueError, match='finite'):
        co.conformalize(ds, folds, 'CQR', c0=np.inf)
    with pytest.raises(DegenerateDataError):
        co.conformalize(ds, folds, 'CQR', c0=float(ds.c.max()) + 1)
    with pytest.raises(ValueError, match='censoring model kind'):
        co.conformalize(ds, folds, 'CQR', c0=1.0, censoring_kind='cox')

    return


def test_calibration_order_does_not_matter():
    ds = _simulated(800, seed=6)
    folds = dao.split(ds, 0.5, 6)
    model = co.conformalize(ds, folds, 'CQR', c0=2.0)

    permutation = np.random.default_rng(0).permutation(model.calibration.n)
    permuted = dataclasses.replace(
        model,
        calibration=co.CalibrationSet(
            scores=model.calibration.scores[permutation],
            weights=model.calibration.weights[permutation],
            c0=model.calibration.c0,
        ),
    )
    X = _simulated(300, seed=7).X

    pdt.assert_frame_equal(model.predict(X), permuted.predict(X))

    return


def test_cdr_bounds_grow_with_alpha():
    ds = _simulated(1000, seed=8)
    folds = dao.split(ds, 0.5, 8)
    X = _simulated(500, seed=9).X

    previous = None
    for alpha in [0.05, 0.1, 0.2, 0.3]:
        lpb = co.conformalize(ds, folds, 'CDR', c0=3.0, alpha=alpha).predict(X)['lpb'].to_numpy()
        if previous is not None:
            assert np.all(previous <= lpb)
        previous = lpb

    return


def test_weighted_bounds_cover_capped_times():
    ds = _simulated(2000, seed=10)
    test = _simulated(2000, seed=11)
    c0 = 3.0

    model = co.conformalize(ds, dao.split(ds, 0.5, 10), 'CQR', c0=c0, alpha=0.1)
    lpb = model.predict(test.X)['lpb'].to_numpy()

    assert np.mean(np.minimum(test.t_true, c0) >= lpb) >= 0.85

    return


def test_naive_bounds():
    ds = _simulated(2000, seed=12)
    test = _simulated(2000, seed=13)

    model = co.naive_lpb(ds, dao.split(ds, 0.5, 12), alpha=0.1)
    df = model.predict(test.X)

    assert model.method == 'naive'
    assert math.isinf(model.c0)
    assert np.all(df['lpb'] >= 0)
    assert np.all(df['p_inf'] == 1 / 1001)
    assert np.mean(test.t_true >= df['lpb']) >= 0.87

    return


def test_predict_point_matches_batch():
    ds = _simulated(400, seed=14)
    model = co.conformalize(ds, dao.split(ds, 0.5, 14), 'CMR', c0=2.0)

    point = model.predict_point([1.2])
    row = model.predict([[1.2]]).iloc[0]

    assert point.lpb == row['lpb']
    assert point.eta == row['eta']
    assert point.uninformative == row['uninformative']

    return


def test_conformal_model_serialization_keeps_predictions():
    ds = _simulated(400, seed=15)
    folds = dao.split(ds, 0.5, 15)
    X = _simulated(100, seed=16).X

    for model in [co.conformalize(ds, folds, 'CDR', c0=2.0), co.naive_lpb(ds, folds)]:
        reloaded = eo.model_from_dict(json.loads(dump_json(eo.model_to_dict(model))))
        assert isinstance(reloaded, co.ConformalModel)
        assert reloaded.c0 == model.c0
        pdt.assert_frame_equal(reloaded.predict(X), model.predict(X))

    return
