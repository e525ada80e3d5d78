# !/usr/bin/env python
# -*- coding: utf-8 -*-

from dataclasses import dataclass, field
from typing import Any, Iterable, Optional

import numpy as np
import pandas as pd

from cfs_utils.basic_operations import DegenerateDataError, check_level
from cfs_utils.data_operations import Dataset, SplitIndices, select_subpopulation
from cfs_utils import estimator_operations as eo


SCORE_KINDS = ['CMR', 'CQR', 'CDR']
CENSORING_KINDS = ['logistic', 'knn-frequency', 'constant', 'unit']
QUANTILE_KINDS = ['knn-cdf', 'linear-pinball']
MEAN_KINDS = ['knn-mean', 'linear-least-squares']

# Outcome model each score is built from
SCORE_MODEL_FIELDS = {'CMR': 'mean', 'CQR': 'quantile', 'CDR': 'cdf'}

PREDICTION_COLUMNS = ['id', 'lpb', 'eta', 'p_inf', 'uninformative', 'clamped_at_c0']


@eo.register_model_type
@dataclass(frozen=True)
class ScoreKind:
    '''
    Conformity score family and its level

    Attributes
        kind: 'CMR' (mean), 'CQR' (quantile) or 'CDR' (distribution)
        alpha: Target miscoverage, in (0, 1)
    '''
    kind: str
    alpha: float = 0.1

    def __post_init__(self):
        if self.kind not in SCORE_KINDS:
            raise ValueError(f'unknown score kind: {self.kind} (expected one of {", ".join(SCORE_KINDS)})')
        object.__setattr__(self, 'alpha', check_level(self.alpha))


@eo.register_model_type
@dataclass(frozen=True, eq=False)
class ScoreModels:
    '''
    Fitted outcome models; only the one the score kind needs is set
    '''
    mean: Optional[eo.MeanModel] = None
    quantile: Optional[eo.QuantileModel] = None
    cdf: Optional[eo.CdfModel] = None


@eo.register_model_type
@dataclass(frozen=True, eq=False)
class CalibrationSet:
    '''
    Conformity scores and weights of the selected calibration units

    Attributes
        scores: V_i, finite
        weights: W_i, positive and finite
        c0: The threshold the units were selected with
        groups: Optional group label per unit, for group-wise
        calibration
    '''
    scores: np.ndarray
    weights: np.ndarray
    c0: float
    groups: Optional[np.ndarray] = None

    def __post_init__(self):
        scores = np.array(self.scores, dtype=float).reshape(-1)
        weights = np.array(self.weights, dtype=float).reshape(-1)
        if scores.shape != weights.shape:
            raise ValueError(f'{scores.size} scores but {weights.size} weights')
        if not np.all(np.isfinite(scores)):
            raise ValueError('calibration scores must be finite')
        if not np.all(np.isfinite(weights) & (weights > 0)):
            raise ValueError('calibration weights must be positive and finite')
        object.__setattr__(self, 'scores', scores)
        object.__setattr__(self, 'weights', weights)
        object.__setattr__(self, 'c0', float(self.c0))
        if self.groups is not None:
            groups = np.array(self.groups, dtype=np.int64).reshape(-1)
            if groups.shape != scores.shape:
                raise ValueError(f'{groups.size} group labels for {scores.size} scores')
            object.__setattr__(self, 'groups', groups)

    @property
    def n(self) -> int:
        return self.scores.shape[0]

    def restrict(self, group: int) -> 'CalibrationSet':
        '''
        Return the units in one group, order preserved
        '''
        if self.groups is None:
            raise ValueError('calibration set carries no group labels')
        mask = self.groups == group

        return CalibrationSet(
            scores=self.scores[mask],
            weights=self.weights[mask],
            c0=self.c0,
            groups=self.groups[mask],
        )


@dataclass(frozen=True)
class LpbOutput:
    '''
    Lower predictive bound for one test point

    Attributes
        lpb: The bound, in [0, c0]
        eta: Calibration cutoff, +inf when uninformative
        p_inf: Normalized weight of the test point's atom at +inf
        clamped_at_c0: Whether the unclamped bound exceeded c0
        uninformative: Whether eta was +inf
    '''
    lpb: float
    eta: float
    p_inf: float
    clamped_at_c0: bool
    uninformative: bool


@eo.register_model_type
@dataclass(frozen=True, eq=False)
class ConformalModel:
    '''
    Fitted outcome and censoring models plus calibration scores,
    ready to produce LPBs for new covariates

    Attributes
        score: The ScoreKind
        models: Outcome models for the score
        calibration: CalibrationSet of the selected calibration units
        c0: The threshold, +inf for the naive baseline
        method: 'weighted' or 'naive'
        censoring: Censoring model, None for unit weights
        propensity: Propensity model in counterfactual mode
        partition: Group partition for group-wise calibration
        covariate_names: Names of the covariate columns, in order
        metadata: Fold sizes and fitting options, JSON-compatible
    '''
    score: ScoreKind
    models: ScoreModels
    calibration: CalibrationSet
    c0: float
    method: str = 'weighted'
    censoring: Optional[eo.CensoringModel] = None
    propensity: Optional[eo.CensoringModel] = None
    partition: Optional[Any] = None
    covariate_names: tuple = ()
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, 'c0', float(self.c0))
        object.__setattr__(self, 'covariate_names', tuple(self.covariate_names))

    def predict(
        self,
        X: Any,
        ids: Optional[Iterable] = None,
    ) -> pd.DataFrame:
        return predict_lpb(self, X, ids)

    def predict_point(self, x: Any) -> LpbOutput:
        row = predict_lpb(self, eo.as_matrix(x, len(self.covariate_names) or None)[:1]).iloc[0]

        return LpbOutput(
            lpb=float(row['lpb']),
            eta=float(row['eta']),
            p_inf=float(row['p_inf']),
            clamped_at_c0=bool(row['clamped_at_c0']),
            uninformative=bool(row['uninformative']),
        )


def _check_models(
    kind: ScoreKind,
    models: ScoreModels,
) -> None:
    needed = SCORE_MODEL_FIELDS[kind.kind]
    if getattr(models, needed) is None:
        raise ValueError(f'model kind mismatch: a {kind.kind} score needs a fitted {needed} model')

    return


def conformity_score(
    kind: ScoreKind,
    models: ScoreModels,
    X: Any,
    y: Any,
) -> np.ndarray:
    '''
    Compute conformity scores V(x, y)

    Parameters
        kind: The ScoreKind
        models: Fitted outcome models
        X: Covariates, shape (m, p)
        y: Outcomes, one per row

    Returns
        scores: m_hat(x) - y for CMR, q_hat_alpha(x) - y for CQR,
        alpha - F_hat(y | x) for CDR
    '''
    _check_models(kind, models)
    y = np.asarray(y, dtype=float).reshape(-1)

    if kind.kind == 'CMR':
        return eo.predict_mean(models.mean, X) - y
    if kind.kind == 'CQR':
        return eo.predict_quantile(models.quantile, X, kind.alpha) - y

    return kind.alpha - eo.predict_cdf(models.cdf, X, y)


def weighted_quantiles(
    cal: CalibrationSet,
    w_tests: Any,
    level: float,
) -> np.ndarray:
    '''
    Batch version of weighted_quantile, one test weight per entry

    Parameters
        cal: The calibration set
        w_tests: Nonnegative test-point weights
        level: Quantile level, in (0, 1)

    Returns
        etas: Array with one cutoff per test weight, +inf where the
        cutoff falls on the test point's atom
    '''
    level = check_level(level, 'level')
    w_tests = np.asarray(w_tests, dtype=float).reshape(-1)
    if np.any(np.isnan(w_tests) | (w_tests < 0)):
        raise ValueError('test weights must be nonnegative')

    etas = np.full(w_tests.shape[0], np.inf)
    if cal.n == 0:
        return etas

    # Atoms: distinct scores with the cumulative weight at or below them
    order = np.argsort(cal.scores, kind='stable')
    scores = cal.scores[order]
    cumulative = np.cumsum(cal.weights[order])
    last = np.append(np.flatnonzero(np.diff(scores) != 0), scores.shape[0] - 1)
    atoms = scores[last]
    cumulative = cumulative[last]
    total = cumulative[-1]

    for i, w_test in enumerate(w_tests):
        if np.isinf(w_test):
            continue
        if total + w_test <= 0:
            raise DegenerateDataError('total calibration weight is zero')
        # Relative tolerance keeps exact ties with level independent of weight scale
        reached = np.flatnonzero(cumulative >= level * (total + w_test) * (1 - eo.LEVEL_TOL))
        if reached.size:
            etas[i] = atoms[reached[0]]

    return etas


def weighted_quantile(
    cal: CalibrationSet,
    w_test: float,
    level: float,
) -> float:
    '''
    Level quantile of the weighted score distribution with an extra atom
    at +inf for the test point

    Parameters
        cal: Calibration scores V_i and weights W_i
        w_test: Weight of the test point, >= 0
        level: Quantile level, in (0, 1), normally 1 - alpha

    Returns
        eta: sup{z : sum of p_i over V_i <= z is < level}, where
        p_i = W_i / (sum W + w_test). +inf when only the atom at +inf
        reaches level

    Notes
        - Rescaling every weight, w_test included, by the same positive
        factor leaves eta unchanged
        - Units whose score equals eta are counted as V <= eta

    Examples
        Nine scores 1..9 with unit weights and w_test = 1 put mass 0.1 on
        each atom, so the CDF first reaches 0.9 at 9 and eta = 9
    '''
    return float(weighted_quantiles(cal, [w_test], level)[0])


def infinity_mass(
    cal: CalibrationSet,
    w_tests: Any,
) -> np.ndarray:
    '''
    Normalized mass w / (sum W + w) of the test point's atom at +inf
    '''
    w_tests = np.asarray(w_tests, dtype=float).reshape(-1)
    total = cal.weights.sum()
    with np.errstate(invalid='ignore'):
        mass = w_tests / (total + w_tests)

    return np.where(np.isinf(w_tests), 1.0, mass)


def mondrian_weights(
    cal: CalibrationSet,
    group: int,
    w_test: float,
) -> tuple[np.ndarray, float]:
    '''
    Normalized weights of a group's calibration units and of the test
    point's atom at +inf

    Parameters
        cal: Calibration set carrying group labels
        group: The test point's group
        w_test: The test point's weight

    Returns
        p: W_i / (sum of W over the group + w_test) for units in the
        group, in calibration order
        p_inf: w_test / (sum of W over the group + w_test); 1 for an
        empty group
    '''
    within = cal.restrict(group)
    p_inf = float(infinity_mass(within, [w_test])[0])

    return within.weights / (within.weights.sum() + w_test), p_inf


def mondrian_etas(
    cal: CalibrationSet,
    groups: Any,
    w_tests: Any,
    level: float,
) -> np.ndarray:
    '''
    Batch version of mondrian_eta, one group and test weight per entry
    '''
    groups = np.asarray(groups, dtype=np.int64).reshape(-1)
    w_tests = np.asarray(w_tests, dtype=float).reshape(-1)
    if groups.shape != w_tests.shape:
        raise ValueError(f'{groups.size} groups for {w_tests.size} test weights')

    etas = np.full(groups.shape[0], np.inf)
    for group in np.unique(groups):
        rows = np.flatnonzero(groups == group)
        etas[rows] = weighted_quantiles(cal.restrict(group), w_tests[rows], level)

    return etas


def mondrian_eta(
    cal: CalibrationSet,
    group_of_x: int,
    w_test: float,
    level: float,
) -> float:
    '''
    Weighted quantile over the calibration units in the test point's
    group only

    Parameters
        cal: Calibration set carrying group labels
        group_of_x: The test point's group
        w_test: The test point's weight
        level: Quantile level, normally 1 - alpha

    Returns
        eta: The group-wise cutoff, +inf for an empty group

    Notes
        With a single group this gives exactly weighted_quantile
    '''
    return float(mondrian_etas(cal, [group_of_x], [w_test], level)[0])


def lpb_from_eta(
    kind: ScoreKind,
    models: ScoreModels,
    X: Any,
    eta: Any,
    c0: float,
) -> pd.DataFrame:
    '''
    Turn calibration cutoffs into lower predictive bounds

    Parameters
        kind: The ScoreKind
        models: Fitted outcome models
        X: Covariates, shape (m, p)
        eta: Cutoffs, one per row or a scalar
        c0: The threshold; +inf leaves bounds unclamped

    Returns
        df: Columns lpb, eta, clamped_at_c0, uninformative

    Notes
        - CMR gives m_hat(x) - eta and CQR q_hat(x) - eta. CDR inverts
        the estimated CDF at alpha - eta with the sup rule, and gives 0
        where alpha - eta <= 0
        - Bounds are clamped to c0 from above and 0 from below
        - eta = +inf gives lpb 0 with uninformative set
    '''
    _check_models(kind, models)
    X = eo.as_matrix(X)
    m = X.shape[0]
    eta = np.broadcast_to(np.asarray(eta, dtype=float), (m,)).copy()
    uninformative = np.isinf(eta)

    raw = np.full(m, -np.inf)
    informative = np.flatnonzero(~uninformative)
    if informative.size:
        X_inf, eta_inf = X[informative], eta[informative]
        if kind.kind == 'CMR':
            raw[informative] = eo.predict_mean(models.mean, X_inf) - eta_inf
        elif kind.kind == 'CQR':
            raw[informative] = eo.predict_quantile(models.quantile, X_inf, kind.alpha) - eta_inf
        else:
            target = kind.alpha - eta_inf
            raw[informative] = np.where(
                target > 0,
                eo.predict_cdf_quantile(models.cdf, X_inf, np.maximum(target, 0.0)),
                -np.inf,
            )

    return pd.DataFrame({
        'lpb': np.maximum(np.minimum(raw, c0), 0.0),
        'eta': eta,
        'clamped_at_c0': raw > c0,
        'uninformative': uninformative,
    })


def _fit_score_models(
    kind: ScoreKind,
    X: np.ndarray,
    y: np.ndarray,
    quantile_kind: str,
    mean_kind: str,
    k: Optional[int],
    pinball_steps: int,
) -> ScoreModels:
    if kind.kind == 'CMR':
        if mean_kind == 'knn-mean':
            return ScoreModels(mean=eo.fit_knn_mean(X, y, k))
        if mean_kind == 'linear-least-squares':
            return ScoreModels(mean=eo.fit_least_squares(X, y))
        raise ValueError(f'unknown mean model kind: {mean_kind}')

    if kind.kind == 'CQR':
        if quantile_kind == 'knn-cdf':
            return ScoreModels(quantile=eo.fit_knn_quantile(X, y, kind.alpha, k))
        if quantile_kind == 'linear-pinball':
            return ScoreModels(quantile=eo.fit_linear_pinball(X, y, kind.alpha, steps=pinball_steps))
        raise ValueError(f'unknown quantile model kind: {quantile_kind}')

    return ScoreModels(cdf=eo.fit_knn_cdf(X, y, k))


def _k_for(k: Optional[int], n: int) -> Optional[int]:
    '''
    Cap a requested neighbour count at the fitting sample size
    '''
    return None if k is None else min(int(k), n)


def counterfactual_weight(
    cens: eo.CensoringModel,
    propensity: eo.CensoringModel,
    X: Any,
) -> np.ndarray:
    '''
    Composite weight 1 / (c_hat(x) * e_hat(x))

    Parameters
        cens: Censoring model P(C >= c0 | x, treated)
        propensity: Propensity model P(W = 1 | x)
        X: Covariates, shape (m, p)

    Returns
        weights: Array of length m, bounded by
        1 / (cens.floor * propensity.floor)
    '''
    return 1 / (eo.predict_censoring(cens, X) * eo.predict_censoring(propensity, X))


def shift_weights(
    censoring: Optional[eo.CensoringModel],
    propensity: Optional[eo.CensoringModel],
    X: Any,
) -> np.ndarray:
    '''
    Weights w(x) = 1 / c_hat(x), divided further by the propensity
    e_hat(x) in counterfactual mode; 1 for unit weights
    '''
    X = eo.as_matrix(X)
    if censoring is not None and propensity is not None:
        return counterfactual_weight(censoring, propensity, X)

    weights = np.ones(X.shape[0])
    if censoring is not None:
        weights = weights / eo.predict_censoring(censoring, X)
    if propensity is not None:
        weights = weights / eo.predict_censoring(propensity, X)

    return weights


def conformalize(
    ds: Dataset,
    split: SplitIndices,
    score: str = 'CQR',
    c0: float = np.inf,
    censoring_kind: str = 'logistic',
    alpha: float = 0.1,
    quantile_kind: str = 'knn-cdf',
    mean_kind: str = 'knn-mean',
    k: Optional[int] = None,
    floor: float = 0.05,
    pinball_steps: int = 5000,
    partition: Optional[Any] = None,
    treatment_column: Optional[str] = None,
    propensity_kind: str = 'logistic',
) -> ConformalModel:
    '''
    Fit and calibrate the weighted split-conformal LPB at threshold c0

    Parameters
        ds: The dataset
        split: Training and calibration folds
        score: 'CMR', 'CQR' or 'CDR'
        c0: The threshold. Must be finite
        censoring_kind: Estimator of P(C >= c0 | x): 'logistic',
        'knn-frequency', 'constant', or 'unit' to force weights of 1
        alpha: Target miscoverage
        quantile_kind: CQR quantile estimator, 'knn-cdf' or
        'linear-pinball'
        mean_kind: CMR mean estimator, 'knn-mean' or
        'linear-least-squares'
        k: Neighbour count for knn estimators, default ceil(n ** 0.7)
        floor: Lower truncation of c_hat (and of e_hat)
        pinball_steps: Step budget of the linear-pinball solver
        partition: Optional GroupPartition; cutoffs are then computed
        within the test point's group
        treatment_column: Name of a treatment indicator in ds.extra. If
        given, outcome models and calibration use treated units only
        and weights include 1 / e_hat(x)
        propensity_kind: Estimator of P(W = 1 | x)

    Returns
        model: The fitted ConformalModel

    Notes
        - Outcome models are fitted on training units with C >= c0,
        with response min(observed, c0)
        - The censoring model is fitted on all training units (all
        treated training units in counterfactual mode)
        - Calibration uses calibration units with C >= c0, and raises
        a DegenerateDataError if there are none
    '''
    kind = ScoreKind(score, alpha)
    c0 = float(c0)
    if not np.isfinite(c0):
        raise ValueError('c0 must be finite for the weighted method; use naive_lpb for the unthresholded baseline')
    if censoring_kind not in CENSORING_KINDS:
        raise ValueError(f'unknown censoring model kind: {censoring_kind}')

    train, calib = split.train, split.calib
    propensity = None
    if treatment_column is not None:
        if treatment_column not in ds.extra:
            raise ValueError(f'no treatment column {treatment_column!r} in the dataset')
        treated = ds.extra[treatment_column] != 0
        propensity = eo.fit_propensity(ds.X[train], treated[train], kind=propensity_kind, floor=floor, k=_k_for(k, train.size))
        train, calib = train[treated[train]], calib[treated[calib]]

    # Outcome models
    train_selected, y_train = select_subpopulation(ds, train, c0, fold='training')
    models = _fit_score_models(
        kind, ds.X[train_selected], y_train, quantile_kind, mean_kind,
        _k_for(k, train_selected.size), pinball_steps,
    )

    # Censoring model
    censoring = None
    if censoring_kind != 'unit':
        censoring = eo.fit_censoring(ds.X[train], ds.c[train], c0, kind=censoring_kind, floor=floor, k=_k_for(k, train.size))

    # Calibration
    calib_selected, y_calib = select_subpopulation(ds, calib, c0)
    X_calib = ds.X[calib_selected]
    calibration = CalibrationSet(
        scores=conformity_score(kind, models, X_calib, y_calib),
        weights=shift_weights(censoring, propensity, X_calib),
        c0=c0,
        groups=None if partition is None else partition.assign(X_calib),
    )

    return ConformalModel(
        score=kind,
        models=models,
        calibration=calibration,
        c0=c0,
        method='weighted',
        censoring=censoring,
        propensity=propensity,
        partition=partition,
        covariate_names=ds.covariate_names,
        metadata={
            'n_train': int(train.size),
            'n_calib': int(calib.size),
            'n_train_selected': int(train_selected.size),
            'n_calib_selected': int(calib_selected.size),
            'split_seed': split.seed,
            'train_fraction': split.train_fraction,
            'censoring_kind': censoring_kind,
            'quantile_kind': quantile_kind,
            'mean_kind': mean_kind,
            'k': k,
            'floor': floor,
            'treatment_column': treatment_column,
        },
    )


def naive_lpb(
    ds: Dataset,
    split: SplitIndices,
    alpha: float = 0.1,
    quantile_kind: str = 'knn-cdf',
    k: Optional[int] = None,
    pinball_steps: int = 5000,
) -> ConformalModel:
    '''
    Unweighted split-CQR on the observed times, ignoring censoring

    Parameters
        ds: The dataset
        split: Training and calibration folds
        alpha: Target miscoverage
        quantile_kind: 'knn-cdf' or 'linear-pinball'
        k: Neighbour count for knn-cdf

    Returns
        model: ConformalModel with method 'naive', c0 = +inf and unit
        weights

    Notes
        Observed times never exceed survival times, so the bound covers
        T at least as often as it covers the observed time
    '''
    kind = ScoreKind('CQR', alpha)
    train, calib = split.train, split.calib

    models = _fit_score_models(
        kind, ds.X[train], ds.t_tilde[train], quantile_kind, 'knn-mean',
        _k_for(k, train.size), pinball_steps,
    )
    scores = conformity_score(kind, models, ds.X[calib], ds.t_tilde[calib])

    return ConformalModel(
        score=kind,
        models=models,
        calibration=CalibrationSet(scores=scores, weights=np.ones(calib.size), c0=np.inf),
        c0=np.inf,
        method='naive',
        covariate_names=ds.covariate_names,
        metadata={
            'n_train': int(train.size),
            'n_calib': int(calib.size),
            'split_seed': split.seed,
            'train_fraction': split.train_fraction,
            'quantile_kind': quantile_kind,
            'k': k,
        },
    )


def predict_lpb(
    model: ConformalModel,
    X: Any,
    ids: Optional[Iterable] = None,
) -> pd.DataFrame:
    '''
    Compute LPBs for new covariates

    Parameters
        model: A fitted ConformalModel
        X: Covariates, shape (m, p)
        ids: Row identifiers, default 0..m-1

    Returns
        df: One row per input row with columns id, lpb, eta, p_inf,
        uninformative, clamped_at_c0, in input order
    '''
    X = eo.as_matrix(X, len(model.covariate_names) or None)
    m = X.shape[0]
    ids = np.arange(m) if ids is None else np.asarray(list(ids))
    level = 1 - model.score.alpha

    w_tests = shift_weights(model.censoring, model.propensity, X)
    if model.partition is None:
        etas = weighted_quantiles(model.calibration, w_tests, level)
        p_inf = infinity_mass(model.calibration, w_tests)
    else:
        groups = model.partition.assign(X)
        etas = mondrian_etas(model.calibration, groups, w_tests, level)
        p_inf = np.array([mondrian_weights(model.calibration, g, w)[1] for g, w in zip(groups, w_tests)])

    df = lpb_from_eta(model.score, model.models, X, etas, model.c0)
    df.insert(0, 'id', ids)
    df.insert(3, 'p_inf', p_inf)

    return df[PREDICTION_COLUMNS]
