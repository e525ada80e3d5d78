# !/usr/bin/env python
# -*- coding: utf-8 -*-

import dataclasses
import math
from dataclasses import dataclass
from typing import Any, Optional

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import expit

from cfs_utils.basic_operations import DegenerateDataError, SchemaError, check_level


# Query rows handled per distance matrix
CHUNK_SIZE = 1024

# Pinball solver: stop once this many steps pass without an improvement
# larger than tol
PINBALL_PATIENCE = 500

LEVEL_TOL = 1e-9

NEWTON_MAX_ITER = 100
NEWTON_RIDGE = 1e-6
NEWTON_TOL = 1e-8

MODEL_TYPES = {}


def register_model_type(cls: type) -> type:
    '''
    Class decorator making a fitted-model dataclass serializable by
    model_to_dict and model_from_dict
    '''
    MODEL_TYPES[cls.__name__] = cls

    return cls


@register_model_type
@dataclass(frozen=True, eq=False)
class Standardizer:
    '''
    Per-column z-score frozen from a fitting sample

    Notes
        Uses the population standard deviation; constant columns get
        scale 1
    '''
    mean: np.ndarray
    scale: np.ndarray

    def transform(self, X: Any) -> np.ndarray:
        X = as_matrix(X, self.mean.shape[0])
        return (X - self.mean) / self.scale


@register_model_type
@dataclass(frozen=True, eq=False)
class CdfModel:
    '''
    k-nearest-neighbour estimate of the conditional distribution of a
    response given covariates

    Attributes
        k: Number of neighbours
        standardizer: Covariate scaling frozen at fit time
        design: Standardized training covariates
        response: Training responses
        kind: Always 'knn-cdf'
    '''
    k: int
    standardizer: Standardizer
    design: np.ndarray
    response: np.ndarray
    kind: str = 'knn-cdf'


@register_model_type
@dataclass(frozen=True, eq=False)
class QuantileModel:
    '''
    Conditional quantile estimator at level alpha

    Attributes
        kind: 'knn-cdf' (inverts a CdfModel, so any level can be asked
        for) or 'linear-pinball' (a linear quantile fit at alpha only)
        alpha: The level the model was fitted for
        cdf: The CdfModel, knn-cdf only
        intercept, coef: Fitted coefficients on the original scale,
        linear-pinball only
        converged: Whether the pinball solver stopped early on a
        plateau
        objective: Mean pinball loss at the returned coefficients
    '''
    kind: str
    alpha: float
    cdf: Optional[CdfModel] = None
    intercept: float = 0.0
    coef: Optional[np.ndarray] = None
    converged: bool = True
    objective: float = math.nan


@register_model_type
@dataclass(frozen=True, eq=False)
class MeanModel:
    kind: str
    k: Optional[int] = None
    standardizer: Optional[Standardizer] = None
    design: Optional[np.ndarray] = None
    response: Optional[np.ndarray] = None
    intercept: float = 0.0
    coef: Optional[np.ndarray] = None


@register_model_type
@dataclass(frozen=True, eq=False)
class CensoringModel:
    '''
    Estimate of a conditional Bernoulli probability, floored below

    Attributes
        kind: 'logistic', 'knn-frequency' or 'constant'
        floor: Lower truncation level of predictions, in (0, 1]
        c0: Threshold the labels 1{C >= c0} were built from. None for
        a propensity model, whose labels are treatment indicators
        rate: Empirical label rate, which is the prediction of the
        constant kind
        standardizer: Covariate scaling, logistic and knn-frequency
        theta: Logistic coefficients on standardized covariates,
        intercept first
        design, labels, k: Training snapshot for knn-frequency
        converged: Whether Newton-Raphson met its gradient tolerance
    '''
    kind: str
    floor: float
    c0: Optional[float] = None
    rate: float = math.nan
    standardizer: Optional[Standardizer] = None
    theta: Optional[np.ndarray] = None
    design: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    k: Optional[int] = None
    converged: bool = True


def as_matrix(
    X: Any,
    p: Optional[int] = None,
) -> np.ndarray:
    '''
    Convert covariates into a float matrix, checking the column count
    against p where given
    '''
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(1, -1) if p is not None and p > 1 and X.size == p else X.reshape(-1, 1)
    if X.ndim != 2:
        raise SchemaError('covariates must be a 2-d array')
    if p is not None and X.shape[1] != p:
        raise SchemaError(f'dimension mismatch: model expects {p} covariates, got {X.shape[1]}')

    return X


def _as_vector(
    y: Any,
    n: int,
    name: str,
) -> np.ndarray:
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.shape[0] != n:
        raise ValueError(f'{name} has {y.shape[0]} entries, expected {n}')

    return y


def default_k(n: int) -> int:
    '''
    Default neighbour count, ceil(n ** 0.7) capped at n
    '''
    return min(n, math.ceil(n ** 0.7))


def _check_k(
    k: Optional[int],
    n: int,
) -> int:
    if k is None:
        return default_k(n)
    if int(k) != k or k < 1:
        raise ValueError(f'k must be a positive integer, got {k}')
    if k > n:
        raise ValueError(f'k={k} exceeds the number of training points ({n})')

    return int(k)


def fit_standardizer(X: Any) -> Standardizer:
    X = as_matrix(X)
    sd = X.std(axis=0)
    scale = np.where((np.ptp(X, axis=0) > 0) & (sd > 0), sd, 1.0)

    return Standardizer(mean=X.mean(axis=0), scale=scale)


def neighbour_index(
    design: np.ndarray,
    query: np.ndarray,
    k: int,
) -> np.ndarray:
    '''
    Find the k nearest training rows of each query row

    Parameters
        design: Standardized training covariates, shape (n, p)
        query: Standardized query covariates, shape (m, p)
        k: Number of neighbours

    Returns
        idx: Integer array of shape (m, k), nearest first

    Notes
        Equidistant training rows are ordered by index, so the smaller
        index wins a tie
    '''
    idx = np.empty((query.shape[0], k), dtype=np.int64)
    for start in range(0, query.shape[0], CHUNK_SIZE):
        distances = cdist(query[start:start + CHUNK_SIZE], design, 'sqeuclidean')
        idx[start:start + CHUNK_SIZE] = np.argsort(distances, axis=1, kind='stable')[:, :k]

    return idx


def fit_knn_cdf(
    X: Any,
    Y: Any,
    k: Optional[int] = None,
) -> CdfModel:
    '''
    Fit a k-nearest-neighbour conditional CDF

    Parameters
        X: Training covariates, shape (n, p)
        Y: Training responses
        k: Number of neighbours, default ceil(n ** 0.7) capped at n

    Returns
        model: CdfModel whose CDF at (x, y) is the fraction of the k
        neighbours of x with response <= y
    '''
    X = as_matrix(X)
    n = X.shape[0]
    Y = _as_vector(Y, n, 'Y')
    if n == 0:
        raise DegenerateDataError('no training points to fit on')
    k = _check_k(k, n)

    standardizer = fit_standardizer(X)

    return CdfModel(
        k=k,
        standardizer=standardizer,
        design=standardizer.transform(X),
        response=Y,
    )


def neighbour_responses(
    model: CdfModel,
    X: Any,
) -> np.ndarray:
    '''
    Return the sorted responses of each query row's k neighbours, shape
    (m, k)
    '''
    query = model.standardizer.transform(X)
    idx = neighbour_index(model.design, query, model.k)

    return np.sort(model.response[idx], axis=1)


def predict_cdf(
    model: CdfModel,
    X: Any,
    y: Any,
) -> np.ndarray:
    '''
    Evaluate the estimated conditional CDF

    Parameters
        model: A fitted CdfModel
        X: Query covariates, shape (m, p)
        y: Evaluation points, one per row or a scalar for all rows

    Returns
        cdf: Array of length m with values in [0, 1]
    '''
    values = neighbour_responses(model, X)
    y = np.broadcast_to(np.asarray(y, dtype=float), (values.shape[0],))

    return (values <= y[:, None]).sum(axis=1) / model.k


def invert_step_cdf(
    values: np.ndarray,
    a: Any,
) -> np.ndarray:
    '''
    Compute sup{z : F(z) < a} for step CDFs with equal-mass atoms

    Parameters
        values: Sorted atoms, shape (m, k), one row per CDF
        a: Levels, one per row or a scalar

    Returns
        quantiles: values[j*] where j* counts the j in 1..k with
        j / k < a. +inf when no atom reaches a, -inf where a <= 0

    Notes
        Levels within rounding error of a multiple of 1 / k are taken as
        that multiple, so a level computed as alpha - (alpha - j / k)
        inverts like j / k
    '''
    m, k = values.shape
    a = np.broadcast_to(np.asarray(a, dtype=float), (m,))

    scaled = a * k
    nearest = np.round(scaled)
    scaled = np.where(np.abs(scaled - nearest) <= LEVEL_TOL * np.maximum(1.0, np.abs(scaled)), nearest, scaled)
    # Number of j in 1..k with j < scaled
    j = np.clip(np.ceil(scaled) - 1, 0, k).astype(np.int64)

    quantiles = np.full(m, np.inf)
    inside = j < k
    quantiles[inside] = values[np.flatnonzero(inside), j[inside]]
    quantiles[a <= 0] = -np.inf

    return quantiles


def predict_cdf_quantile(
    model: CdfModel,
    X: Any,
    a: Any,
) -> np.ndarray:
    return invert_step_cdf(neighbour_responses(model, X), a)


def fit_knn_quantile(
    X: Any,
    Y: Any,
    alpha: float,
    k: Optional[int] = None,
) -> QuantileModel:
    return QuantileModel(
        kind='knn-cdf',
        alpha=check_level(alpha),
        cdf=fit_knn_cdf(X, Y, k),
    )


def pinball_loss(
    residual: Any,
    alpha: float,
) -> np.ndarray:
    '''
    Check loss u * (alpha - 1{u < 0}), elementwise
    '''
    residual = np.asarray(residual, dtype=float)
    return residual * (alpha - (residual < 0))


def fit_linear_pinball(
    X: Any,
    Y: Any,
    alpha: float,
    steps: int = 5000,
    tol: float = 1e-6,
    step0: float = 1.0,
) -> QuantileModel:
    '''
    Fit a linear conditional quantile by subgradient descent on the
    pinball loss

    Parameters
        X: Training covariates, shape (n, p), n > p + 1
        Y: Training responses
        alpha: Quantile level, in (0, 1)
        steps: Maximum number of subgradient steps
        tol: Improvement in mean loss that counts as progress
        step0: Initial step size; step t has size step0 / sqrt(t)

    Returns
        model: QuantileModel of kind 'linear-pinball' holding the best
        iterate seen, mapped back to the original scale

    Notes
        - Covariates and response are standardized before descent, so
        step0 is in response standard deviations
        - The search starts from the better of the zero fit on the
        standardized scale and the zero fit on the original scale, so
        the result is never worse than predicting 0
        - converged is True when PINBALL_PATIENCE steps pass with no
        improvement larger than tol, False when steps run out first
    '''
    X = as_matrix(X)
    n, p = X.shape
    Y = _as_vector(Y, n, 'Y')
    alpha = check_level(alpha)
    if n <= p + 1:
        raise DegenerateDataError(f'linear pinball fit needs more than {p + 1} points, got {n}')
    if steps < 1:
        raise ValueError(f'steps must be >= 1, got {steps}')

    standardizer = fit_standardizer(X)
    A = np.column_stack([np.ones(n), standardizer.transform(X)])
    y_mean = Y.mean()
    y_scale = Y.std() if np.ptp(Y) > 0 else 1.0
    u = (Y - y_mean) / y_scale

    def objective(theta):
        return pinball_loss(u - A @ theta, alpha).mean()

    # Starting points
    zero_standardized = np.zeros(p + 1)
    zero_original = np.zeros(p + 1)
    zero_original[0] = -y_mean / y_scale
    best_theta = min(
        [zero_standardized, zero_original],
        key=objective,
    ).copy()
    best_value = objective(best_theta)

    theta = best_theta.copy()
    stale = 0
    converged = False
    for t in range(1, steps + 1):
        residual = u - A @ theta
        gradient = -A.T @ (alpha - (residual < 0)) / n
        theta = theta - step0 / math.sqrt(t) * gradient

        value = objective(theta)
        if value < best_value - tol:
            stale = 0
        else:
            stale += 1
        if value < best_value:
            best_theta, best_value = theta.copy(), value
        if stale >= PINBALL_PATIENCE:
            converged = True
            break

    # Back to the original scale
    coef = y_scale * best_theta[1:] / standardizer.scale
    intercept = y_mean + y_scale * (best_theta[0] - np.sum(best_theta[1:] * standardizer.mean / standardizer.scale))

    return QuantileModel(
        kind='linear-pinball',
        alpha=alpha,
        intercept=float(intercept),
        coef=coef,
        converged=converged,
        objective=float(best_value * y_scale),
    )


def predict_quantile(
    model: QuantileModel,
    X: Any,
    a: Optional[Any] = None,
) -> np.ndarray:
    '''
    Predict conditional quantiles

    Parameters
        model: A fitted QuantileModel
        X: Query covariates, shape (m, p)
        a: Level(s), default model.alpha. A linear-pinball model only
        answers for its own alpha

    Returns
        quantiles: Array of length m
    '''
    a = model.alpha if a is None else a

    if model.kind == 'knn-cdf':
        return predict_cdf_quantile(model.cdf, X, a)
    if model.kind == 'linear-pinball':
        if not np.all(np.asarray(a) == model.alpha):
            raise ValueError(
                f'a linear-pinball model only predicts its fitted level alpha={model.alpha}'
            )
        return as_matrix(X, model.coef.shape[0]) @ model.coef + model.intercept

    raise ValueError(f'unknown quantile model kind: {model.kind}')


def fit_knn_mean(
    X: Any,
    Y: Any,
    k: Optional[int] = None,
) -> MeanModel:
    X = as_matrix(X)
    n = X.shape[0]
    Y = _as_vector(Y, n, 'Y')
    if n == 0:
        raise DegenerateDataError('no training points to fit on')
    k = _check_k(k, n)
    standardizer = fit_standardizer(X)

    return MeanModel(
        kind='knn-mean',
        k=k,
        standardizer=standardizer,
        design=standardizer.transform(X),
        response=Y,
    )


def fit_least_squares(
    X: Any,
    Y: Any,
) -> MeanModel:
    '''
    Ordinary least squares with an intercept
    '''
    X = as_matrix(X)
    n = X.shape[0]
    Y = _as_vector(Y, n, 'Y')
    if n == 0:
        raise DegenerateDataError('no training points to fit on')

    solution = np.linalg.lstsq(np.column_stack([np.ones(n), X]), Y, rcond=None)[0]

    return MeanModel(
        kind='linear-least-squares',
        intercept=float(solution[0]),
        coef=solution[1:],
    )


def predict_mean(
    model: MeanModel,
    X: Any,
) -> np.ndarray:
    if model.kind == 'knn-mean':
        query = model.standardizer.transform(X)
        idx = neighbour_index(model.design, query, model.k)
        return model.response[idx].mean(axis=1)
    if model.kind == 'linear-least-squares':
        return as_matrix(X, model.coef.shape[0]) @ model.coef + model.intercept

    raise ValueError(f'unknown mean model kind: {model.kind}')


def _fit_logistic(
    Z: np.ndarray,
    labels: np.ndarray,
) -> tuple[np.ndarray, bool]:
    '''
    Maximize the logistic log-likelihood by Newton-Raphson

    Returns
        theta: Coefficients, intercept first
        converged: Whether the gradient norm fell below NEWTON_TOL

    Notes
        A ridge of NEWTON_RIDGE on the Hessian diagonal keeps the
        Newton system solvable on separable data. Iteration stops at
        the last finite iterate if a step overflows
    '''
    A = np.column_stack([np.ones(Z.shape[0]), Z])
    theta = np.zeros(A.shape[1])
    ridge = NEWTON_RIDGE * np.eye(A.shape[1])

    for _ in range(NEWTON_MAX_ITER):
        prob = expit(A @ theta)
        gradient = A.T @ (labels - prob)
        if np.linalg.norm(gradient) < NEWTON_TOL:
            return theta, True

        hessian = (A * (prob * (1 - prob))[:, None]).T @ A + ridge
        try:
            step = np.linalg.solve(hessian, gradient)
        except np.linalg.LinAlgError:
            return theta, False

        proposal = theta + step
        if not np.all(np.isfinite(proposal)):
            return theta, False
        theta = proposal

    prob = expit(A @ theta)

    return theta, bool(np.linalg.norm(A.T @ (labels - prob)) < NEWTON_TOL)


def _fit_bernoulli(
    X: Any,
    labels: Any,
    kind: str,
    floor: float,
    k: Optional[int],
    c0: Optional[float],
) -> CensoringModel:
    floor = float(floor)
    if not 0 < floor <= 1:
        raise ValueError(f'floor must lie in (0, 1], got {floor}')
    if kind not in ['logistic', 'knn-frequency', 'constant']:
        raise ValueError(f'unknown censoring model kind: {kind}')

    X = as_matrix(X)
    n = X.shape[0]
    if n == 0:
        raise DegenerateDataError('no training points to fit the censoring model on')
    labels = _as_vector(labels, n, 'labels')
    rate = float(labels.mean())

    # NB: With a single label value there is nothing to regress on
    if kind == 'constant' or np.all(labels == labels[0]):
        return CensoringModel(kind='constant', floor=floor, c0=c0, rate=rate)

    standardizer = fit_standardizer(X)
    Z = standardizer.transform(X)

    if kind == 'logistic':
        theta, converged = _fit_logistic(Z, labels)
        return CensoringModel(
            kind='logistic', floor=floor, c0=c0, rate=rate,
            standardizer=standardizer, theta=theta, converged=converged,
        )

    return CensoringModel(
        kind='knn-frequency', floor=floor, c0=c0, rate=rate,
        standardizer=standardizer, design=Z, labels=labels, k=_check_k(k, n),
    )


def fit_censoring(
    X: Any,
    C: Any,
    c0: float,
    kind: str = 'logistic',
    floor: float = 0.05,
    k: Optional[int] = None,
) -> CensoringModel:
    '''
    Fit the censoring mechanism P(C >= c0 | X = x)

    Parameters
        X: Covariates, shape (n, p)
        C: Censoring times
        c0: The threshold
        kind: 'logistic', 'knn-frequency' or 'constant'
        floor: Lower truncation level of predictions, in (0, 1]
        k: Neighbour count for knn-frequency

    Returns
        model: CensoringModel. Where every label is the same a constant
        model at the empirical rate is returned whatever kind was asked
        for
    '''
    c0 = float(c0)
    if not c0 >= 0:
        raise ValueError(f'c0 must be >= 0, got {c0}')
    C = _as_vector(C, as_matrix(X).shape[0], 'C')

    return _fit_bernoulli(X, (C >= c0).astype(float), kind, floor, k, c0)


def fit_propensity(
    X: Any,
    W: Any,
    kind: str = 'logistic',
    floor: float = 0.05,
    k: Optional[int] = None,
) -> CensoringModel:
    '''
    Fit the propensity score P(W = 1 | X = x) with the censoring model
    machinery, taking the treatment indicator as label
    '''
    W = _as_vector(W, as_matrix(X).shape[0], 'W')

    return _fit_bernoulli(X, (W != 0).astype(float), kind, floor, k, None)


def predict_censoring(
    model: CensoringModel,
    X: Any,
    floored: bool = True,
) -> np.ndarray:
    '''
    Predict P(C >= c0 | X = x), or the propensity score for a model fitted
    by fit_propensity

    Parameters
        model: A fitted CensoringModel
        X: Query covariates, shape (m, p)
        floored: If True, clip predictions to [floor, 1]

    Returns
        prob: Array of length m
    '''
    if model.kind == 'constant':
        raw = np.full(as_matrix(X).shape[0], model.rate)
    elif model.kind == 'logistic':
        Z = model.standardizer.transform(X)
        raw = expit(model.theta[0] + Z @ model.theta[1:])
    elif model.kind == 'knn-frequency':
        query = model.standardizer.transform(X)
        raw = model.labels[neighbour_index(model.design, query, model.k)].mean(axis=1)
    else:
        raise ValueError(f'unknown censoring model kind: {model.kind}')

    if floored:
        return np.clip(raw, model.floor, 1.0)

    return raw


def _encode(value: Any) -> Any:
    if type(value).__name__ in MODEL_TYPES and dataclasses.is_dataclass(value):
        return model_to_dict(value)
    if isinstance(value, np.ndarray):
        return {'array': value.tolist(), 'dtype': str(value.dtype)}
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, dict):
        return {str(key): _encode(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_encode(item) for item in value]

    return value


def _decode(value: Any) -> Any:
    if isinstance(value, dict):
        if 'type' in value:
            return model_from_dict(value)
        if set(value) == {'array', 'dtype'}:
            return np.array(_decode(value['array']), dtype=value['dtype'])
        return {key: _decode(item) for key, item in value.items()}
    if isinstance(value, list):
        return [_decode(item) for item in value]
    if value in ['inf', '-inf', 'nan']:
        return float(value)

    return value


def model_to_dict(model: Any) -> dict:
    '''
    Convert a fitted model into a JSON-compatible document

    Parameters
        model: An instance of a registered model dataclass

    Returns
        document: Dict with a 'type' key naming the class and one key
        per field. Arrays keep their dtype; nested models nest

    Notes
        Non-finite floats are left as floats; file_operations.dump_json
        writes them as 'inf', '-inf' or 'nan' and model_from_dict reads
        them back
    '''
    name = type(model).__name__
    if name not in MODEL_TYPES:
        raise TypeError(f'not a serializable model: {name}')

    document = {'type': name}
    for model_field in dataclasses.fields(model):
        document[model_field.name] = _encode(getattr(model, model_field.name))

    return document


def model_from_dict(document: dict) -> Any:
    '''
    Rebuild a fitted model from a document made by model_to_dict

    Notes
        Unknown types and missing fields raise a SchemaError
    '''
    if not isinstance(document, dict) or document.get('type') not in MODEL_TYPES:
        raise SchemaError(f'unrecognised model document type: {document.get("type") if isinstance(document, dict) else document!r}')

    cls = MODEL_TYPES[document['type']]
    kwargs = {}
    for model_field in dataclasses.fields(cls):
        if model_field.name in document:
            kwargs[model_field.name] = _decode(document[model_field.name])

    try:
        return cls(**kwargs)
    except TypeError as e:
        raise SchemaError(f'malformed {cls.__name__} document: {e}') from e
