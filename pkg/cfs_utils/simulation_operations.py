# !/usr/bin/env python
# -*- coding: utf-8 -*-

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.stats import norm

from cfs_utils.basic_operations import CfsError, check_level, check_seed, derive_seed, make_rng
from cfs_utils.conformal_operations import ConformalModel, conformalize, naive_lpb, predict_lpb
from cfs_utils.data_operations import Dataset, split
from cfs_utils import estimator_operations as eo
from cfs_utils.extension_operations import GroupPartition, two_censoring_adapt
from cfs_utils.log_operations import log_details
from cfs_utils.threshold_operations import (
    estimate_c_bar_discrete, make_threshold_grid, select_c0_calib, select_c0_train,
)


DEFAULT_PARAMS = {
    'table1-uvt-homo': {'censoring_rate': 0.4},
    'table1-uvt-hetero': {'censoring_rate': 0.4},
    'table1-mvt-homo': {'censoring_rate': 0.4, 'p': 100},
    'table1-mvt-hetero': {'censoring_rate': 0.4, 'p': 100},
    'synthetic-c': {'follow_up': 300.0},
    'synthetic-t': {'follow_up': 300.0},
    'two-censoring': {'censoring_rate': 0.4},
    'randomized-trial': {'censoring_rate': 0.4, 'propensity': 0.5, 'effect': 0.5, 'sigma': 1.5},
    'custom-aft': {
        'p': 1,
        'x_low': 0.0,
        'x_high': 1.0,
        'mu_intercept': 0.0,
        'mu_coef': None,
        'sigma': 1.0,
        'censoring_intercept': 0.4,
        'censoring_coef': None,
    },
}
GENERATOR_KINDS = list(DEFAULT_PARAMS)

# Lowest exponential censoring rate a covariate-dependent law may reach
MIN_RATE = 1e-6

# Extra columns of the randomized-trial generator
TREATMENT_COLUMN = 'treatment'
TREATED_OUTCOME_COLUMN = 't1'

N_STRATA = 10

REPORT_METRICS = [
    'coverage', 'coverage_capped', 'coverage_uncensored', 'mean_lpb',
    'mean_ratio', 'beta_lo', 'beta_hi',
]


@dataclass(frozen=True)
class GeneratorSpec:
    '''
    A fully parameterized data-generating process

    Attributes
        kind: One of GENERATOR_KINDS
        n: Number of units
        seed: Seed of every draw
        params: Overrides of DEFAULT_PARAMS[kind]

    Notes
        - table1-*: log T | X ~ N(mu(X), sigma(X)^2) with C ~ Exp(0.4).
        Univariate X ~ U(0, 4); multivariate X ~ U([-1, 1]^p)
        - synthetic-c, synthetic-t: x1 is age ~ U(40, 80), x2 gender ~
        Bernoulli(0.5). log T_syn | X ~ N(2 + 0.05 age + 0.1 gender, 1)
        and the follow-up window is U(0, follow_up)
        - two-censoring: end-of-study and loss-to-follow-up censoring,
        kept in the extra columns c_end and c_loss
        - randomized-trial: treatment ~ Bernoulli(propensity) shifting
        mu by effect; the treated potential outcome is kept in extra
        column t1
        - custom-aft: linear mu, constant sigma, exponential censoring
        with rate censoring_intercept + X @ censoring_coef
    '''
    kind: str
    n: int
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in GENERATOR_KINDS:
            raise ValueError(f'unknown generator kind: {self.kind} (expected one of {", ".join(GENERATOR_KINDS)})')
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f'n must be a positive integer, got {self.n}')
        check_seed(self.seed)
        unknown = set(self.params) - set(DEFAULT_PARAMS[self.kind])
        if unknown:
            raise ValueError(f'unknown parameters for {self.kind}: {", ".join(sorted(unknown))}')

    @property
    def resolved_params(self) -> dict:
        params = {**DEFAULT_PARAMS[self.kind], **self.params}
        if self.kind.startswith('table1-mvt') and params['p'] < 10:
            raise ValueError(f'multivariate generators need p >= 10, got {params["p"]}')
        if self.kind == 'custom-aft':
            p = int(params['p'])
            params['mu_coef'] = np.zeros(p) if params['mu_coef'] is None else np.asarray(params['mu_coef'], dtype=float)
            params['censoring_coef'] = np.zeros(p) if params['censoring_coef'] is None else np.asarray(params['censoring_coef'], dtype=float)
            if params['mu_coef'].shape != (p,) or params['censoring_coef'].shape != (p,):
                raise ValueError(f'custom-aft coefficients must have length p={p}')
        return params


def aft_parameters(
    spec: GeneratorSpec,
    X: Any,
    treatment: Optional[Any] = None,
) -> tuple[np.ndarray, np.ndarray]:
    '''
    Location and scale of log T given covariates

    Parameters
        spec: The generator
        X: Covariates, shape (m, p)
        treatment: Treatment indicators, randomized-trial only; default
        all ones, the treated potential outcome

    Returns
        mu, sigma: Arrays of length m

    Notes
        For synthetic-c these describe T_syn, before the follow-up
        window caps it
    '''
    params = spec.resolved_params
    X = eo.as_matrix(X)
    kind = spec.kind

    if kind in ['table1-uvt-homo', 'table1-uvt-hetero', 'two-censoring', 'randomized-trial']:
        x = X[:, 0]
        mu = 2 + 0.37 * np.sqrt(x)
        if kind == 'table1-uvt-homo':
            sigma = np.full(x.shape[0], 1.5)
        elif kind == 'randomized-trial':
            w = np.ones(x.shape[0]) if treatment is None else np.asarray(treatment, dtype=float)
            mu = mu + params['effect'] * w
            sigma = np.full(x.shape[0], float(params['sigma']))
        else:
            sigma = 1 + x / 5
    elif kind.startswith('table1-mvt'):
        mu = math.log(2) + 1 + 0.55 * (X[:, 0] ** 2 - X[:, 2] * X[:, 4])
        sigma = np.ones(X.shape[0]) if kind == 'table1-mvt-homo' else np.abs(X[:, 9]) + 1
    elif kind in ['synthetic-c', 'synthetic-t']:
        mu = 2 + 0.05 * X[:, 0] + 0.1 * X[:, 1]
        sigma = np.ones(X.shape[0])
    else:
        mu = params['mu_intercept'] + X @ params['mu_coef']
        sigma = np.full(X.shape[0], float(params['sigma']))

    return mu, sigma


def _covariates(
    spec: GeneratorSpec,
    params: dict,
    rng: np.random.Generator,
) -> np.ndarray:
    n = spec.n
    if spec.kind.startswith('table1-mvt'):
        return rng.uniform(-1, 1, size=(n, int(params['p'])))
    if spec.kind in ['synthetic-c', 'synthetic-t']:
        age = rng.uniform(40, 80, size=n)
        gender = rng.binomial(1, 0.5, size=n).astype(float)
        return np.column_stack([age, gender])
    if spec.kind == 'custom-aft':
        return rng.uniform(params['x_low'], params['x_high'], size=(n, int(params['p'])))

    return rng.uniform(0, 4, size=(n, 1))


def generate(spec: GeneratorSpec) -> Dataset:
    '''
    Draw a dataset from a generator

    Parameters
        spec: The generator

    Returns
        ds: Dataset with true times, observed times min(T, C) and any
        extra columns of the kind. The same spec gives the same dataset
    '''
    params = spec.resolved_params
    rng = make_rng(spec.seed)
    n = spec.n
    extra = {}

    X = _covariates(spec, params, rng)

    treatment = None
    if spec.kind == 'randomized-trial':
        treatment = rng.binomial(1, params['propensity'], size=n).astype(float)
        extra[TREATMENT_COLUMN] = treatment

    # Survival times
    mu, sigma = aft_parameters(spec, X, np.zeros(n) if treatment is not None else None)
    noise = rng.standard_normal(n)
    T = np.exp(mu + sigma * noise)
    if treatment is not None:
        t1 = np.exp(mu + params['effect'] + sigma * noise)
        extra[TREATED_OUTCOME_COLUMN] = t1
        T = np.where(treatment == 1, t1, T)

    # Censoring times
    if spec.kind in ['synthetic-c', 'synthetic-t']:
        window = rng.uniform(0, params['follow_up'], size=n)
        if spec.kind == 'synthetic-t':
            C = window
        else:
            T = np.minimum(T, window)
            rate = np.maximum(0.001 * X[:, 0] + 0.01 * X[:, 1], MIN_RATE)
            C = rng.exponential(1 / rate)
    elif spec.kind == 'custom-aft':
        rate = np.maximum(params['censoring_intercept'] + X @ params['censoring_coef'], MIN_RATE)
        C = rng.exponential(1 / rate)
    elif spec.kind == 'two-censoring':
        c_end = rng.exponential(1 / params['censoring_rate'], size=n)
        x = X[:, 0]
        c_loss = np.exp(2 + 0.05 * np.log(T) + 0.09 * (x - 2) * (x - 3) * (x - 4) + rng.standard_normal(n))
        extra['c_end'] = c_end
        extra['c_loss'] = c_loss
        C = np.minimum(c_end, c_loss)
    else:
        C = rng.exponential(1 / params['censoring_rate'], size=n)

    return Dataset(
        X=X,
        c=C,
        t_tilde=np.minimum(T, C),
        t_true=T,
        extra=extra,
    )


def oracle_quantile_aft(
    mu: Any,
    sigma: Any,
    a: float,
) -> Any:
    '''
    a-quantile of a log-normal survival time, exp(mu + sigma * Phi^-1(a))

    Parameters
        mu: Location of log T
        sigma: Scale of log T, > 0
        a: Level, in (0, 1)

    Returns
        q: The quantile, with the shape of mu and sigma broadcast

    Examples
        >>> round(float(oracle_quantile_aft(0.0, 1.0, 0.1)), 8)
        0.27760624
    '''
    a = check_level(a, 'a')
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise ValueError('sigma must be > 0')

    return np.exp(np.asarray(mu, dtype=float) + sigma * norm.ppf(a))


def conditional_variance(
    mu: Any,
    sigma: Any,
) -> np.ndarray:
    '''
    Var(T | X) of a log-normal time, (exp(sigma^2) - 1) exp(2 mu + sigma^2)
    '''
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)

    return np.expm1(sigma ** 2) * np.exp(2 * mu + sigma ** 2)


def _capped_lognormal_quantile(
    mu: np.ndarray,
    sigma: np.ndarray,
    follow_up: float,
    a: float,
) -> np.ndarray:
    '''
    a-quantile of min(T, U) with log T ~ N(mu, sigma^2) and U ~ U(0,
    follow_up) independent, by bisection
    '''
    lo = np.zeros(mu.shape[0])
    hi = np.full(mu.shape[0], float(follow_up))
    for _ in range(100):
        mid = (lo + hi) / 2
        survival = norm.sf((np.log(mid) - mu) / sigma) * (1 - mid / follow_up)
        below = 1 - survival < a
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)

    return hi


def oracle_quantile(
    spec: GeneratorSpec,
    X: Any,
    a: float,
) -> np.ndarray:
    '''
    True a-quantile of the survival time given covariates

    Notes
        - randomized-trial gives the quantile of the treated potential
        outcome
        - synthetic-c gives the quantile of min(T_syn, follow-up window)
    '''
    a = check_level(a, 'a')
    mu, sigma = aft_parameters(spec, X)
    if spec.kind == 'synthetic-c':
        return _capped_lognormal_quantile(mu, sigma, spec.resolved_params['follow_up'], a)

    return oracle_quantile_aft(mu, sigma, a)


@dataclass(frozen=True, eq=False)
class EvaluationReport:
    '''
    Coverage and efficiency of a set of LPBs on a labelled test set

    Attributes
        n_test: Number of test units
        c0: The threshold of the bounds
        coverage: Fraction with T >= LPB, None without true times
        coverage_capped: Fraction with min(T, c0) >= LPB
        coverage_uncensored: In two-censoring runs, coverage of the
        time before loss-to-follow-up adaptation
        mean_lpb: Mean bound
        mean_ratio: Mean of LPB / oracle quantile, None without oracle
        beta_lo: Fraction with observed time >= LPB
        beta_hi: 1 - fraction with observed time < LPB and an event
        group_coverage: Coverage per group, for group-wise calibration
        strata: Per Var(T | X) decile: stratum, var_lo, var_hi, n,
        coverage, mean_ratio, mean_lpb
    '''
    n_test: int
    c0: float
    coverage: Optional[float]
    coverage_capped: Optional[float]
    coverage_uncensored: Optional[float]
    mean_lpb: float
    mean_ratio: Optional[float]
    beta_lo: float
    beta_hi: float
    group_coverage: dict = field(default_factory=dict)
    strata: pd.DataFrame = field(default_factory=pd.DataFrame)

    def to_dict(self) -> dict:
        return {
            'n_test': self.n_test,
            'c0': None if math.isinf(self.c0) else self.c0,
            'coverage': self.coverage,
            'coverage_capped': self.coverage_capped,
            'coverage_uncensored': self.coverage_uncensored,
            'mean_lpb': self.mean_lpb,
            'mean_ratio': self.mean_ratio,
            'beta_lo': self.beta_lo,
            'beta_hi': self.beta_hi,
            'group_coverage': {str(g): cov for g, cov in self.group_coverage.items()},
        }


def stratify(variance: Any) -> tuple[np.ndarray, np.ndarray]:
    '''
    Assign units to the 10 equal-frequency strata of Var(T | X)

    Returns
        strata: Stratum of each unit, 1..10
        edges: The 11 decile edges
    '''
    variance = np.asarray(variance, dtype=float)
    edges = np.quantile(variance, np.linspace(0, 1, N_STRATA + 1))
    strata = np.clip(np.searchsorted(edges[1:-1], variance, side='right'), 0, N_STRATA - 1) + 1

    return strata, edges


def evaluate_bounds(
    lpb: Any,
    test: Dataset,
    c0: float = math.inf,
    oracle: Optional[Any] = None,
    variance: Optional[Any] = None,
    groups: Optional[Any] = None,
) -> EvaluationReport:
    '''
    Score a vector of LPBs against a labelled test set

    Parameters
        lpb: One bound per test unit
        test: The test set. Without true times only beta_lo and beta_hi
        are computed
        c0: Threshold of the bounds
        oracle: True quantile per unit, for the LPB / oracle ratio
        variance: Var(T | X) per unit, for the strata table
        groups: Group label per unit, for per-group coverage

    Returns
        report: The EvaluationReport

    Notes
        beta_lo <= coverage <= beta_hi holds on every test set, since
        the observed time never exceeds T
    '''
    lpb = np.asarray(lpb, dtype=float).reshape(-1)
    n = test.n
    if lpb.shape[0] != n:
        raise ValueError(f'{lpb.shape[0]} bounds for {n} test units')

    covered = None if test.t_true is None else test.t_true >= lpb
    ratio = None if oracle is None else lpb / np.asarray(oracle, dtype=float)
    uncensored = test.extra.get('t_true_uncensored')

    group_coverage = {}
    if groups is not None and covered is not None:
        groups = np.asarray(groups)
        group_coverage = {int(g): float(covered[groups == g].mean()) for g in np.unique(groups)}

    strata = pd.DataFrame()
    if variance is not None:
        stratum, edges = stratify(variance)
        rows = []
        for s in range(1, N_STRATA + 1):
            mask = stratum == s
            rows.append({
                'stratum': s,
                'var_lo': edges[s - 1],
                'var_hi': edges[s],
                'n': int(mask.sum()),
                'coverage': covered[mask].mean() if covered is not None and mask.any() else np.nan,
                'mean_ratio': ratio[mask].mean() if ratio is not None and mask.any() else np.nan,
                'mean_lpb': lpb[mask].mean() if mask.any() else np.nan,
            })
        strata = pd.DataFrame(rows)

    return EvaluationReport(
        n_test=n,
        c0=float(c0),
        coverage=None if covered is None else float(covered.mean()),
        coverage_capped=None if covered is None else float((np.minimum(test.t_true, c0) >= lpb).mean()),
        coverage_uncensored=None if uncensored is None else float((uncensored >= lpb).mean()),
        mean_lpb=float(lpb.mean()),
        mean_ratio=None if ratio is None else float(ratio.mean()),
        beta_lo=float((test.t_tilde >= lpb).mean()),
        beta_hi=float(1 - ((test.t_tilde < lpb) & test.event).mean()),
        group_coverage=group_coverage,
        strata=strata,
    )


def evaluate(
    model: ConformalModel,
    test: Dataset,
    oracle: Optional[Union[Callable, Any]] = None,
    variance: Optional[Any] = None,
) -> EvaluationReport:
    '''
    Predict LPBs for a test set and score them

    Parameters
        model: A fitted ConformalModel
        test: Labelled test set
        oracle: True quantiles, or a function of the covariate matrix
        returning them
        variance: Var(T | X) per test unit, for the strata table

    Returns
        report: The EvaluationReport
    '''
    lpb = predict_lpb(model, test.X)['lpb'].to_numpy()
    if callable(oracle):
        oracle = oracle(test.X)
    groups = None if model.partition is None else model.partition.assign(test.X)

    return evaluate_bounds(lpb, test, model.c0, oracle, variance, groups)


@dataclass(frozen=True)
class ExperimentSpec:
    '''
    Everything a Monte Carlo experiment needs to replay bit-identically

    Attributes
        generator, params: Generator kind and parameter overrides
        n, n_test: Training and test set sizes per replication
        replications: Number of replications
        seed: Master seed; replication r draws from stream (seed, r)
        methods: Any of 'weighted', 'naive'
        weights: Weight variants of the weighted method, any of
        'estimated', 'unit'
        score, alpha: Score kind and target miscoverage
        c0: A number, 'auto-train' or 'auto-calib'
        grid: Explicit threshold candidates; censoring deciles if None
        two_censoring: Adapt two-censoring data before fitting; None
        adapts whenever the generator is two-censoring
        treatment: Counterfactual mode on the treatment extra column,
        with coverage measured on the treated potential outcome
        group_column, group_breaks: Group-wise calibration on one
        covariate
        c_bar_column, c_bar_eta: Cap automatic threshold grids at the
        c_bar bound of estimate_c_bar_discrete on this discrete covariate
    '''
    generator: str = 'table1-uvt-homo'
    n: int = 3000
    n_test: int = 3000
    replications: int = 1
    seed: int = 0
    params: dict = field(default_factory=dict)
    methods: tuple = ('weighted',)
    weights: tuple = ('estimated',)
    score: str = 'CQR'
    alpha: float = 0.1
    c0: Union[float, str] = 'auto-train'
    grid: Optional[tuple] = None
    train_fraction: float = 0.5
    holdout_fraction: float = 0.25
    quantile_kind: str = 'knn-cdf'
    mean_kind: str = 'knn-mean'
    censoring_kind: str = 'logistic'
    k: Optional[int] = None
    floor: float = 0.05
    two_censoring: Optional[bool] = None
    treatment: bool = False
    group_column: Optional[int] = None
    group_breaks: tuple = (0.0,)
    c_bar_column: Optional[int] = None
    c_bar_eta: Optional[float] = None


@dataclass(frozen=True, eq=False)
class ExperimentResult:
    '''
    Results of run_experiment

    Attributes
        replications: One row per replication and method variant
        strata: Mean strata table per method variant
        summary: Mean and 5/50/95% quantiles of each metric per method
        variant
    '''
    replications: pd.DataFrame
    strata: pd.DataFrame
    summary: dict


def _resolve_c0(
    spec: ExperimentSpec,
    train: Dataset,
    folds: Any,
    censoring_kind: str,
    seed: int,
    options: dict,
) -> float:
    if not isinstance(spec.c0, str):
        return float(spec.c0)

    c_bar = None
    if spec.c_bar_eta is not None:
        c_bar = estimate_c_bar_discrete(train.X[folds.train, spec.c_bar_column], train.c[folds.train], spec.c_bar_eta)
    grid = make_threshold_grid(values=spec.grid, censoring=train.c[folds.train], upper=c_bar)
    if spec.c0 == 'auto-train':
        return select_c0_train(
            train, folds.train, grid, spec.score, spec.alpha,
            holdout_fraction=spec.holdout_fraction, seed=seed,
            censoring_kind=censoring_kind, **options,
        )
    if spec.c0 == 'auto-calib':
        return select_c0_calib(
            train, folds, grid, spec.score, spec.alpha,
            censoring_kind=censoring_kind, **options,
        )

    raise ValueError(f'unknown c0 policy: {spec.c0}')


def run_replication(
    spec: ExperimentSpec,
    replication: int,
) -> tuple[pd.DataFrame, pd.DataFrame]:
    '''
    Run one replication: generate, split, fit every method variant and
    evaluate it on a fresh test set

    Parameters
        spec: The experiment
        replication: Replication index r; every seed is derived from
        (spec.seed, r)

    Returns
        rows: One row per method variant, with the report metrics
        strata: Strata tables of every variant, stacked
    '''
    train_seed = derive_seed(spec.seed, replication, 0)
    generator = GeneratorSpec(spec.generator, spec.n, train_seed, spec.params)
    train = generate(generator)
    test = generate(GeneratorSpec(spec.generator, spec.n_test, derive_seed(spec.seed, replication, 1), spec.params))

    two_censoring = spec.generator == 'two-censoring' if spec.two_censoring is None else spec.two_censoring
    if two_censoring:
        train, test = two_censoring_adapt(train), two_censoring_adapt(test)

    oracle = oracle_quantile(generator, test.X, spec.alpha)
    variance = conditional_variance(*aft_parameters(generator, test.X))
    if spec.treatment:
        t1 = test.extra[TREATED_OUTCOME_COLUMN]
        test = Dataset(X=test.X, c=test.c, t_tilde=np.minimum(t1, test.c), t_true=t1)

    folds = split(train, spec.train_fraction, derive_seed(spec.seed, replication, 2))
    partition = None
    if spec.group_column is not None:
        partition = GroupPartition(column=spec.group_column, breaks=spec.group_breaks)
    options = {
        'quantile_kind': spec.quantile_kind,
        'mean_kind': spec.mean_kind,
        'k': spec.k,
        'floor': spec.floor,
        'treatment_column': TREATMENT_COLUMN if spec.treatment else None,
    }

    variants = []
    if 'weighted' in spec.methods:
        for weights in spec.weights:
            censoring_kind = 'unit' if weights == 'unit' else spec.censoring_kind
            c0 = _resolve_c0(spec, train, folds, censoring_kind, derive_seed(spec.seed, replication, 3), options)
            model = conformalize(
                train, folds, spec.score, c0, censoring_kind, spec.alpha,
                partition=partition, **options,
            )
            variants.append(('weighted', weights, model))
    if 'naive' in spec.methods:
        model = naive_lpb(train, folds, spec.alpha, spec.quantile_kind, spec.k)
        variants.append(('naive', 'none', model))

    rows, strata = [], []
    for method, weights, model in variants:
        report = evaluate(model, test, oracle, variance)
        row = {
            'replication': replication,
            'seed': train_seed,
            'method': method,
            'weights': weights,
            'c0': model.c0,
            'n_test': report.n_test,
            **{metric: getattr(report, metric) for metric in REPORT_METRICS},
        }
        for group, coverage in report.group_coverage.items():
            row[f'coverage_group_{group}'] = coverage
        rows.append(row)
        strata.append(report.strata.assign(replication=replication, method=method, weights=weights))

    return pd.DataFrame(rows), pd.concat(strata, ignore_index=True)


def _run_replication_reporting_seed(
    spec: ExperimentSpec,
    replication: int,
) -> tuple[pd.DataFrame, pd.DataFrame]:
    try:
        return run_replication(spec, replication)
    except Exception as e:
        message = (
            f'replication {replication} failed '
            f'(seed {derive_seed(spec.seed, replication, 0)}): {e}'
        )
        if isinstance(e, CfsError):
            raise type(e)(message) from e
        raise CfsError(message) from e


def _summarize(df: pd.DataFrame) -> dict:
    '''
    Mean and 5/50/95% quantiles of each metric per method variant
    '''
    summary = {}
    metrics = REPORT_METRICS + ['c0'] + sorted(col for col in df.columns if col.startswith('coverage_group_'))
    for (method, weights), group in df.groupby(['method', 'weights'], sort=True):
        entry = {}
        for metric in metrics:
            values = pd.to_numeric(group[metric], errors='coerce').dropna()
            values = values[np.isfinite(values)]
            if values.empty:
                entry[metric] = None
                continue
            entry[metric] = {
                'mean': float(values.mean()),
                'q05': float(values.quantile(0.05)),
                'q50': float(values.quantile(0.5)),
                'q95': float(values.quantile(0.95)),
            }
        summary[f'{method}/{weights}'] = entry

    return summary


def run_experiment(
    spec: ExperimentSpec,
    n_jobs: int = 1,
    save_logs: bool = False,
    logs_folder_path: Optional[str] = None,
    logs_file_name: str = 'cfs.log',
) -> ExperimentResult:
    '''
    Run the replications of an experiment and aggregate them

    Parameters
        spec: The experiment
        n_jobs: joblib workers across replications
        save_logs: If True, log each completed replication
        logs_folder_path: Path to folder to save logs to
        logs_file_name: Name of log file

    Returns
        result: The ExperimentResult. Row order follows replication
        index whatever n_jobs is

    Notes
        A failing replication aborts the run with an error naming its
        index and seed
    '''
    if int(spec.replications) != spec.replications or spec.replications < 1:
        raise ValueError(f'replications must be a positive integer, got {spec.replications}')
    check_level(spec.alpha)
    if spec.treatment and spec.generator != 'randomized-trial':
        raise ValueError(f'counterfactual experiments need the randomized-trial generator, got {spec.generator}')
    if (spec.c_bar_eta is None) != (spec.c_bar_column is None):
        raise ValueError('c_bar_eta and c_bar_column go together')

    results = Parallel(n_jobs=n_jobs)(
        delayed(_run_replication_reporting_seed)(spec, r)
        for r in range(spec.replications)
    )

    replications = pd.concat([rows for rows, _ in results], ignore_index=True)
    strata = pd.concat([table for _, table in results], ignore_index=True)

    if save_logs:
        for r, (rows, _) in enumerate(results):
            for row in rows.itertuples():
                log_details(
                    logs_folder_path, logs_file_name, 'replication',
                    index=r, method=row.method, weights=row.weights,
                    c0=float(row.c0), coverage=row.coverage,
                )

    if not strata.empty:
        strata = (
            strata
            .groupby(['method', 'weights', 'stratum'], sort=True)
            [['var_lo', 'var_hi', 'n', 'coverage', 'mean_ratio', 'mean_lpb']]
            .mean()
            .reset_index()
        )

    return ExperimentResult(
        replications=replications,
        strata=strata,
        summary=_summarize(replications),
    )
