# !/usr/bin/env python
# -*- coding: utf-8 -*-

from dataclasses import dataclass
from typing import Any, Iterable, Optional

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from cfs_utils.basic_operations import DegenerateDataError, check_seed
from cfs_utils.conformal_operations import conformalize, predict_lpb
from cfs_utils.data_operations import Dataset, SplitIndices, split_indices


DECILES = np.arange(1, 10) / 10


@dataclass(frozen=True, eq=False)
class ThresholdGrid:
    '''
    Candidate thresholds, strictly increasing

    Attributes
        candidates: The candidate values of c0
        source: 'explicit' or 'censoring-deciles'
    '''
    candidates: np.ndarray
    source: str = 'explicit'

    def __post_init__(self):
        candidates = np.asarray(self.candidates, dtype=float).reshape(-1)
        if candidates.size == 0:
            raise ValueError('threshold grid is empty')
        if not np.all(np.isfinite(candidates)) or np.any(candidates < 0):
            raise ValueError('threshold candidates must be finite and nonnegative')
        if np.any(np.diff(candidates) <= 0):
            raise ValueError('threshold candidates must be strictly increasing')
        object.__setattr__(self, 'candidates', candidates)


def make_threshold_grid(
    values: Optional[Iterable[float]] = None,
    censoring: Optional[Any] = None,
    upper: Optional[float] = None,
) -> ThresholdGrid:
    '''
    Build a threshold grid from explicit values or from censoring times

    Parameters
        values: Explicit candidates, in any order, duplicates allowed
        censoring: Censoring times whose deciles 10%..90% make the grid,
        used where values is None
        upper: Optional cap; candidates above it are dropped

    Returns
        grid: ThresholdGrid of sorted, distinct candidates

    Notes
        upper is meant for the c_bar bound of estimate_c_bar_discrete,
        above which too few units are left uncensored
    '''
    if values is not None:
        candidates, source = np.unique(np.asarray(list(values), dtype=float)), 'explicit'
    elif censoring is not None:
        candidates, source = np.unique(np.quantile(np.asarray(censoring, dtype=float), DECILES)), 'censoring-deciles'
    else:
        raise ValueError('either values or censoring times are needed to build a grid')

    if upper is not None:
        candidates = candidates[candidates <= upper]
        if candidates.size == 0:
            raise ValueError(f'no threshold candidates at or below the cap {upper}')

    return ThresholdGrid(candidates=candidates, source=source)


def _mean_lpb(
    ds: Dataset,
    fit_split: SplitIndices,
    eval_idx: np.ndarray,
    c0: float,
    options: dict,
) -> tuple[float, bool]:
    try:
        model = conformalize(ds, fit_split, c0=c0, **options)
    except DegenerateDataError:
        return np.nan, True

    return float(predict_lpb(model, ds.X[eval_idx])['lpb'].mean()), False


def score_c0_candidates(
    ds: Dataset,
    fit_split: SplitIndices,
    eval_idx: Iterable[int],
    grid: ThresholdGrid,
    n_jobs: int = 1,
    **options: Any,
) -> pd.DataFrame:
    '''
    Mean LPB over evaluation points for every threshold candidate

    Parameters
        ds: The dataset
        fit_split: Folds to run the conformal procedure on
        eval_idx: Rows whose covariates the LPBs are averaged over
        grid: The candidates
        n_jobs: joblib workers; results keep grid order
        **options: Passed to conformalize (score, alpha,
        censoring_kind, ...)

    Returns
        df: Columns c0, mean_lpb, skipped. A candidate is skipped, with
        mean_lpb NaN, when it leaves no training or calibration unit
        with C >= c0

    Notes
        Uninformative bounds count as 0 in the mean
    '''
    eval_idx = np.asarray(list(eval_idx), dtype=np.int64)
    results = Parallel(n_jobs=n_jobs)(
        delayed(_mean_lpb)(ds, fit_split, eval_idx, c0, options)
        for c0 in grid.candidates
    )

    return pd.DataFrame({
        'c0': grid.candidates,
        'mean_lpb': [mean for mean, _ in results],
        'skipped': [skipped for _, skipped in results],
    })


def _argmax_c0(scores: pd.DataFrame) -> float:
    '''
    Candidate with the highest mean LPB; the smallest c0 wins a tie
    '''
    kept = scores[~scores['skipped']]
    if kept.empty:
        raise DegenerateDataError('every threshold candidate left an empty subpopulation')
    best = kept['mean_lpb'].max()

    return float(kept.loc[kept['mean_lpb'] == best, 'c0'].min())


def select_c0_train(
    ds: Dataset,
    train_idx: Iterable[int],
    grid: ThresholdGrid,
    score: str = 'CQR',
    alpha: float = 0.1,
    holdout_fraction: float = 0.25,
    seed: int = 0,
    n_jobs: int = 1,
    **options: Any,
) -> float:
    '''
    Choose c0 using the training fold only

    Parameters
        ds: The dataset
        train_idx: The training fold
        grid: Threshold candidates
        score: Score kind
        alpha: Target miscoverage
        holdout_fraction: Share of the training fold held out to
        compare candidates, default 0.25
        seed: Seed of the holdout and inner splits
        n_jobs: joblib workers across candidates
        **options: Passed to conformalize

    Returns
        c0: The candidate whose LPBs have the highest mean on the
        holdout

    Notes
        The rest of the training fold is split 50/50 into an inner
        training and calibration fold, so the calibration fold is never
        looked at
    '''
    seed = check_seed(seed)
    if not 0 < holdout_fraction < 1:
        raise ValueError(f'holdout_fraction must lie in (0, 1), got {holdout_fraction}')

    outer = split_indices(np.asarray(list(train_idx)), 1 - holdout_fraction, seed, 1)
    inner = split_indices(outer.train, 0.5, seed, 2)
    scores = score_c0_candidates(
        ds, inner, outer.calib, grid, n_jobs=n_jobs,
        score=score, alpha=alpha, **options,
    )

    return _argmax_c0(scores)


def select_c0_calib(
    ds: Dataset,
    split: SplitIndices,
    grid: ThresholdGrid,
    score: str = 'CQR',
    alpha: float = 0.1,
    n_jobs: int = 1,
    **options: Any,
) -> float:
    '''
    Choose c0 maximizing the mean LPB over the calibration covariates

    Parameters
        ds: The dataset
        split: Training and calibration folds, as used for the final fit
        grid: Threshold candidates
        score: Score kind
        alpha: Target miscoverage
        n_jobs: joblib workers across candidates
        **options: Passed to conformalize

    Returns
        c0: The best candidate; the smallest wins a tie
    '''
    scores = score_c0_candidates(
        ds, split, split.calib, grid, n_jobs=n_jobs,
        score=score, alpha=alpha, **options,
    )

    return _argmax_c0(scores)


def estimate_c_bar_discrete(
    labels: Any,
    C: Any,
    eta: float,
) -> float:
    '''
    Upper bound c_bar on thresholds for discrete covariates

    Parameters
        labels: Discrete covariate level of each unit
        C: Censoring times
        eta: Required uncensored mass is 2 * eta, eta in (0, 0.5)

    Returns
        c_bar: Minimum over levels of the largest c with at least a
        2 * eta fraction of the level's C at or above c

    Notes
        Within a level of n_l units this is the j-th largest C, where j
        is one more than the number of i in 1..n_l with i / n_l < 2 eta

    Examples
        One level with C = 1..10 and eta = 0.2 gives the 4th largest, 7
    '''
    eta = float(eta)
    if not 0 < eta < 0.5:
        raise ValueError(f'eta must lie in (0, 0.5), got {eta}')
    labels = np.asarray(labels).reshape(-1)
    C = np.asarray(C, dtype=float).reshape(-1)
    if labels.shape != C.shape:
        raise ValueError(f'{labels.size} labels for {C.size} censoring times')
    if C.size == 0:
        raise ValueError('no observations')

    c_bars = []
    for level in np.unique(labels):
        descending = np.sort(C[labels == level])[::-1]
        n_level = descending.shape[0]
        j = int(np.sum(np.arange(1, n_level + 1) / n_level < 2 * eta))
        c_bars.append(descending[min(j, n_level - 1)])

    return float(min(c_bars))
