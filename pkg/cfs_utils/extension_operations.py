# !/usr/bin/env python
# -*- coding: utf-8 -*-

from dataclasses import dataclass
from typing import Any, Optional

import numpy as np

from cfs_utils.basic_operations import SchemaError
from cfs_utils.data_operations import Dataset
from cfs_utils import estimator_operations as eo


@eo.register_model_type
@dataclass(frozen=True, eq=False)
class GroupPartition:
    '''
    Partition of the covariate space by break points on one covariate

    Attributes
        column: Index of the covariate the partition reads
        breaks: Increasing break points. Group g (1-based) holds the x
        with breaks[g - 2] <= x[column] < breaks[g - 1]
        name: Name of the covariate, for display

    Notes
        A sign split is breaks=(0,), a binary 0/1 label breaks=(0.5,)
    '''
    column: int
    breaks: tuple = (0.0,)
    name: Optional[str] = None

    def __post_init__(self):
        breaks = tuple(float(b) for b in np.atleast_1d(self.breaks))
        if any(b >= c for b, c in zip(breaks, breaks[1:])):
            raise ValueError(f'breaks must be strictly increasing, got {breaks}')
        if int(self.column) != self.column or self.column < 0:
            raise ValueError(f'column must be a nonnegative integer, got {self.column}')
        object.__setattr__(self, 'breaks', breaks)
        object.__setattr__(self, 'column', int(self.column))

    @property
    def K(self) -> int:
        return len(self.breaks) + 1

    def assign(self, X: Any) -> np.ndarray:
        return assign_groups(self, X)


def assign_groups(
    partition: GroupPartition,
    X: Any,
) -> np.ndarray:
    '''
    Map each row of X to its group id in 1..K
    '''
    X = eo.as_matrix(X)
    if partition.column >= X.shape[1]:
        raise SchemaError(
            f'dimension mismatch: partition reads covariate {partition.column + 1} of {X.shape[1]}'
        )

    return np.searchsorted(np.asarray(partition.breaks), X[:, partition.column], side='right') + 1


def partition_from_names(
    column_name: str,
    covariate_names: tuple,
    breaks: Any = (0.0,),
) -> GroupPartition:
    '''
    Build a GroupPartition on a named covariate
    '''
    if column_name not in covariate_names:
        raise SchemaError(f'missing column {column_name!r} for groups')

    return GroupPartition(column=list(covariate_names).index(column_name), breaks=breaks, name=column_name)


def two_censoring_adapt(
    ds: Dataset,
    c_end_column: str = 'c_end',
    c_loss_column: str = 'c_loss',
) -> Dataset:
    '''
    Recast data censored by both end of study and loss to follow-up as
    a single-censoring problem

    Parameters
        ds: Dataset whose observed times are min(T, C_end, C_loss), with
        C_end in ds.extra[c_end_column]
        c_end_column: Name of the end-of-study censoring column
        c_loss_column: Name of the loss-to-follow-up column, used only
        to carry true times in simulations

    Returns
        adapted: Dataset with censoring time C_end and outcome
        T' = min(T, C_loss). The observed times are unchanged. Where
        true times are known, T' becomes the true time and T is kept in
        extra['t_true_uncensored']

    Notes
        A bound that covers T' also covers T, since T >= T'
    '''
    if c_end_column not in ds.extra:
        raise SchemaError(f'missing column {c_end_column!r}')
    c_end = ds.extra[c_end_column]

    bad = ~np.isfinite(c_end) | (ds.t_tilde > c_end)
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise SchemaError(
            f'observed time exceeds {c_end_column} at row {row + 1} '
            f'(observed={ds.t_tilde[row]!r}, {c_end_column}={c_end[row]!r})'
        )

    extra = dict(ds.extra)
    t_true = None
    if ds.t_true is not None:
        extra['t_true_uncensored'] = ds.t_true
        if c_loss_column in ds.extra:
            t_true = np.minimum(ds.t_true, ds.extra[c_loss_column])

    return Dataset(
        X=ds.X,
        c=c_end,
        t_tilde=ds.t_tilde,
        t_true=t_true,
        covariate_names=ds.covariate_names,
        extra=extra,
    )
