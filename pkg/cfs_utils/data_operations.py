# !/usr/bin/env python
# -*- coding: utf-8 -*-

import os
import re
from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

import numpy as np
import pandas as pd

from cfs_utils.basic_operations import (
    DegenerateDataError, SchemaError, as_index_array, check_seed, make_rng,
)
from cfs_utils.file_operations import check_file_ending, create_folder, write_frame_csv


DEFAULT_SCHEMA = {
    'covariates': None,
    'censoring': 'censoring',
    'observed': 'observed',
    'event': 'event',
    'true_time': 'true_time',
}


@dataclass(frozen=True)
class SurvivalRecord:
    '''
    One unit: covariates, censoring time, observed time and, in
    simulations only, the true survival time
    '''
    x: tuple
    c: float
    t_tilde: float
    event: bool
    t_true: Optional[float] = None


@dataclass(frozen=True, eq=False)
class Dataset:
    '''
    A column-oriented set of SurvivalRecords sharing one covariate
    dimension

    Attributes
        X: Covariate matrix, shape (n, p)
        c: Censoring times
        t_tilde: Observed times, min(T, C)
        event: Whether the observed time is the survival time. Where
        None, inferred as t_tilde < c, so ties count as censored
        t_true: True survival times, simulations only
        covariate_names: Column names of X, x1..xp by default
        extra: Further named per-row columns, e.g. group labels,
        treatment indicators or c_end

    Notes
        Arrays are copied and made read-only on construction, so a
        Dataset can be shared between workers
    '''
    X: np.ndarray
    c: np.ndarray
    t_tilde: np.ndarray
    event: Optional[np.ndarray] = None
    t_true: Optional[np.ndarray] = None
    covariate_names: Optional[tuple] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        X = np.array(self.X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        if X.ndim != 2:
            raise SchemaError('X must be a 2-d array')
        n, p = X.shape
        if n == 0:
            raise SchemaError('a dataset must contain at least one record')

        c = _as_column(self.c, n, 'censoring')
        t_tilde = _as_column(self.t_tilde, n, 'observed')
        t_true = None if self.t_true is None else _as_column(self.t_true, n, 'true_time')

        if self.event is None:
            if t_true is not None:
                event = t_true <= c
            else:
                event = t_tilde < c
        else:
            event = np.array(self.event, dtype=bool).reshape(-1)
            if event.shape[0] != n:
                raise SchemaError(f'event has {event.shape[0]} rows, expected {n}')

        names = self.covariate_names
        if names is None:
            names = tuple(f'x{j + 1}' for j in range(p))
        names = tuple(str(name) for name in names)
        if len(names) != p:
            raise SchemaError(f'{len(names)} covariate names given for {p} columns')

        extra = {}
        for key, value in self.extra.items():
            extra[str(key)] = _as_column(value, n, str(key), finite=False)

        _check_invariants(X, c, t_tilde, t_true)

        for array in [X, c, t_tilde, event, t_true, *extra.values()]:
            if array is not None:
                array.setflags(write=False)

        object.__setattr__(self, 'X', X)
        object.__setattr__(self, 'c', c)
        object.__setattr__(self, 't_tilde', t_tilde)
        object.__setattr__(self, 'event', event)
        object.__setattr__(self, 't_true', t_true)
        object.__setattr__(self, 'covariate_names', names)
        object.__setattr__(self, 'extra', extra)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def records(self) -> list[SurvivalRecord]:
        return [
            SurvivalRecord(
                x=tuple(self.X[i]),
                c=float(self.c[i]),
                t_tilde=float(self.t_tilde[i]),
                event=bool(self.event[i]),
                t_true=None if self.t_true is None else float(self.t_true[i]),
            )
            for i in range(self.n)
        ]

    def subset(self, idx: Iterable[int]) -> 'Dataset':
        '''
        Return the rows in idx, in the order given
        '''
        idx = as_index_array(idx, self.n)

        return Dataset(
            X=self.X[idx],
            c=self.c[idx],
            t_tilde=self.t_tilde[idx],
            event=self.event[idx],
            t_true=None if self.t_true is None else self.t_true[idx],
            covariate_names=self.covariate_names,
            extra={key: value[idx] for key, value in self.extra.items()},
        )

    def to_frame(self) -> pd.DataFrame:
        '''
        Return the dataset as a dataframe with the default schema's
        column names
        '''
        df = pd.DataFrame(self.X, columns=list(self.covariate_names))
        df['censoring'] = self.c
        df['observed'] = self.t_tilde
        df['event'] = self.event.astype(int)
        if self.t_true is not None:
            df['true_time'] = self.t_true
        for key, value in self.extra.items():
            df[key] = value

        return df


@dataclass(frozen=True, eq=False)
class SplitIndices:
    '''
    Disjoint training and calibration folds, reproducible from
    (seed, train_fraction)
    '''
    train: np.ndarray
    calib: np.ndarray
    seed: int
    train_fraction: float


def _as_column(
    value: object,
    n: int,
    name: str,
    finite: bool = True,
) -> np.ndarray:
    '''
    Copy a per-row column into a float array of length n
    '''
    array = np.array(value, dtype=float).reshape(-1)
    if array.shape[0] != n:
        raise SchemaError(f'{name} has {array.shape[0]} rows, expected {n}')
    if finite and not np.all(np.isfinite(array)):
        row = int(np.flatnonzero(~np.isfinite(array))[0]) + 1
        raise SchemaError(f'non-finite value in column {name} at row {row}')

    return array


def _check_invariants(
    X: np.ndarray,
    c: np.ndarray,
    t_tilde: np.ndarray,
    t_true: Optional[np.ndarray],
) -> None:
    '''
    Raise a SchemaError naming the first row that breaks a
    SurvivalRecord invariant

    Notes
        Row numbers are 1-based and count data rows only
    '''
    bad = ~np.all(np.isfinite(X), axis=1)
    if bad.any():
        raise SchemaError(f'non-finite covariate at row {int(np.flatnonzero(bad)[0]) + 1}')

    bad = (c < 0) | (t_tilde < 0)
    if t_true is not None:
        bad |= t_true < 0
    if bad.any():
        raise SchemaError(f'negative time at row {int(np.flatnonzero(bad)[0]) + 1}')

    bad = t_tilde > c
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise SchemaError(
            f'observed time exceeds censoring time at row {row + 1} '
            f'(observed={t_tilde[row]!r}, censoring={c[row]!r})'
        )

    if t_true is not None:
        bad = t_tilde != np.minimum(t_true, c)
        if bad.any():
            raise SchemaError(
                f'observed time is not min(true_time, censoring) at row {int(np.flatnonzero(bad)[0]) + 1}'
            )

    return


def _covariate_columns(
    columns: list,
    covariates: Optional[list],
) -> list:
    '''
    Resolve the covariate columns: the schema's list where given,
    otherwise every column named x<number>, in numeric order
    '''
    if covariates is not None:
        missing = [col for col in covariates if col not in columns]
        if missing:
            raise SchemaError(f'missing column {missing[0]!r}')
        return list(covariates)

    found = [col for col in columns if re.fullmatch(r'x\d+', str(col))]
    if not found:
        raise SchemaError('missing covariate columns x1..xp')

    return sorted(found, key=lambda col: int(str(col)[1:]))


def load_csv(
    path: str,
    schema: Optional[dict] = None,
) -> Dataset:
    '''
    Read a survival dataset from a CSV file

    Parameters
        path: Path to the CSV file, with a header row
        schema: Column mapping, with keys covariates (list or None to
        pick up x1..xp), censoring, observed, event, true_time. Missing
        keys take the DEFAULT_SCHEMA value

    Returns
        ds: The validated Dataset, row order preserved

    Notes
        - censoring and observed columns are required; event and
        true_time are used where present
        - Every other numeric column is kept in Dataset.extra
        - Missing columns, non-finite values and observed > censoring
        raise a SchemaError naming the column or row
    '''
    schema = {**DEFAULT_SCHEMA, **(schema or {})}

    check_file_ending(path, ['.csv'])
    if not os.path.exists(path):
        raise SchemaError(f'File not found: {path}')

    df = pd.read_csv(path)
    columns = list(df.columns)

    # Resolve columns
    covariates = _covariate_columns(columns, schema['covariates'])
    for role in ['censoring', 'observed']:
        if schema[role] not in columns:
            raise SchemaError(f'missing column {schema[role]!r}')

    used = covariates + [schema['censoring'], schema['observed']]
    has_event = schema['event'] in columns
    has_true = schema['true_time'] in columns
    if has_event:
        used.append(schema['event'])
    if has_true:
        used.append(schema['true_time'])

    # Convert to numbers, reporting the first unparseable or missing cell
    numeric = df[used].apply(pd.to_numeric, errors='coerce')
    bad = ~np.isfinite(numeric.to_numpy(dtype=float))
    if has_event:
        # NB: Blank event cells mean "unknown", not an error
        bad[:, used.index(schema['event'])] = False
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise SchemaError(f'non-finite value in column {used[col]!r} at row {row + 1}')

    event = None
    if has_event:
        event_values = numeric[schema['event']].to_numpy(dtype=float)
        if np.isnan(event_values).any():
            c = numeric[schema['censoring']].to_numpy(dtype=float)
            t_tilde = numeric[schema['observed']].to_numpy(dtype=float)
            event_values = np.where(np.isnan(event_values), t_tilde < c, event_values)
        event = event_values != 0

    extra = {
        col: df[col].to_numpy(dtype=float)
        for col in columns
        if col not in used and pd.api.types.is_numeric_dtype(df[col])
    }

    return Dataset(
        X=numeric[covariates].to_numpy(dtype=float),
        c=numeric[schema['censoring']].to_numpy(dtype=float),
        t_tilde=numeric[schema['observed']].to_numpy(dtype=float),
        event=event,
        t_true=numeric[schema['true_time']].to_numpy(dtype=float) if has_true else None,
        covariate_names=tuple(covariates),
        extra=extra,
    )


def save_csv(
    ds: Dataset,
    path: str,
) -> None:
    '''
    Write a dataset to CSV with the default schema's column names and
    12 significant digits

    Parameters
        ds: The dataset to write
        path: Path to write to

    Returns
        None
    '''
    create_folder(os.path.dirname(path))
    write_frame_csv(ds.to_frame(), path)

    return


def load_covariates(
    path: str,
    names: Iterable[str],
) -> pd.DataFrame:
    '''
    Read the covariate columns needed for prediction from a CSV file

    Parameters
        path: Path to the CSV file
        names: Covariate column names, in model order

    Returns
        df: Dataframe with exactly the named columns, as floats, plus
        an 'id' column (taken from the file where present, otherwise
        the 0-based row number)

    Notes
        A file with a header and no rows gives an empty dataframe
    '''
    names = list(names)
    check_file_ending(path, ['.csv'])
    if not os.path.exists(path):
        raise SchemaError(f'File not found: {path}')

    df = pd.read_csv(path)
    missing = [col for col in names if col not in df.columns]
    if missing:
        raise SchemaError(
            f'dimension mismatch: missing covariate column {missing[0]!r} '
            f'(model expects {len(names)} covariates)'
        )

    covariates = df[names].apply(pd.to_numeric, errors='coerce').astype(float)
    bad = ~np.isfinite(covariates.to_numpy())
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise SchemaError(f'non-finite value in column {names[col]!r} at row {row + 1}')

    ids = df['id'] if 'id' in df.columns else pd.Series(np.arange(len(df)))
    covariates.insert(0, 'id', ids.to_numpy())

    return covariates


def split_indices(
    idx: Union[int, Iterable[int]],
    train_fraction: float,
    seed: int,
    *stream: int,
) -> SplitIndices:
    '''
    Split an index set into training and calibration folds uniformly at
    random

    Parameters
        idx: The index set, or an int n for range(n)
        train_fraction: Fraction of indices that go to the training fold
        seed: Seed of the permutation
        stream: Optional stream path, so that nested splits drawn from
        the same seed stay independent

    Returns
        split: SplitIndices, with each fold in ascending index order

    Notes
        |train| = round(train_fraction * n), rounding halves up
    '''
    idx = np.arange(idx) if isinstance(idx, (int, np.integer)) else np.asarray(idx, dtype=np.int64)
    n = idx.shape[0]
    seed = check_seed(seed)

    if not 0 < train_fraction < 1:
        raise ValueError(f'train_fraction must lie in (0, 1), got {train_fraction}')
    if n < 4:
        raise DegenerateDataError(f'at least 4 units are needed to split, got {n}')

    n_train = int(np.floor(train_fraction * n + 0.5))
    if n_train == 0 or n_train == n:
        raise DegenerateDataError(
            f'train_fraction {train_fraction} leaves an empty fold for n={n}'
        )

    permutation = make_rng(seed, *stream).permutation(n)

    return SplitIndices(
        train=np.sort(idx[permutation[:n_train]]),
        calib=np.sort(idx[permutation[n_train:]]),
        seed=seed,
        train_fraction=float(train_fraction),
    )


def split(
    ds: Dataset,
    train_fraction: float = 0.5,
    seed: int = 0,
) -> SplitIndices:
    '''
    Split a dataset's rows into training and calibration folds

    Parameters
        ds: The dataset
        train_fraction: Fraction of rows in the training fold
        seed: Seed of the permutation

    Returns
        split: SplitIndices over range(ds.n)
    '''
    return split_indices(ds.n, train_fraction, seed)


def select_subpopulation(
    ds: Dataset,
    idx: Optional[Iterable[int]],
    c0: float,
    fold: str = 'calibration',
) -> tuple[np.ndarray, np.ndarray]:
    '''
    Keep the units of idx whose censoring time is at least c0 and cap
    their observed times at c0

    Parameters
        ds: The dataset
        idx: Index set to select from, or None for all rows
        c0: The threshold
        fold: Fold name used in the error message

    Returns
        selected: Indices i in idx with C_i >= c0, in idx order
        y: min(observed_i, c0) for each selected unit

    Notes
        On the selected units min(observed, c0) equals min(T, c0), since
        C >= c0 means T was observed at least up to c0. Ties C_i = c0
        are included
    '''
    c0 = float(c0)
    if not c0 >= 0:
        raise ValueError(f'c0 must be >= 0, got {c0}')

    idx = as_index_array(idx, ds.n)
    selected = idx[ds.c[idx] >= c0]
    if selected.size == 0:
        raise DegenerateDataError(f'no {fold} units with C >= c0 (c0={c0!r})')

    y = np.minimum(ds.t_tilde[selected], c0)

    return selected, y
