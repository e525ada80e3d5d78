# !/usr/bin/env python
# -*- coding: utf-8 -*-

from typing import Iterable, Optional

import numpy as np


class CfsError(Exception):
    '''
    Base class for errors raised by cfs_utils

    Notes
    -----
    kind and exit_code are read by the command-line front end when it
    turns an exception into an error document and an exit status
    '''
    kind = 'internal'
    exit_code = 4


class SchemaError(CfsError, ValueError):
    '''
    Input data or configuration does not have the expected shape
    '''
    kind = 'schema'
    exit_code = 2


class DegenerateDataError(CfsError, ValueError):
    '''
    The data leave nothing to fit or calibrate on
    '''
    kind = 'numerical'
    exit_code = 3


def check_level(
    value: float,
    name: str = 'alpha',
) -> float:
    '''
    Check that a level lies strictly between 0 and 1

    Parameters
    ----------
    value: The level to check
    name: Name used in the error message

    Returns
    -------
    value: The level, as a float

    Examples
    --------
    >>> check_level(0.1)
    0.1
    >>> check_level(1.0)
    Traceback (most recent call last):
    ...
    ValueError: alpha must lie in (0, 1), got 1.0

    '''
    value = float(value)
    if not 0 < value < 1:
        raise ValueError(f'{name} must lie in (0, 1), got {value}')

    return value


def check_seed(seed: int) -> int:
    '''
    Check that a seed is a nonnegative integer

    Parameters
    ----------
    seed: The seed to check

    Returns
    -------
    seed: The seed, as an int

    '''
    if isinstance(seed, bool) or int(seed) != seed:
        raise TypeError(f'seed must be an integer, got {seed!r}')
    if seed < 0:
        raise ValueError(f'seed must be >= 0, got {seed}')

    return int(seed)


def make_rng(
    seed: int,
    *stream: int,
) -> np.random.Generator:
    '''
    Create a reproducible random generator for a seed and an optional
    stream path

    Parameters
    ----------
    seed: Master seed
    stream: Further nonnegative integers identifying an independent
    stream, e.g. a replication index

    Returns
    -------
    rng: A numpy Generator over the counter-based Philox bit generator

    Notes
    -----
    The same (seed, *stream) always gives the same draws, on every
    platform numpy supports

    '''
    entropy = [check_seed(seed)] + [check_seed(s) for s in stream]

    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def derive_seed(
    seed: int,
    *stream: int,
) -> int:
    '''
    Derive a child seed from a master seed and a stream path

    Parameters
    ----------
    seed: Master seed
    stream: Stream path, e.g. (replication_index,)

    Returns
    -------
    child_seed: A nonnegative 63-bit integer

    '''
    entropy = [check_seed(seed)] + [check_seed(s) for s in stream]
    state = np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)[0]

    return int(state >> np.uint64(1))


def as_index_array(idx: Optional[Iterable[int]], n: int) -> np.ndarray:
    '''
    Convert an index set into an integer array, checking bounds

    Parameters
    ----------
    idx: Index set, or None for all of range(n)
    n: Number of rows indexed into

    Returns
    -------
    idx: Integer numpy array

    '''
    if idx is None:
        return np.arange(n)

    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f'index out of range for {n} rows')

    return idx
