# !/usr/bin/env python
# -*- coding: utf-8 -*-

import json
import math
import os
from typing import Any, Iterable, Optional

import pandas as pd

from cfs_utils.basic_operations import SchemaError


def create_folder(path: Optional[str]) -> None:
    '''
        Create a folder, and any missing parents, if it doesn't already
        exist

        Parameters
            path: Path to folder to create. Empty or None is a no-op, so
            that the parent of a bare filename can be passed straight in

        Returns
            None
    '''
    if path:
        os.makedirs(path, exist_ok=True)

    return


def extract_filetype(
    path: str,
    with_dot: bool = True,
) -> str:
    '''
        Extract the lowercase filetype ending from a path

        Parameters
            path: The path to the file
            with_dot: Whether to include the dot in the output

        Returns
            filetype: The filetype ending, or '' where there is none
    '''
    filetype = os.path.splitext(path)[1].lower()

    if not with_dot:
        filetype = filetype.lstrip('.')

    return filetype


def check_file_ending(
    path: str,
    allowed: Iterable[str],
) -> None:
    '''
        Raise a SchemaError if a path does not have one of the allowed
        file endings

        Parameters
            path: The path to check
            allowed: Allowed endings, including the dot

        Returns
            None
    '''
    allowed = list(allowed)
    if extract_filetype(path) not in allowed:
        raise SchemaError(
            f'File ending not recognised: {path} (expected one of {", ".join(allowed)})'
        )

    return


def _replace_non_finite(value: Any) -> Any:
    '''
        Recursively replace non-finite floats by the strings 'inf',
        '-inf' and 'nan', which JSON can carry
    '''
    if isinstance(value, float) and not math.isfinite(value):
        return 'nan' if math.isnan(value) else ('inf' if value > 0 else '-inf')
    if isinstance(value, dict):
        return {key: _replace_non_finite(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_replace_non_finite(item) for item in value]

    return value


def dump_json(document: Any) -> str:
    '''
        Serialize a document to JSON text deterministically

        Parameters
            document: A JSON-compatible document

        Returns
            text: Sorted-key, indented JSON, ending in a newline

        Notes
            Floats are written with repr, so a reload gives back the
            same float bit for bit
    '''
    return json.dumps(
        _replace_non_finite(document),
        sort_keys=True,
        indent=2,
        allow_nan=False,
    ) + '\n'


def write_json_file(
    path: str,
    document: Any,
) -> None:
    '''
        Write a document to a JSON file, creating the parent folder

        Parameters
            path: Path to write to
            document: A JSON-compatible document

        Returns
            None
    '''
    create_folder(os.path.dirname(path))
    with open(path, 'w', newline='\n') as f:
        f.write(dump_json(document))

    return


def read_json_file(path: str) -> Any:
    '''
        Read a JSON file

        Parameters
            path: Path to read from

        Returns
            document: The parsed document

        Notes
            Malformed JSON is reported as a SchemaError
    '''
    check_file_ending(path, ['.json'])
    if not os.path.exists(path):
        raise SchemaError(f'File not found: {path}')

    with open(path, 'r') as f:
        try:
            document = json.load(f)
        except json.JSONDecodeError as e:
            raise SchemaError(f'Malformed JSON in {path}: {e}') from e

    return document


def write_frame_csv(
    df: pd.DataFrame,
    path: Optional[str] = None,
) -> Optional[str]:
    '''
        Write a dataframe to CSV with 12 significant digits

        Parameters
            df: The dataframe to write
            path: Path to write to. Where None, the CSV text is returned

        Returns
            text: The CSV text where path is None, otherwise None

        Notes
            Line endings are always '\\n' so output is byte-identical
            across platforms
    '''
    if path is not None:
        create_folder(os.path.dirname(path))

    return df.to_csv(
        path,
        index=False,
        float_format='%.12g',
        lineterminator='\n',
    )
