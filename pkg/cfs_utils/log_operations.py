# !/usr/bin/env python
# -*- coding: utf-8 -*-

import os
from typing import Optional

import pandas as pd


def format_log_message(
    event: str,
    **fields: object,
) -> str:
    '''
        Format a run event as 'event key=value ...'

        Parameters
            event: Short event name, e.g. 'fit' or 'replication'
            **fields: Values to record with the event

        Returns
            message: The formatted message

        Notes
            Fields are written in the order given; floats use repr so
            that logged values match the values written to disk
    '''
    parts = [event]
    for key, value in fields.items():
        if isinstance(value, float):
            value = repr(value)
        parts.append(f'{key}={value}')

    return ' '.join(parts)


def log_details(
    logs_folder_path: Optional[str],
    logs_file_name: str,
    event: str,
    **fields: object,
) -> None:
    '''
        Append a timestamped run event to a log file

        Parameters
            logs_folder_path: Path to folder to save log to
            logs_file_name: Name of log file
            event: Short event name
            **fields: Values to record with the event

        Returns
            None

        Notes
            The timestamp only ever goes into the log file, never into
            model, report or prediction files
    '''

    if logs_folder_path is None:
        raise ValueError('logs_folder_path must be specified where logging is enabled')

    # Log details
    with open(os.path.join(logs_folder_path, logs_file_name), 'a') as log:
        log.write(
            str(pd.Timestamp.now()) + ' - ' +
            format_log_message(event, **fields) + '\n'
        )

    return
