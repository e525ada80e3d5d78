# !/usr/bin/env python
# -*- coding: utf-8 -*-

import argparse
import dataclasses
import json
import math
import os
import sys
from dataclasses import dataclass, field
from typing import Any, Optional, Union

import numpy as np
import pandas as pd

from cfs_utils import __version__
from cfs_utils.basic_operations import CfsError, SchemaError, check_level, check_seed
from cfs_utils.conformal_operations import (
    CENSORING_KINDS, MEAN_KINDS, QUANTILE_KINDS, SCORE_KINDS, ConformalModel,
    conformalize, naive_lpb, predict_lpb,
)
from cfs_utils.data_operations import load_covariates, load_csv, save_csv, split
from cfs_utils.estimator_operations import model_from_dict, model_to_dict
from cfs_utils.extension_operations import partition_from_names, two_censoring_adapt
from cfs_utils.file_operations import create_folder, dump_json, read_json_file, write_frame_csv, write_json_file
from cfs_utils.log_operations import log_details
from cfs_utils.simulation_operations import (
    GENERATOR_KINDS, TREATMENT_COLUMN, ExperimentSpec, GeneratorSpec, aft_parameters,
    conditional_variance, evaluate, generate, oracle_quantile, run_experiment,
)
from cfs_utils.threshold_operations import (
    estimate_c_bar_discrete, make_threshold_grid, select_c0_calib, select_c0_train,
)


COMMANDS = ['fit', 'predict', 'experiment', 'evaluate', 'gen']
C0_POLICIES = ['auto-train', 'auto-calib']
METHODS = ['weighted', 'naive']
WEIGHT_VARIANTS = ['estimated', 'unit']
LOG_FILE_NAME = 'cfs.log'


@dataclass
class RunConfig:
    '''
    Resolved settings of one command

    Notes
        Built from defaults, then a flat JSON config file, then
        command-line flags, each overriding the last. method and weights
        take comma-separated lists for the experiment command
    '''
    command: str
    data: Optional[str] = None
    model: Optional[str] = None
    out: Optional[str] = None
    meta: Optional[str] = None
    strata: Optional[str] = None
    method: str = 'weighted'
    weights: str = 'estimated'
    score: str = 'CQR'
    alpha: float = 0.1
    c0: Union[float, str] = 'auto-train'
    grid: Optional[list] = None
    quantile_kind: str = 'knn-cdf'
    mean_kind: str = 'knn-mean'
    censoring_kind: str = 'logistic'
    floor: float = 0.05
    k: Optional[int] = None
    seed: int = 0
    train_fraction: float = 0.5
    holdout_fraction: float = 0.25
    groups: Optional[str] = None
    group_breaks: list = field(default_factory=lambda: [0.0])
    c_bar_eta: Optional[float] = None
    c_bar_column: Optional[str] = None
    treatment: Optional[str] = None
    two_censoring: bool = False
    generator: Optional[str] = None
    params: dict = field(default_factory=dict)
    n: int = 3000
    n_test: int = 3000
    replications: int = 1
    jobs: int = 1
    log_dir: Optional[str] = None

    @property
    def methods(self) -> tuple:
        return tuple(item.strip() for item in str(self.method).split(','))

    @property
    def weight_variants(self) -> tuple:
        return tuple(item.strip() for item in str(self.weights).split(','))

    def validate(self) -> 'RunConfig':
        '''
        Check the settings before any work is done, raising a
        SchemaError naming the first bad field
        '''
        try:
            check_level(self.alpha)
            check_seed(self.seed)
            check_level(self.train_fraction, 'train_fraction')
            check_level(self.holdout_fraction, 'holdout_fraction')
        except (TypeError, ValueError) as e:
            raise SchemaError(str(e)) from e

        if self.command not in COMMANDS:
            raise SchemaError(f'unknown command: {self.command}')
        _check_choice('score', self.score, SCORE_KINDS)
        _check_choice('quantile_kind', self.quantile_kind, QUANTILE_KINDS)
        _check_choice('mean_kind', self.mean_kind, MEAN_KINDS)
        _check_choice('censoring_kind', self.censoring_kind, CENSORING_KINDS)
        for method in self.methods:
            _check_choice('method', method, METHODS)
        for weights in self.weight_variants:
            _check_choice('weights', weights, WEIGHT_VARIANTS)
        if self.command == 'fit' and len(self.methods) != 1:
            raise SchemaError('fit takes a single method')
        if self.command == 'fit' and len(self.weight_variants) != 1:
            raise SchemaError('fit takes a single weights variant')
        if isinstance(self.c0, str):
            _check_choice('c0', self.c0, C0_POLICIES)
        elif not (math.isfinite(self.c0) and self.c0 >= 0):
            raise SchemaError(f'c0 must be a finite number >= 0, got {self.c0}')
        if not 0 < self.floor <= 1:
            raise SchemaError(f'floor must lie in (0, 1], got {self.floor}')
        if self.k is not None and (int(self.k) != self.k or self.k < 1):
            raise SchemaError(f'k must be a positive integer, got {self.k}')
        if int(self.replications) != self.replications or self.replications < 1:
            raise SchemaError(f'replications must be >= 1, got {self.replications}')
        if self.n < 1 or self.n_test < 1:
            raise SchemaError('n and n_test must be >= 1')
        if self.jobs == 0:
            raise SchemaError('jobs must be nonzero')
        if self.generator is not None:
            _check_choice('generator', self.generator, GENERATOR_KINDS)
        if (self.c_bar_eta is None) != (self.c_bar_column is None):
            raise SchemaError('c_bar_eta and c_bar_column go together')
        if self.c_bar_eta is not None and not 0 < self.c_bar_eta < 0.5:
            raise SchemaError(f'c_bar_eta must lie in (0, 0.5), got {self.c_bar_eta}')
        if self.command == 'experiment' and self.treatment not in [None, TREATMENT_COLUMN]:
            raise SchemaError(f'generated data name the treatment column {TREATMENT_COLUMN!r}, got {self.treatment!r}')

        required = {
            'fit': ['data', 'out'],
            'predict': ['model', 'data'],
            'experiment': ['generator', 'out'],
            'evaluate': ['model', 'data', 'out'],
            'gen': ['generator', 'out'],
        }[self.command]
        for name in required:
            if getattr(self, name) is None:
                raise SchemaError(f'{self.command} needs --{name.replace("_", "-")}')

        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _check_choice(
    name: str,
    value: Any,
    allowed: list,
) -> None:
    if value not in allowed:
        raise SchemaError(f'{name} must be one of {", ".join(allowed)}, got {value!r}')

    return


def _parse_c0(text: str) -> Union[float, str]:
    try:
        return float(text)
    except ValueError:
        return text


def _parse_floats(text: str) -> list:
    try:
        return [float(item) for item in text.split(',') if item.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f'expected comma-separated numbers, got {text!r}') from e


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='cfs',
        description='Calibrated lower predictive bounds on censored survival times',
    )
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')

    # Flags default to None so that only flags actually given override
    # the config file
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='Flat JSON config file; flags override its keys')
    common.add_argument('--data')
    common.add_argument('--model')
    common.add_argument('--out')
    common.add_argument('--meta', help='Run metadata JSON path (fit)')
    common.add_argument('--strata', help='Per-stratum CSV path (experiment, evaluate)')
    common.add_argument('--method', help='weighted or naive; comma-separated for experiment')
    common.add_argument('--weights', help='estimated or unit; comma-separated for experiment')
    common.add_argument('--score', choices=SCORE_KINDS)
    common.add_argument('--alpha', type=float)
    common.add_argument('--c0', type=_parse_c0, help='A number, auto-train or auto-calib')
    common.add_argument('--grid', type=_parse_floats, help='Comma-separated c0 candidates')
    common.add_argument('--quantile-kind', dest='quantile_kind')
    common.add_argument('--mean-kind', dest='mean_kind')
    common.add_argument('--censoring-kind', dest='censoring_kind')
    common.add_argument('--floor', type=float)
    common.add_argument('--k', type=int)
    common.add_argument('--seed', type=int)
    common.add_argument('--train-fraction', dest='train_fraction', type=float)
    common.add_argument('--holdout-fraction', dest='holdout_fraction', type=float)
    common.add_argument('--groups', help='Covariate column for group-wise calibration')
    common.add_argument('--group-breaks', dest='group_breaks', type=_parse_floats)
    common.add_argument('--c-bar-eta', dest='c_bar_eta', type=float, help='Cap threshold candidates at the c_bar bound for this eta')
    common.add_argument('--c-bar-column', dest='c_bar_column', help='Discrete covariate the c_bar bound is computed within')
    common.add_argument('--treatment', help='Treatment indicator column for counterfactual LPBs')
    common.add_argument('--two-censoring', dest='two_censoring', action='store_const', const=True)
    common.add_argument('--generator', choices=GENERATOR_KINDS)
    common.add_argument('--params', type=json.loads, help='Generator parameter overrides as JSON')
    common.add_argument('--n', type=int)
    common.add_argument('--n-test', dest='n_test', type=int)
    common.add_argument('--replications', type=int)
    common.add_argument('--jobs', type=int, help='Parallel workers, default $CFS_JOBS or 1')
    common.add_argument('--log-dir', dest='log_dir')

    subparsers = parser.add_subparsers(dest='command', required=True)
    subparsers.add_parser('fit', parents=[common], help='Fit and calibrate a model on a CSV')
    subparsers.add_parser('predict', parents=[common], help='Write LPBs for a covariate CSV')
    subparsers.add_parser('experiment', parents=[common], help='Run a Monte Carlo experiment')
    subparsers.add_parser('evaluate', parents=[common], help='Score a model on a labelled CSV')
    subparsers.add_parser('gen', parents=[common], help="Write a generator's dataset to CSV")

    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    '''
    Merge defaults, the config file and command-line flags into a
    validated RunConfig
    '''
    known = {f.name for f in dataclasses.fields(RunConfig)} - {'command'}
    settings = {'jobs': int(os.environ.get('CFS_JOBS', 1))}

    if args.config is not None:
        document = read_json_file(args.config)
        if not isinstance(document, dict):
            raise SchemaError(f'config must be a JSON object: {args.config}')
        unknown = set(document) - known
        if unknown:
            raise SchemaError(f'unknown config keys: {", ".join(sorted(unknown))}')
        settings.update(document)

    for name in known:
        value = getattr(args, name, None)
        if value is not None:
            settings[name] = value

    try:
        config = RunConfig(command=args.command, **settings)
    except TypeError as e:
        raise SchemaError(f'malformed config: {e}') from e

    return config.validate()


def _covariate_index(
    name: str,
    covariate_names: tuple,
    flag: str,
) -> int:
    if name not in covariate_names:
        raise SchemaError(f'missing column {name!r} for {flag}')

    return list(covariate_names).index(name)


def _meta_path(config: RunConfig) -> str:
    return config.meta or os.path.splitext(config.out)[0] + '.meta.json'


def _strata_path(config: RunConfig) -> str:
    return config.strata or os.path.splitext(config.out)[0] + '.strata.csv'


def _log(
    config: RunConfig,
    event: str,
    **fields: Any,
) -> None:
    if config.log_dir is not None:
        create_folder(config.log_dir)
        log_details(config.log_dir, LOG_FILE_NAME, event, **fields)

    return


def _plain(value: Any) -> Any:
    '''
    Convert numpy scalars to Python values and NaN to None
    '''
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and math.isnan(value):
        return None

    return value


def _records(df: pd.DataFrame) -> list:
    return [{key: _plain(value) for key, value in row.items()} for row in df.to_dict('records')]


def _load_model(path: str) -> ConformalModel:
    model = model_from_dict(read_json_file(path))
    if not isinstance(model, ConformalModel):
        raise SchemaError(f'not a conformal model file: {path}')

    return model


def _load_dataset(config: RunConfig):
    ds = load_csv(config.data)
    print('Read ' + config.data)
    if config.two_censoring:
        ds = two_censoring_adapt(ds)

    return ds


def cmd_fit(config: RunConfig) -> int:
    '''
    Fit a model on a labelled CSV, writing the model JSON and a run
    metadata JSON
    '''
    ds = _load_dataset(config)
    folds = split(ds, config.train_fraction, config.seed)
    _log(config, 'split', n_train=int(folds.train.size), n_calib=int(folds.calib.size), seed=config.seed)
    c_bar = None

    if config.method == 'naive':
        model = naive_lpb(ds, folds, config.alpha, config.quantile_kind, config.k)
    else:
        censoring_kind = 'unit' if config.weights == 'unit' else config.censoring_kind
        options = {
            'quantile_kind': config.quantile_kind,
            'mean_kind': config.mean_kind,
            'k': config.k,
            'floor': config.floor,
            'treatment_column': config.treatment,
            'censoring_kind': censoring_kind,
        }

        c0 = config.c0
        if isinstance(c0, str):
            if config.c_bar_eta is not None:
                column = _covariate_index(config.c_bar_column, ds.covariate_names, 'c_bar_column')
                c_bar = estimate_c_bar_discrete(ds.X[folds.train, column], ds.c[folds.train], config.c_bar_eta)
                _log(config, 'c_bar', column=config.c_bar_column, eta=config.c_bar_eta, c_bar=c_bar)
            grid = make_threshold_grid(values=config.grid, censoring=ds.c[folds.train], upper=c_bar)
            if c0 == 'auto-train':
                c0 = select_c0_train(
                    ds, folds.train, grid, config.score, config.alpha,
                    holdout_fraction=config.holdout_fraction, seed=config.seed,
                    n_jobs=config.jobs, **options,
                )
            else:
                c0 = select_c0_calib(ds, folds, grid, config.score, config.alpha, n_jobs=config.jobs, **options)
            _log(config, 'select_c0', policy=config.c0, c0=float(c0), candidates=grid.candidates.size)

        partition = None
        if config.groups is not None:
            partition = partition_from_names(config.groups, ds.covariate_names, config.group_breaks)

        model = conformalize(
            ds, folds, config.score, c0, alpha=config.alpha, partition=partition, **options,
        )

    write_json_file(config.out, model_to_dict(model))
    metadata = {
        'version': __version__,
        'command': 'fit',
        'config': config.to_dict(),
        'c0': None if math.isinf(model.c0) else model.c0,
        'c0_policy': config.c0 if isinstance(config.c0, str) else 'fixed',
        'c_bar': c_bar,
        'score': model.score.kind,
        'method': model.method,
        'seed': config.seed,
        **model.metadata,
    }
    write_json_file(_meta_path(config), metadata)
    _log(config, 'fit', c0=model.c0, n_calib_selected=model.calibration.n, out=config.out)
    print('Wrote ' + config.out)

    return 0


def cmd_predict(config: RunConfig) -> int:
    '''
    Write one LPB row per covariate row; to stdout where --out is not
    given
    '''
    model = _load_model(config.model)
    covariates = load_covariates(config.data, model.covariate_names)
    df = predict_lpb(model, covariates[list(model.covariate_names)].to_numpy(), ids=covariates['id'])

    if config.out is None:
        sys.stdout.write(write_frame_csv(df))
    else:
        write_frame_csv(df, config.out)
        print('Wrote ' + config.out)

    return 0


def cmd_experiment(config: RunConfig) -> int:
    '''
    Run a Monte Carlo experiment, writing the report JSON and the mean
    strata CSV
    '''
    spec = ExperimentSpec(
        generator=config.generator,
        n=config.n,
        n_test=config.n_test,
        replications=config.replications,
        seed=config.seed,
        params=config.params,
        methods=config.methods,
        weights=config.weight_variants,
        score=config.score,
        alpha=config.alpha,
        c0=config.c0,
        grid=None if config.grid is None else tuple(config.grid),
        train_fraction=config.train_fraction,
        holdout_fraction=config.holdout_fraction,
        quantile_kind=config.quantile_kind,
        mean_kind=config.mean_kind,
        censoring_kind=config.censoring_kind,
        k=config.k,
        floor=config.floor,
        two_censoring=True if config.two_censoring else None,
        treatment=config.treatment is not None,
        group_column=None if config.groups is None else _generated_column(config.groups, 'groups'),
        group_breaks=tuple(config.group_breaks),
        c_bar_column=None if config.c_bar_column is None else _generated_column(config.c_bar_column, 'c_bar_column'),
        c_bar_eta=config.c_bar_eta,
    )
    if config.log_dir is not None:
        create_folder(config.log_dir)
    result = run_experiment(
        spec, n_jobs=config.jobs,
        save_logs=config.log_dir is not None, logs_folder_path=config.log_dir,
        logs_file_name=LOG_FILE_NAME,
    )

    write_json_file(config.out, {
        'version': __version__,
        'command': 'experiment',
        'config': config.to_dict(),
        'summary': result.summary,
        'replications': _records(result.replications),
    })
    write_frame_csv(result.strata, _strata_path(config))
    print('Wrote ' + config.out)

    return 0


def _generated_column(
    name: str,
    flag: str,
) -> int:
    '''
    Generated datasets name covariates x1..xp
    '''
    if not (name.startswith('x') and name[1:].isdigit() and int(name[1:]) >= 1):
        raise SchemaError(f'generated data has covariates x1..xp, got {flag}={name!r}')

    return int(name[1:]) - 1


def cmd_evaluate(config: RunConfig) -> int:
    '''
    Score a model on a labelled CSV; with --generator, also the oracle
    ratio and the Var(T | X) strata
    '''
    model = _load_model(config.model)
    test = _load_dataset(config)

    oracle, variance = None, None
    if config.generator is not None:
        generator = GeneratorSpec(config.generator, test.n, config.seed, config.params)
        oracle = oracle_quantile(generator, test.X, model.score.alpha)
        variance = conditional_variance(*aft_parameters(generator, test.X))

    report = evaluate(model, test, oracle, variance)
    write_json_file(config.out, {
        'version': __version__,
        'command': 'evaluate',
        'config': config.to_dict(),
        'report': report.to_dict(),
    })
    if not report.strata.empty:
        write_frame_csv(report.strata, _strata_path(config))
    print('Wrote ' + config.out)

    return 0


def cmd_gen(config: RunConfig) -> int:
    ds = generate(GeneratorSpec(config.generator, config.n, config.seed, config.params))
    save_csv(ds, config.out)
    print('Wrote ' + config.out)

    return 0


HANDLERS = {
    'fit': cmd_fit,
    'predict': cmd_predict,
    'experiment': cmd_experiment,
    'evaluate': cmd_evaluate,
    'gen': cmd_gen,
}


def _report_error(
    kind: str,
    error: BaseException,
    config: Optional[RunConfig] = None,
) -> None:
    if config is not None:
        _log(config, 'failure', kind=kind, type=type(error).__name__)
    sys.stderr.write(dump_json({
        'error': {
            'kind': kind,
            'type': type(error).__name__,
            'message': str(error),
        },
    }))

    return


def main(argv: Optional[list] = None) -> int:
    '''
    Run the command line

    Returns
        exit_code: 0 on success, 2 for input or schema errors, 3 for
        degenerate data, 4 for anything else

    Notes
        Failures write an error JSON document to stderr
    '''
    args = build_parser().parse_args(argv)
    config = None

    try:
        config = resolve_config(args)
        return HANDLERS[config.command](config)
    except CfsError as e:
        _report_error(e.kind, e, config)
        return e.exit_code
    except (ValueError, TypeError) as e:
        _report_error(SchemaError.kind, e, config)
        return SchemaError.exit_code
    except Exception as e:
        _report_error(CfsError.kind, e, config)
        return CfsError.exit_code
