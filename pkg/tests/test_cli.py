# #!/usr/bin/env python
# -*- coding: utf-8 -*-


import json

import numpy as np
import pandas as pd
import pytest

from cfs_utils import cli
from cfs_utils import conformal_operations as co
from cfs_utils import data_operations as dao
from cfs_utils import estimator_operations as eo
from cfs_utils import threshold_operations as to
from cfs_utils.file_operations import read_json_file


def _gen(tmp_path, name='train.csv', generator='table1-uvt-homo', n=600, seed=1):
    path = str(tmp_path / name)
    assert cli.main(['gen', '--generator', generator, '--n', str(n), '--seed', str(seed), '--out', path]) == 0

    return path


def _error(capsys):
    return json.loads(capsys.readouterr().err)['error']


def test_gen_fit_predict(tmp_path, capsys):
    data = _gen(tmp_path)
    model = str(tmp_path / 'model.json')
    out = str(tmp_path / 'lpb.csv')

    assert cli.main(['fit', '--data', data, '--c0', '2.0', '--seed', '3', '--out', model]) == 0
    assert cli.main(['predict', '--model', model, '--data', data, '--out', out]) == 0

    df = pd.read_csv(out)
    assert list(df.columns) == co.PREDICTION_COLUMNS
    assert len(df) == 600
    assert df['lpb'].between(0, 2.0).all()

    meta = read_json_file(str(tmp_path / 'model.meta.json'))
    assert meta['c0'] == 2.0
    assert meta['c0_policy'] == 'fixed'
    assert meta['n_train'] + meta['n_calib'] == 600

    return


def test_fit_is_byte_identical(tmp_path):
    data = _gen(tmp_path)
    first = str(tmp_path / 'first.json')
    second = str(tmp_path / 'second.json')

    for path in [first, second]:
        assert cli.main(['fit', '--data', data, '--c0', 'auto-train', '--seed', '4', '--out', path]) == 0

    with open(first, 'rb') as f, open(second, 'rb') as g:
        assert f.read() == g.read()

    return


def test_reloaded_model_matches_in_memory_fit(tmp_path):
    data = _gen(tmp_path)
    path = str(tmp_path / 'model.json')

    assert cli.main(['fit', '--data', data, '--c0', '2.0', '--score', 'CDR', '--seed', '5', '--out', path]) == 0

    ds = dao.load_csv(data)
    in_memory = co.conformalize(ds, dao.split(ds, 0.5, 5), 'CDR', c0=2.0)
    reloaded = eo.model_from_dict(read_json_file(path))

    np.testing.assert_allclose(
        reloaded.predict(ds.X)['lpb'], in_memory.predict(ds.X)['lpb'], rtol=0, atol=1e-12,
    )

    return


def test_predict_to_stdout_and_edge_rows(tmp_path, capsys):
    data = _gen(tmp_path)
    model = str(tmp_path / 'model.json')
    assert cli.main(['fit', '--data', data, '--c0', '2.0', '--out', model]) == 0
    capsys.readouterr()

    one = tmp_path / 'one.csv'
    one.write_text('id,x1\n42,1.5\n')
    assert cli.main(['predict', '--model', model, '--data', str(one)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == ','.join(co.PREDICTION_COLUMNS)
    assert len(lines) == 2
    assert lines[1].startswith('42,')

    empty = tmp_path / 'empty.csv'
    empty.write_text('x1\n')
    assert cli.main(['predict', '--model', model, '--data', str(empty)]) == 0
    assert capsys.readouterr().out.splitlines() == [','.join(co.PREDICTION_COLUMNS)]

    return


def test_fit_naive_and_grouped(tmp_path):
    data = _gen(tmp_path, generator='table1-mvt-homo', n=500)
    naive = str(tmp_path / 'naive.json')
    grouped = str(tmp_path / 'grouped.json')

    assert cli.main(['fit', '--data', data, '--method', 'naive', '--out', naive]) == 0
    assert cli.main(['fit', '--data', data, '--c0', '2.0', '--groups', 'x1', '--out', grouped]) == 0

    assert read_json_file(str(tmp_path / 'naive.meta.json'))['c0'] is None
    assert read_json_file(naive)['c0'] == 'inf'
    assert read_json_file(grouped)['partition']['column'] == 0

    return


def test_fit_two_censoring_and_treatment(tmp_path):
    two = _gen(tmp_path, name='two.csv', generator='two-censoring')
    trial = _gen(tmp_path, name='trial.csv', generator='randomized-trial', n=1000)

    assert cli.main(['fit', '--data', two, '--c0', '2.0', '--two-censoring', '--out', str(tmp_path / 'two.json')]) == 0
    assert cli.main(['fit', '--data', trial, '--c0', '3.0', '--treatment', 'treatment', '--out', str(tmp_path / 'trial.json')]) == 0

    assert read_json_file(str(tmp_path / 'trial.json'))['propensity']['type'] == 'CensoringModel'

    return


def test_missing_column_is_schema_error(tmp_path, capsys):
    data = tmp_path / 'bad.csv'
    data.write_text('x1,observed\n0.5,2\n1.5,3\n')

    assert cli.main(['fit', '--data', str(data), '--c0', '1.0', '--out', str(tmp_path / 'model.json')]) == 2

    error = _error(capsys)
    assert error['kind'] == 'schema'
    assert "missing column 'censoring'" in error['message']

    return


def test_bad_settings_are_schema_errors(tmp_path, capsys):
    data = _gen(tmp_path)
    model = str(tmp_path / 'model.json')

    assert cli.main(['fit', '--data', data, '--alpha', '1.5', '--out', model]) == 2
    assert _error(capsys)['kind'] == 'schema'
    assert cli.main(['fit', '--data', data, '--c0', 'sometimes', '--out', model]) == 2
    assert _error(capsys)['kind'] == 'schema'
    assert cli.main(['fit', '--data', data]) == 2
    assert 'needs --out' in _error(capsys)['message']
    assert cli.main(['fit', '--data', data.replace('.csv', '.txt'), '--c0', '1.0', '--out', model]) == 2
    assert 'File ending not recognised' in _error(capsys)['message']

    with pytest.raises(SystemExit):
        cli.main(['fit', '--score', 'XYZ'])

    return


def test_degenerate_data_exit_code(tmp_path, capsys):
    data = _gen(tmp_path)

    logs = tmp_path / 'logs'

    assert cli.main(['fit', '--data', data, '--c0', '1e9', '--out', str(tmp_path / 'model.json'), '--log-dir', str(logs)]) == 3
    assert _error(capsys)['kind'] == 'numerical'
    assert (logs / 'cfs.log').read_text().splitlines()[-1].endswith(' - failure kind=numerical type=DegenerateDataError')

    return


def test_predict_dimension_mismatch(tmp_path, capsys):
    data = _gen(tmp_path)
    model = str(tmp_path / 'model.json')
    assert cli.main(['fit', '--data', data, '--c0', '2.0', '--out', model]) == 0
    capsys.readouterr()

    other = tmp_path / 'other.csv'
    other.write_text('x2\n1.0\n')

    assert cli.main(['predict', '--model', model, '--data', str(other)]) == 2
    assert 'dimension mismatch' in _error(capsys)['message']

    return


def test_config_file_and_flag_override(tmp_path):
    data = _gen(tmp_path)
    config = tmp_path / 'config.json'
    config.write_text(json.dumps({'c0': 2.0, 'score': 'CMR', 'alpha': 0.2}))
    model = str(tmp_path / 'model.json')

    assert cli.main(['fit', '--config', str(config), '--data', data, '--alpha', '0.1', '--out', model]) == 0

    document = read_json_file(model)
    assert document['score']['kind'] == 'CMR'
    assert document['score']['alpha'] == 0.1

    config.write_text(json.dumps({'colour': 'blue'}))
    assert cli.main(['fit', '--config', str(config), '--data', data, '--out', model]) == 2

    return


def test_experiment_outputs_are_reproducible(tmp_path):
    out = str(tmp_path / 'report.json')
    args = [
        'experiment', '--generator', 'table1-uvt-homo', '--n', '300', '--n-test', '300',
        '--replications', '2', '--seed', '7', '--c0', '2.0', '--method', 'weighted,naive',
        '--weights', 'estimated,unit', '--out', out,
    ]

    reports = []
    for _ in range(2):
        assert cli.main(args) == 0
        with open(out, 'rb') as f, open(str(tmp_path / 'report.strata.csv'), 'rb') as g:
            reports.append((f.read(), g.read()))

    assert reports[0] == reports[1]

    document = json.loads(reports[0][0])
    assert set(document['summary']) == {'naive/none', 'weighted/estimated', 'weighted/unit'}
    assert len(document['replications']) == 6

    return


def test_evaluate_command(tmp_path):
    train = _gen(tmp_path)
    test = _gen(tmp_path, name='test.csv', seed=2)
    model = str(tmp_path / 'model.json')
    report = str(tmp_path / 'report.json')
    logs = tmp_path / 'logs'

    assert cli.main(['fit', '--data', train, '--c0', '2.0', '--out', model, '--log-dir', str(logs)]) == 0
    assert cli.main(['evaluate', '--model', model, '--data', test, '--generator', 'table1-uvt-homo', '--out', report]) == 0

    document = read_json_file(report)['report']
    assert document['n_test'] == 600
    assert 0 <= document['beta_lo'] <= document['coverage'] <= document['beta_hi'] <= 1
    assert document['mean_ratio'] is not None
    assert len(pd.read_csv(str(tmp_path / 'report.strata.csv'))) == 10
    assert (logs / 'cfs.log').exists()

    return


def test_experiment_treatment_column_is_fixed(tmp_path, capsys):
    out = str(tmp_path / 'report.json')

    assert cli.main(['experiment', '--generator', 'randomized-trial', '--treatment', 'arm', '--out', out]) == 2
    assert "treatment column 'treatment'" in _error(capsys)['message']

    return


def test_fit_caps_auto_c0_at_c_bar(tmp_path, capsys):
    data = _gen(tmp_path, generator='synthetic-t')
    model = str(tmp_path / 'model.json')

    args = ['fit', '--data', data, '--c0', 'auto-calib', '--c-bar-eta', '0.2', '--c-bar-column', 'x2', '--seed', '2', '--out', model]
    assert cli.main(args) == 0

    ds = dao.load_csv(data)
    folds = dao.split(ds, 0.5, 2)
    c_bar = to.estimate_c_bar_discrete(ds.X[folds.train, 1], ds.c[folds.train], 0.2)
    meta = read_json_file(str(tmp_path / 'model.meta.json'))
    assert meta['c_bar'] == pytest.approx(c_bar)
    assert meta['c0'] <= c_bar

    assert cli.main(['fit', '--data', data, '--c0', 'auto-calib', '--c-bar-eta', '0.2', '--out', model]) == 2
    assert 'go together' in _error(capsys)['message']
    assert cli.main(['fit', '--data', data, '--c0', 'auto-calib', '--c-bar-eta', '0.2', '--c-bar-column', 'x9', '--out', model]) == 2
    assert "missing column 'x9'" in _error(capsys)['message']

    return
