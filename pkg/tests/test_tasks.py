import argparse
import json
import pytest
import torch
from pydantic import ValidationError
from tvt_sr.__main__ import execute_task
from tvt_sr.base.data import save_image, load_image
from tvt_sr.tasks.common import Table, TableFilter, Task, TaskException, indexed_filename, get_table_filters
from tvt_sr.tasks.utils import TaskOptions, int_type, resolution_type, experiment_config
from tvt_sr.tasks.models import ExperimentTaskArgs
from tvt_sr.tasks.implementation import (TaskAuditFlops, TaskDegrade, TaskRun, TaskEvalSr, TaskInferSr,
                                         TaskTrainVaeDecoder, AuditFlopsArgs, DegradeArgs, RunArgs, InferSrArgs)
from tvt_sr.training.experiment import PHASE_AUDIT, PHASE_EVAL_SR
from tvt_sr.training.reference import PHASE_REFERENCE_VAE


#
# Tables
#
@pytest.fixture
def table():
    table = Table('Name', 'Value', name='Sample')
    table.extend((('alpha', 1.23456789), ('beta', 2), ('gamma', 3)))
    table.add_marker()
    table.add('total', 6)
    return table


def test_table_rounds_floats_and_counts_rows(table):
    assert len(table) == 4
    assert next(iter(table)).column_1 == 1.2346
    assert str(table).startswith('*** Sample ***')


def test_table_filters(table):
    assert [row.column_0 for row in table.filtered(TableFilter('^(a|b)')) if row] == ['alpha', 'beta']
    assert [row.column_0 for row in table.filtered(*get_table_filters('beta', None)) if row] == ['alpha', 'gamma',
                                                                                               'total']
    assert len(table.filtered(TableFilter('^3$', column=1))) == 1
    with pytest.raises(ValueError):
        TableFilter('a', column=-1)


def test_table_exports(table, tmp_path):
    table.save(tmp_path / 'table.csv')
    assert (tmp_path / 'table.csv').read_text().splitlines()[0] == 'Name,Value'
    assert json.loads(table.json())['data'][1] == {'column_0': 'beta', 'column_1': 2}
    assert indexed_filename('report.csv', 2) == 'report_2.csv'
    assert indexed_filename('report', 1) == 'report_1'


def test_task_outcome_counts_warnings():
    task = Task()
    task.log_info('Starting %s', 'audit')
    assert task.outcome('successfully', 'with caveats: {tally}') == 'successfully'

    task.log_warning('Skipping %s', 'a.txt')
    task.log_warning('Skipping %s', 'b.txt')
    assert task.outcome('successfully', 'with caveats: {tally}') == 'with caveats: 2 warnings'
    assert task.log_count.warning == 2 and task.log_count.info == 1


#
# Options and argument types
#
def test_task_registration():
    assert TaskOptions.task('audit-flops') is TaskAuditFlops
    assert TaskOptions.task('degrade') is TaskDegrade
    assert TaskOptions.task('run') is TaskRun
    for name in ('train-vae-reference', 'train-unet-reference', 'train-vae-decoder', 'train-vae-encoder',
                 'train-sr', 'infer-sr', 'eval-recon', 'eval-sr'):
        assert issubclass(TaskOptions.task(name), Task)
    with pytest.raises(argparse.ArgumentTypeError):
        TaskOptions.task('no-such-task')
    with pytest.raises(TaskException):
        TaskOptions.register('bad')(object)


def test_argument_types():
    assert int_type(1, 10, '5') == 5
    with pytest.raises(argparse.ArgumentTypeError):
        int_type(1, 10, '11')
    with pytest.raises(argparse.ArgumentTypeError):
        int_type(1, 10, 'x')
    assert resolution_type('64') == (64, 64)
    assert resolution_type('32x48') == (32, 48)
    with pytest.raises(argparse.ArgumentTypeError):
        resolution_type('0x4')


def test_parsers_reject_bad_arguments():
    with pytest.raises(SystemExit):
        TaskAuditFlops.parser(['--spec', 'no-such-preset'])
    with pytest.raises(SystemExit):
        TaskDegrade.parser([])
    with pytest.raises(SystemExit):
        TaskRun.parser(['--phases', 'no-such-phase'])
    with pytest.raises(SystemExit):
        TaskDegrade.parser(['--out', 'pairs', '--count', '0'])


def test_parsers_defaults():
    parsed = TaskAuditFlops.parser([])
    assert parsed.spec == 'tvt' and parsed.resolution is None and not parsed.crosscheck
    parsed = TaskRun.parser(['--preset', 'toy', '--seed', '3', '--phases', 'audit'])
    assert parsed.preset == 'toy' and parsed.seed == 3 and parsed.phases == ['audit']
    assert parsed.workdir == 'experiment'


def test_experiment_preset_choices():
    assert TaskRun.parser(['--preset', 'paper']).preset == 'paper'
    with pytest.raises(SystemExit):
        TaskRun.parser(['--preset', 'full'])


def test_args_models():
    assert AuditFlopsArgs(spec='d4', resolution='64x64').resolution == (64, 64)
    with pytest.raises(ValidationError):
        AuditFlopsArgs(spec='no-such-preset')
    assert DegradeArgs(out='pairs').count == 16
    with pytest.raises(ValidationError):
        DegradeArgs(out='pairs', count=0)
    with pytest.raises(ValidationError):
        RunArgs(phases=['no-such-phase'])
    with pytest.raises(ValidationError):
        ExperimentTaskArgs(preset='no-such-preset')
    with pytest.raises(ValidationError):
        InferSrArgs(in_file='missing.png', out_file='out.png', workdir='no-such-workdir')


def test_experiment_config_precedence(tiny_config, tmp_path):
    config_file = tmp_path / 'custom.yaml'
    tiny_config.save_yaml(config_file)
    workdir = tmp_path / 'work'
    workdir.mkdir()
    tiny_config.model_copy(update={'seed': 7}).save_yaml(workdir / 'config.yaml')

    from_file = experiment_config(TaskRun.parser(['--config', str(config_file), '--workdir', str(workdir)]))
    assert from_file == tiny_config
    saved = experiment_config(TaskRun.parser(['--workdir', str(workdir)]))
    assert saved.seed == 7
    overridden = experiment_config(TaskRun.parser(['--workdir', str(workdir), '--seed', '2']))
    assert overridden.seed == 2
    preset = experiment_config(TaskRun.parser(['--workdir', str(workdir), '--preset', 'toy']))
    assert preset.preset == 'toy' and preset.models.vae_d4 != tiny_config.models.vae_d4


#
# Runners
#
def test_audit_flops_runner():
    task = TaskAuditFlops()
    tables = task.runner(TaskAuditFlops.parser(['--spec', 'd4', '--compare', 'd8', '--summary']))

    assert len(tables) == 2
    reduction = {row.column_0: row.column_1 for row in tables[1]}
    assert reduction['params_pct'] == pytest.approx(81.875, abs=0.01)


def test_audit_flops_crosscheck_and_resolution():
    tables = TaskAuditFlops().runner(TaskAuditFlops.parser(['--spec', 'toy-tvt', '--resolution', '32',
                                                            '--crosscheck']))
    assert tables[0].name == 'Per layer cost: toy-tvt'
    assert tables[-1].name == 'Published figures cross-check'
    assert len(tables[-1]) > 0


def test_audit_flops_rejects_non_square_pipeline():
    task = TaskAuditFlops()
    assert execute_task(task, TaskAuditFlops.parser(['--spec', 'tvt', '--resolution', '64x32'])) == 1


def test_audit_flops_exports_tables(tmp_path):
    csv_file = tmp_path / 'audit.csv'
    output = TaskAuditFlops().runner(TaskAuditFlops.parser(['--spec', 'toy-d4', '--save-csv', str(csv_file)]))

    assert output is None
    assert csv_file.exists() and (tmp_path / 'audit_1.csv').exists()


def test_audit_flops_include_filter():
    tables = TaskAuditFlops().runner(TaskAuditFlops.parser(['--spec', 'toy-d4', '--include', 'decoder']))
    assert all('decoder' in row.column_0 for row in tables[0] if row is not None)


def test_degrade_runner(tmp_path):
    out_dir = tmp_path / 'pairs'
    tables = TaskDegrade().runner(TaskDegrade.parser(['--out', str(out_dir), '-n', '2', '--crop-size', '32',
                                                      '--seed', '4']))

    assert len(tables[0]) == 2
    assert (out_dir / 'manifest.json').exists()
    assert next(iter(tables[0])).column_5 == 'blur > resize > noise > compression'


def test_run_task_audit_phase(tiny_config, tmp_path):
    config_file = tmp_path / 'config.yaml'
    tiny_config.save_yaml(config_file)
    workdir = tmp_path / 'work'
    parsed = TaskRun.parser(['--config', str(config_file), '--workdir', str(workdir), '--phases', PHASE_AUDIT])

    assert execute_task(TaskRun(), parsed) == 0
    assert PHASE_AUDIT in json.loads((workdir / 'manifest.json').read_text())['phases']


def test_train_task_on_incomplete_dependencies_fails(tiny_config, tmp_path):
    config_file = tmp_path / 'config.yaml'
    tiny_config.save_yaml(config_file)
    parsed = TaskTrainVaeDecoder.parser(['--config', str(config_file), '--workdir', str(tmp_path / 'work')])
    assert execute_task(TaskTrainVaeDecoder(), parsed) == 1


@pytest.mark.slow
def test_cli_train_eval_infer_flow(tiny_config, tmp_path):
    config_file = tmp_path / 'config.yaml'
    tiny_config.save_yaml(config_file)
    workdir = str(tmp_path / 'work')

    assert execute_task(TaskRun(), TaskRun.parser(['--config', str(config_file), '--workdir', workdir])) == 0
    manifest = json.loads((tmp_path / 'work' / 'manifest.json').read_text())
    assert {PHASE_REFERENCE_VAE, PHASE_EVAL_SR} <= set(manifest['phases'])

    tables = TaskEvalSr().runner(TaskEvalSr.parser(['--workdir', workdir]))
    assert tables

    lr_file, sr_file, bicubic_file = tmp_path / 'lr.png', tmp_path / 'sr.png', tmp_path / 'bicubic.png'
    save_image(torch.rand(3, 8, 8), lr_file)
    tables = TaskInferSr().runner(TaskInferSr.parser(['--in', str(lr_file), '--out', str(sr_file),
                                                      '--bicubic', str(bicubic_file), '--workdir', workdir]))
    assert load_image(sr_file).shape == (3, 32, 32)
    assert load_image(bicubic_file).shape == (3, 32, 32)
    assert len(tables[0]) == 3
