import argparse
from typing import Union, Optional
from pydantic import field_validator
from ...__version__ import __doc__ as title
from ...training.experiment import PHASES, ExperimentResult, run_experiment
from ..common import Task, Table, loss_table, metric_table, cost_summary_table
from ..models import ExperimentTaskArgs
from ..utils import TaskOptions, add_experiment_args, experiment_config


@TaskOptions.register('run')
class TaskRun(Task):
    @staticmethod
    def parser(task_args, **kwargs):
        task_parser = argparse.ArgumentParser(description=f'{title}\nRun task:\n'
                                                          'Sequence the experiment phases: reference pretraining, '
                                                          'transfer VAE training, SR training, evaluation and audit.')
        task_parser.prog = f'{task_parser.prog} run'
        task_parser.formatter_class = argparse.RawDescriptionHelpFormatter
        task_parser.add_argument('--phases', metavar='<phase>', nargs='+', choices=PHASES,
                                 help=f'phases to execute ({", ".join(PHASES)}). Default is the phases of the config, '
                                      f'or all phases applicable to its tvt variant')
        add_experiment_args(task_parser)

        return task_parser.parse_args(task_args)

    def runner(self, parsed_args) -> Union[None, list]:
        config = experiment_config(parsed_args)
        phases = parsed_args.phases if parsed_args.phases is not None else config.selected_phases
        self.log_info(f'Run task: {config.preset} experiment, seed {config.seed}, phases {", ".join(phases)}')

        result = run_experiment(config, parsed_args.workdir, phases, parsed_args.resume)
        self.log_info(f'Experiment manifest: {result.workdir.manifest_file}')

        return self.table_output(parsed_args, self.result_tables(result, phases))

    @staticmethod
    def result_tables(result: ExperimentResult, phases) -> list[Table]:
        tables = []
        records = [record for record in result.workdir.log.records if record['phase'] in phases]
        if records:
            tables.append(loss_table(records, name='Final training losses'))

        if result.recon:
            recon = metric_table((), name='Reconstruction on held-out images', label='')
            for model_name, model_records in result.recon.items():
                recon.extend((model_name, record.name, record.mean, record.count) for record in model_records)
            tables.append(recon)

        if result.sr is not None:
            sr_table = metric_table(result.sr.records, name='SR on held-out pairs', label='one-step SR')
            sr_table.extend(('bicubic', record.name, record.mean, record.count)
                            for record in result.sr.baseline_records)
            tables.append(sr_table)

        if result.audit is not None:
            tables.append(cost_summary_table(result.audit, name='Pipeline cost by layer kind'))

        return tables


class RunArgs(ExperimentTaskArgs):
    phases: Optional[list[str]] = None

    @field_validator('phases')
    @classmethod
    def known_phases(cls, phases: Optional[list[str]]) -> Optional[list[str]]:
        if phases is not None:
            unknown = set(phases) - set(PHASES)
            if unknown:
                raise ValueError(f'Unknown phases: {", ".join(sorted(unknown))}. Options are: {", ".join(PHASES)}.')
        return phases
