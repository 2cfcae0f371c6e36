import argparse
from pathlib import Path
from typing import Union, Optional
from pydantic import field_validator
from ...__version__ import __doc__ as title
from ...base.models_base import DATA_DIR
from ...base.degradation import load_pairs
from ...base.sr import SrEvaluation, evaluate_sr
from ...training.experiment import PHASE_EVAL_RECON, PHASE_EVAL_SR, open_experiment, run_experiment, \
    write_sr_evaluation
from ..common import Task, Table, metric_table
from ..models import ExistingWorkdirTaskArgs
from ..validators import validate_pairs_dir
from ..utils import TaskOptions, add_experiment_args, experiment_config, pairs_dir_type


def sr_tables(evaluation: SrEvaluation, label: str) -> list[Table]:
    summary = metric_table(evaluation.records, name=f'SR on {label}', label='one-step SR')
    summary.extend(('bicubic', record.name, record.mean, record.count) for record in evaluation.baseline_records)

    metrics = sorted(evaluation.per_image[0]) if evaluation.per_image else []
    per_image = Table('Image', *metrics, name=f'Per image SR on {label}')
    per_image.extend((name, *(values[metric] for metric in metrics))
                     for name, values in zip(evaluation.names, evaluation.per_image))

    return [summary, per_image]


@TaskOptions.register('eval-recon')
class TaskEvalRecon(Task):
    @staticmethod
    def parser(task_args, **kwargs):
        task_parser = argparse.ArgumentParser(description=f'{title}\nEval recon task:\n'
                                                          'PSNR, SSIM and perceptual distance of VAE-D8 and VAE-D4 '
                                                          'round trips on the held-out images.')
        task_parser.prog = f'{task_parser.prog} eval-recon'
        task_parser.formatter_class = argparse.RawDescriptionHelpFormatter
        add_experiment_args(task_parser, existing_workdir=True)

        return task_parser.parse_args(task_args)

    def runner(self, parsed_args) -> Union[None, list]:
        self.log_info(f'Eval recon task: workdir "{parsed_args.workdir}"')

        result = run_experiment(experiment_config(parsed_args), parsed_args.workdir, (PHASE_EVAL_RECON,),
                                parsed_args.resume)

        table = metric_table((), name='Reconstruction on held-out images', label='')
        for model_name, records in result.recon.items():
            table.extend((model_name, record.name, record.mean, record.count) for record in records)

        return self.table_output(parsed_args, [table])


class EvalReconArgs(ExistingWorkdirTaskArgs):
    pass


@TaskOptions.register('eval-sr')
class TaskEvalSr(Task):
    @staticmethod
    def parser(task_args, **kwargs):
        task_parser = argparse.ArgumentParser(description=f'{title}\nEval SR task:\n'
                                                          'PSNR, SSIM and perceptual distance of the one-step SR '
                                                          'pipeline against HR references, with the bicubic baseline.')
        task_parser.prog = f'{task_parser.prog} eval-sr'
        task_parser.formatter_class = argparse.RawDescriptionHelpFormatter
        task_parser.add_argument('--pairs', metavar='<directory>', type=pairs_dir_type,
                                 help='pair dataset written by the degrade task, relative paths are under the data '
                                      'directory. Default is the held-out test pairs of the experiment')
        add_experiment_args(task_parser, existing_workdir=True)

        return task_parser.parse_args(task_args)

    def runner(self, parsed_args) -> Union[None, list]:
        config = experiment_config(parsed_args)

        if parsed_args.pairs is None:
            self.log_info(f'Eval SR task: held-out test pairs, workdir "{parsed_args.workdir}"')
            result = run_experiment(config, parsed_args.workdir, (PHASE_EVAL_SR,), parsed_args.resume)
            return self.table_output(parsed_args, sr_tables(result.sr, 'held-out pairs'))

        self.log_info(f'Eval SR task: pairs "{parsed_args.pairs}", workdir "{parsed_args.workdir}"')
        experiment = open_experiment(config, parsed_args.workdir, parsed_args.resume)
        pairs = load_pairs(Path(DATA_DIR, parsed_args.pairs))
        if not pairs:
            self.log_warning(f'No pairs in "{parsed_args.pairs}"')
            return None

        evaluation = evaluate_sr(experiment.sr_pipeline(), pairs, feature_net=experiment.feature_net)
        metric_files = write_sr_evaluation(experiment.workdir, evaluation,
                                           prefix=f'{PHASE_EVAL_SR}-{Path(parsed_args.pairs).name}')
        self.log_info(f'Metrics saved as {", ".join(metric_files)}')

        return self.table_output(parsed_args, sr_tables(evaluation, parsed_args.pairs))


class EvalSrArgs(ExistingWorkdirTaskArgs):
    pairs: Optional[str] = None

    # Validators
    check_pairs = field_validator('pairs')(validate_pairs_dir)
