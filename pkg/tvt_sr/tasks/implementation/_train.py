import argparse
from typing import Union
from ...__version__ import __doc__ as title
from ...training.reference import PHASE_REFERENCE_VAE, PHASE_REFERENCE_UNET
from ...training.tvt import PHASE_DECODER, PHASE_ENCODER, PHASE_JOINT
from ...training.sr import PHASE_SR
from ...training.experiment import run_experiment
from ..common import Task, Table, loss_table
from ..models import ExperimentTaskArgs
from ..utils import TaskOptions, add_experiment_args, experiment_config


class TrainTask(Task):
    """
    Executes one training phase of an experiment. Phases it depends on are restored from the workdir, an incomplete
    phase resumes from its latest checkpoint.
    """
    TASK_NAME: str = ''
    PHASE: str = ''
    DESCRIPTION: str = ''

    @classmethod
    def build_parser(cls, task_args) -> argparse.Namespace:
        task_parser = argparse.ArgumentParser(description=f'{title}\n{cls.DESCRIPTION}')
        task_parser.prog = f'{task_parser.prog} {cls.TASK_NAME}'
        task_parser.formatter_class = argparse.RawDescriptionHelpFormatter
        add_experiment_args(task_parser)

        return task_parser.parse_args(task_args)

    def runner(self, parsed_args) -> Union[None, list]:
        phases = self.phases(parsed_args)
        self.log_info(f'{self.TASK_NAME} task: {", ".join(phases)} in workdir "{parsed_args.workdir}"')

        config = experiment_config(parsed_args)
        result = run_experiment(config, parsed_args.workdir, phases, parsed_args.resume)

        records = [record for record in result.workdir.log.records if record['phase'] in phases]
        self.log_info(f'Completed {", ".join(phases)}, manifest: {result.workdir.manifest_file}')
        tables: list[Table] = [loss_table(records, name='Final training losses')] if records else []

        return self.table_output(parsed_args, tables)

    def phases(self, parsed_args) -> tuple[str, ...]:
        return (self.PHASE,)


@TaskOptions.register('train-vae-reference')
class TaskTrainVaeReference(TrainTask):
    TASK_NAME = 'train-vae-reference'
    PHASE = PHASE_REFERENCE_VAE
    DESCRIPTION = 'Train VAE reference task:\nEnd-to-end training of the reference VAE-D8.'

    @staticmethod
    def parser(task_args, **kwargs):
        return TaskTrainVaeReference.build_parser(task_args)


@TaskOptions.register('train-unet-reference')
class TaskTrainUnetReference(TrainTask):
    TASK_NAME = 'train-unet-reference'
    PHASE = PHASE_REFERENCE_UNET
    DESCRIPTION = 'Train UNet reference task:\nTrain the reference denoiser on VAE-D8 latents.'

    @staticmethod
    def parser(task_args, **kwargs):
        return TaskTrainUnetReference.build_parser(task_args)


@TaskOptions.register('train-vae-decoder')
class TaskTrainVaeDecoder(TrainTask):
    TASK_NAME = 'train-vae-decoder'
    PHASE = PHASE_DECODER
    DESCRIPTION = ('Train VAE decoder task:\nStage 1 of transfer VAE training, the VAE-D4 decoder learns to decode '
                   'VAE-D8 latents of 2x upsampled images. With tvt variants t1/t2 the joint phase runs instead.')

    @staticmethod
    def parser(task_args, **kwargs):
        return TaskTrainVaeDecoder.build_parser(task_args)

    def phases(self, parsed_args) -> tuple[str, ...]:
        return (PHASE_DECODER,) if experiment_config(parsed_args).tvt.variant == 'tvt' else (PHASE_JOINT,)


@TaskOptions.register('train-vae-encoder')
class TaskTrainVaeEncoder(TrainTask):
    TASK_NAME = 'train-vae-encoder'
    PHASE = PHASE_ENCODER
    DESCRIPTION = 'Train VAE encoder task:\nStage 2 of transfer VAE training, the VAE-D4 encoder is trained against ' \
                  'the frozen stage 1 decoder.'

    @staticmethod
    def parser(task_args, **kwargs):
        return TaskTrainVaeEncoder.build_parser(task_args)


@TaskOptions.register('train-sr')
class TaskTrainSr(TrainTask):
    TASK_NAME = 'train-sr'
    PHASE = PHASE_SR
    DESCRIPTION = 'Train SR task:\nOne-step super-resolution training of the CE-UNet around the frozen reference ' \
                  'denoiser, decoding with the trained VAE-D4.'

    @staticmethod
    def parser(task_args, **kwargs):
        return TaskTrainSr.build_parser(task_args)


class TrainArgs(ExperimentTaskArgs):
    """ Task arguments of every training task """
    pass
