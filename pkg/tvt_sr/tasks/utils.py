"""
 TVT-SR - Transfer VAE Training toolset for one-step super-resolution

 tvt_sr.tasks.utils
 This module implements task utility classes and functions
"""
import argparse
from pathlib import Path
from ..base.models_base import DATA_DIR
from ..base.catalog import preset_tags, PresetKind
from ..training.experiment import ExperimentConfig, load_config
from .common import Task, TaskException
from .validators import (validate_workdir, validate_regex, validate_existing_file, validate_filename,
                         validate_image_source, validate_checkpoint_file, validate_resolution, validate_pairs_dir)

# Default experiment work directory, under the data directory
DEFAULT_WORKDIR = 'experiment'


class TaskOptions:
    _task_options = {}

    @classmethod
    def task(cls, task_str):
        task_cls = cls._task_options.get(task_str)
        if task_cls is None:
            raise argparse.ArgumentTypeError(f'Invalid task. Options are: {cls.options()}.')
        return task_cls

    @classmethod
    def options(cls):
        return ', '.join(cls._task_options)

    @classmethod
    def register(cls, task_name):
        """
        Decorator used for registering tasks.
        The class being decorated needs to be a subclass of Task.
        @param task_name: String presented to the user in order to select a task
        @return: decorator
        """

        def decorator(task_cls):
            if not isinstance(task_cls, type) or not issubclass(task_cls, Task):
                raise TaskException(f'Invalid task registration attempt: {task_cls.__name__}')

            cls._task_options[task_name] = task_cls
            return task_cls

        return decorator


class PresetOptions:
    """ argparse type/choices helper over a kind of registered preset """
    def __init__(self, kind: PresetKind) -> None:
        self.kind = kind

    def __call__(self, tag_str: str) -> str:
        if tag_str not in preset_tags(self.kind):
            raise argparse.ArgumentTypeError(f'"{tag_str}" is not a valid {self.kind.value} preset. '
                                             f'Options are: {self.options()}.')
        return tag_str

    def options(self) -> str:
        return ', '.join(sorted(preset_tags(self.kind)))


#
# Validator wrappers to adapt pydantic validators to argparse
#

def regex_type(regex: str) -> str:
    try:
        validate_regex(regex)
    except ValueError as ex:
        raise argparse.ArgumentTypeError(ex) from None

    return regex


def existing_workdir_type(workdir: str) -> str:
    try:
        validate_workdir(workdir)
    except ValueError as ex:
        raise argparse.ArgumentTypeError(ex) from None

    return workdir


def filename_type(filename: str) -> str:
    try:
        validate_filename(filename)
    except ValueError as ex:
        raise argparse.ArgumentTypeError(ex) from None

    return filename


def existing_file_type(filename: str) -> str:
    try:
        validate_existing_file(filename)
    except ValueError as ex:
        raise argparse.ArgumentTypeError(ex) from None

    return filename


def image_source_type(location: str) -> str:
    try:
        validate_image_source(location)
    except ValueError as ex:
        raise argparse.ArgumentTypeError(ex) from None

    return location


def checkpoint_type(filename: str) -> str:
    try:
        validate_checkpoint_file(filename)
    except ValueError as ex:
        raise argparse.ArgumentTypeError(ex) from None

    return filename


def pairs_dir_type(pairs_dir: str) -> str:
    try:
        validate_pairs_dir(pairs_dir)
    except ValueError as ex:
        raise argparse.ArgumentTypeError(ex) from None

    return pairs_dir


def resolution_type(resolution_str: str) -> tuple[int, int]:
    try:
        resolution = validate_resolution(resolution_str)
    except ValueError as ex:
        raise argparse.ArgumentTypeError(ex) from None

    return resolution


#
# Argparse specific validators
#

def non_empty_type(src_str: str) -> str:
    out_str = src_str.strip()
    if len(out_str) == 0:
        raise argparse.ArgumentTypeError('Value cannot be empty.')

    return out_str


def int_type(min_val: int, max_val: int, value_str: str) -> int:
    try:
        value_int = int(value_str)
        if not min_val <= value_int <= max_val:
            raise ValueError()
    except ValueError:
        raise argparse.ArgumentTypeError(f'Invalid value: "{value_str}". Must be an integer between '
                                         f'{min_val} and {max_val}, inclusive.') from None

    return value_int


#
# Options shared by experiment tasks
#

def add_table_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--exclude', metavar='<regex>', type=regex_type,
                        help='exclude table rows matching the regular expression')
    parser.add_argument('--include', metavar='<regex>', type=regex_type,
                        help='include table rows matching the regular expression, exclude all other rows')
    parser.add_argument('--save-csv', metavar='<filename>', type=filename_type,
                        help='export tables as CSV-formatted files')
    parser.add_argument('--save-json', metavar='<filename>', type=filename_type,
                        help='export tables as JSON-formatted file')


def add_experiment_args(parser: argparse.ArgumentParser, existing_workdir: bool = False) -> None:
    """
    --config, --preset, --seed, --resume and --workdir, plus the table options
    @param parser: Task parser
    @param existing_workdir: If True, the workdir must already exist
    """
    experiment_presets = PresetOptions(PresetKind.EXPERIMENT)
    parser.add_argument('--config', metavar='<yaml>', type=existing_file_type,
                        help='experiment config file. Takes precedence over --preset and over the config saved in '
                             'the workdir')
    parser.add_argument('--preset', metavar='<preset>', type=experiment_presets,
                        help=f'experiment preset ({experiment_presets.options()}). Default is the config saved in '
                             f'the workdir, if any, otherwise "toy"')
    parser.add_argument('--seed', metavar='<int>', type=int, help='override the experiment seed')
    parser.add_argument('--resume', metavar='<ckpt>', type=checkpoint_type,
                        help='resume its phase from this checkpoint instead of the latest one in the workdir')
    parser.add_argument('--workdir', metavar='<directory>', default=DEFAULT_WORKDIR,
                        type=existing_workdir_type if existing_workdir else non_empty_type,
                        help='experiment directory, relative paths are under the data directory '
                             '(default: %(default)s)')
    add_table_args(parser)


def experiment_config(parsed_args) -> ExperimentConfig:
    """
    Experiment config selected by the task arguments: --config, then --preset, then the config saved in the workdir,
    then the toy preset. --seed overrides the seed of any of them.
    """
    if parsed_args.config is None and parsed_args.preset is None:
        saved_config = Path(DATA_DIR, parsed_args.workdir, 'config.yaml')
        if saved_config.exists():
            return load_config(str(saved_config), seed=parsed_args.seed)

    return load_config(parsed_args.config, parsed_args.preset, parsed_args.seed)
