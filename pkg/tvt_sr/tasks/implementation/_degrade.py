import argparse
from functools import partial
from pathlib import Path
from typing import Union, Optional
from pydantic import field_validator, PositiveInt
from ...__version__ import __doc__ as title
from ...base.models_base import DATA_DIR
from ...base.data import ingest_images, ProceduralImageSource
from ...base.degradation import DegradationConfig, make_pairs
from ...training.experiment import ExperimentConfig
from ..common import Task, Table
from ..models import TableTaskArgs
from ..validators import validate_existing_file, validate_image_source
from ..utils import TaskOptions, add_table_args, existing_file_type, image_source_type, non_empty_type, int_type


@TaskOptions.register('degrade')
class TaskDegrade(Task):
    @staticmethod
    def parser(task_args, **kwargs):
        task_parser = argparse.ArgumentParser(description=f'{title}\nDegrade task:\n'
                                                          'Build a reproducible HR/LR pair dataset by cropping HR '
                                                          'patches and degrading them to 1/4 resolution.')
        task_parser.prog = f'{task_parser.prog} degrade'
        task_parser.formatter_class = argparse.RawDescriptionHelpFormatter
        task_parser.add_argument('--out', metavar='<directory>', required=True, type=non_empty_type,
                                 help='output directory, relative paths are under the data directory')
        task_parser.add_argument('--source', metavar='<location>', type=image_source_type,
                                 help='directory or zip archive of HR images, relative paths are under the data '
                                      'directory. Default is procedurally generated images')
        task_parser.add_argument('-n', '--count', metavar='<int>', type=partial(int_type, 1, 1000000), default=16,
                                 help='number of pairs (default: %(default)s)')
        task_parser.add_argument('--seed', metavar='<int>', type=int, default=0,
                                 help='dataset seed, per pair seeds derive from it (default: %(default)s)')
        task_parser.add_argument('--crop-size', metavar='<int>', type=partial(int_type, 4, 8192), default=64,
                                 help='HR crop size, a multiple of 4 (default: %(default)s)')
        task_parser.add_argument('--second-order', action='store_true',
                                 help='repeat the non-resize stages once at LR resolution')
        task_parser.add_argument('--config', metavar='<yaml>', type=existing_file_type,
                                 help='experiment config file, its degradation pipeline is used instead of the '
                                      'default one')
        add_table_args(task_parser)

        return task_parser.parse_args(task_args)

    def runner(self, parsed_args) -> Union[None, list]:
        if parsed_args.config is not None:
            degradation = ExperimentConfig.parse_yaml(parsed_args.config).pairs.degradation
        else:
            degradation = DegradationConfig()
        if parsed_args.second_order:
            degradation = DegradationConfig.model_validate({**degradation.model_dump(), 'second_order': True})

        if parsed_args.source is not None:
            source = ingest_images(Path(DATA_DIR, parsed_args.source))
            source_label = parsed_args.source
        else:
            # Procedural images are generated at the crop size
            source = ProceduralImageSource(parsed_args.count, parsed_args.crop_size, parsed_args.seed)
            source_label = 'procedural'

        out_dir = Path(DATA_DIR, parsed_args.out)
        self.log_info(f'Degrade task: {parsed_args.count} pairs from {source_label} into "{out_dir}"')
        pairs, _ = make_pairs(source, degradation, parsed_args.count, parsed_args.seed, parsed_args.crop_size,
                              out_dir)

        table = Table('Pair', 'Source', 'Top', 'Left', 'Seed', 'Ops', name=f'Pairs in {parsed_args.out}')
        table.extend(
            (pair.record['index'], pair.record['source'], pair.record['crop']['top'], pair.record['crop']['left'],
             pair.record['seed'], ' > '.join(op['op'] for op in pair.record['ops']))
            for pair in pairs
        )

        return self.table_output(parsed_args, [table])


class DegradeArgs(TableTaskArgs):
    out: str
    source: Optional[str] = None
    count: PositiveInt = 16
    seed: int = 0
    crop_size: PositiveInt = 64
    second_order: bool = False
    config: Optional[str] = None

    # Validators
    check_source = field_validator('source')(validate_image_source)
    check_config = field_validator('config')(validate_existing_file)
