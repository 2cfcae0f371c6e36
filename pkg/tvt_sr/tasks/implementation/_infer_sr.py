import argparse
from pathlib import Path
from typing import Union, Optional
import torch
from pydantic import field_validator
from ...__version__ import __doc__ as title
from ...base.data import load_image, save_image
from ...base.sr import bicubic_baseline
from ...training.experiment import open_experiment
from ..common import Task, Table
from ..models import ExistingWorkdirTaskArgs
from ..validators import validate_existing_file, validate_filename
from ..utils import TaskOptions, add_experiment_args, experiment_config, existing_file_type, filename_type


@TaskOptions.register('infer-sr')
class TaskInferSr(Task):
    @staticmethod
    def parser(task_args, **kwargs):
        task_parser = argparse.ArgumentParser(description=f'{title}\nInfer SR task:\n'
                                                          'Restore a low-resolution image with the trained one-step '
                                                          'SR pipeline of an experiment workdir.')
        task_parser.prog = f'{task_parser.prog} infer-sr'
        task_parser.formatter_class = argparse.RawDescriptionHelpFormatter
        task_parser.add_argument('--in', metavar='<image>', dest='in_file', required=True, type=existing_file_type,
                                 help='low-resolution input image')
        task_parser.add_argument('--out', metavar='<image>', dest='out_file', required=True, type=filename_type,
                                 help='super-resolved output image, PNG')
        task_parser.add_argument('--bicubic', metavar='<image>', type=filename_type,
                                 help='also write the bicubic upscale of the input, for comparison')
        add_experiment_args(task_parser, existing_workdir=True)

        return task_parser.parse_args(task_args)

    def runner(self, parsed_args) -> Union[None, list]:
        self.log_info(f'Infer SR task: "{parsed_args.in_file}" -> "{parsed_args.out_file}"')

        experiment = open_experiment(experiment_config(parsed_args), parsed_args.workdir, parsed_args.resume)
        pipeline = experiment.sr_pipeline()

        lr = load_image(parsed_args.in_file)
        with torch.no_grad():
            sr = pipeline(lr)
        save_image(sr, Path(parsed_args.out_file))
        self.log_info(f'Wrote {sr.shape[-2]}x{sr.shape[-1]} SR image "{parsed_args.out_file}"')

        table = Table('Image', 'File', 'Height', 'Width')
        table.add('LR', parsed_args.in_file, lr.shape[-2], lr.shape[-1])
        table.add('SR', parsed_args.out_file, sr.shape[-2], sr.shape[-1])

        if parsed_args.bicubic is not None:
            bicubic = bicubic_baseline(lr.unsqueeze(0), pipeline.scale)[0]
            save_image(bicubic, Path(parsed_args.bicubic))
            table.add('bicubic', parsed_args.bicubic, bicubic.shape[-2], bicubic.shape[-1])

        return self.table_output(parsed_args, [table])


class InferSrArgs(ExistingWorkdirTaskArgs):
    in_file: str
    out_file: str
    bicubic: Optional[str] = None

    # Validators
    check_in_file = field_validator('in_file')(validate_existing_file)
    check_out_file = field_validator('out_file', 'bicubic')(validate_filename)
