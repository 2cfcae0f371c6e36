import argparse
from typing import Union, Optional, Any
from pydantic import field_validator
from ...__version__ import __doc__ as title
from ...base.catalog import preset, preset_tags
from ...base.specs import PipelineSpec
from ...base.models_base import SpecModel
from ...base.complexity import audit, reduction_report, published_crosscheck
from ...training.experiment import ExperimentConfig
from ..common import Task, TaskException, cost_table, cost_summary_table, reduction_table, crosscheck_table
from ..models import TableTaskArgs
from ..validators import validate_existing_file, validate_resolution
from ..utils import TaskOptions, add_table_args, existing_file_type, resolution_type


def validate_spec_tag(tag: str) -> str:
    if tag is not None and tag not in preset_tags():
        raise ValueError(f'"{tag}" is not a valid preset. Options are: {", ".join(sorted(preset_tags()))}.')

    return tag


def spec_tag_type(tag: str) -> str:
    try:
        validate_spec_tag(tag)
    except ValueError as ex:
        raise argparse.ArgumentTypeError(ex) from None

    return tag


@TaskOptions.register('audit-flops')
class TaskAuditFlops(Task):
    @staticmethod
    def parser(task_args, **kwargs):
        task_parser = argparse.ArgumentParser(description=f'{title}\nAudit FLOPs task:\n'
                                                          'Static parameter and MAC count of an architecture, '
                                                          'layer by layer, without building it.')
        task_parser.prog = f'{task_parser.prog} audit-flops'
        task_parser.formatter_class = argparse.RawDescriptionHelpFormatter
        spec_group = task_parser.add_mutually_exclusive_group()
        spec_group.add_argument('--config', metavar='<yaml>', type=existing_file_type,
                                help='experiment config file, its VAE-D4 and CE-UNet pipeline is audited')
        spec_group.add_argument('--spec', metavar='<preset>', type=spec_tag_type, default='tvt',
                                help='architecture preset: pipeline, VAE, UNet or CE-UNet (default: %(default)s)')
        task_parser.add_argument('--resolution', metavar='<HxW>', type=resolution_type,
                                 help='image resolution for pipelines and VAEs, latent resolution for denoisers. '
                                      'Default is the resolution the preset declares')
        task_parser.add_argument('--compare', metavar='<preset>', type=spec_tag_type,
                                 help='report the reduction going from this preset to the audited one')
        task_parser.add_argument('--crosscheck', action='store_true',
                                 help='include the published-figures cross-check table')
        task_parser.add_argument('--summary', action='store_true',
                                 help='only show the per kind summary, not the per layer breakdown')
        add_table_args(task_parser)

        return task_parser.parse_args(task_args)

    def runner(self, parsed_args) -> Union[None, list]:
        if parsed_args.config is not None:
            config = ExperimentConfig.parse_yaml(parsed_args.config)
            spec: SpecModel = PipelineSpec(vae=config.models.vae_d4, ce_unet=config.models.ce_unet,
                                           output_resolution=config.pairs.crop_size)
            label = parsed_args.config
        else:
            spec = preset(parsed_args.spec)
            label = parsed_args.spec
        self.log_info(f'Audit FLOPs task: {label}')

        report = self.audit_spec(spec, parsed_args.resolution)
        self.log_info(f'{label}: {report.params} params, {report.macs} MACs, {report.flops} FLOPs')

        tables = []
        if not parsed_args.summary:
            tables.append(cost_table(report, name=f'Per layer cost: {label}'))
        tables.append(cost_summary_table(report, name=f'Cost by layer kind: {label}'))

        if parsed_args.compare is not None:
            before = self.audit_spec(preset(parsed_args.compare), parsed_args.resolution)
            tables.append(reduction_table(reduction_report(before, report),
                                          name=f'Reduction from {parsed_args.compare} to {label}'))

        if parsed_args.crosscheck:
            rows = published_crosscheck()
            for row in rows:
                if abs(row.delta_pct) > 10.0:
                    self.log_warning(f'{row.item} {row.metric}: audited {row.audited:.4f} vs published '
                                     f'{row.published}, {row.delta_pct:+.1f}%')
            tables.append(crosscheck_table(rows, name='Published figures cross-check'))

        return self.table_output(parsed_args, tables)

    @staticmethod
    def audit_spec(spec: SpecModel, resolution: Optional[tuple[int, int]]):
        if resolution is None:
            return audit(spec)

        if isinstance(spec, PipelineSpec):
            height, width = resolution
            if height != width:
                raise TaskException(f'Pipelines are audited at square resolutions, got {height}x{width}')
            try:
                spec = PipelineSpec.model_validate({**spec.model_dump(), 'output_resolution': height})
            except ValueError as ex:
                raise TaskException(f'Invalid resolution for pipeline: {ex}') from None
            return audit(spec)

        return audit(spec, resolution)


class AuditFlopsArgs(TableTaskArgs):
    config: Optional[str] = None
    spec: str = 'tvt'
    resolution: Optional[tuple[int, int]] = None
    compare: Optional[str] = None
    crosscheck: bool = False
    summary: bool = False

    # Validators
    check_config = field_validator('config')(validate_existing_file)
    check_spec = field_validator('spec', 'compare')(validate_spec_tag)

    @field_validator('resolution', mode='before')
    @classmethod
    def parse_resolution(cls, resolution: Any) -> Any:
        return validate_resolution(resolution) if isinstance(resolution, str) else resolution
