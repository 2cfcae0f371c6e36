"""
 TVT-SR - Transfer VAE Training toolset for one-step super-resolution

 tvt_sr.training.experiment
 This module implements experiment configs, the workdir layout and the phase sequencer
"""
import hashlib
import json
import logging
from functools import cached_property
from pathlib import Path
from typing import Any, Literal, NamedTuple, Optional, Union
from collections.abc import Callable, Iterable, Sequence
import yaml
from pydantic import NonNegativeInt, PositiveInt, field_validator, model_validator
from ..base.models_base import SpecModel, DATA_DIR
from ..base.catalog import register, preset, PresetKind
from ..base.specs import VaeSpec, CeUnetSpec, PipelineSpec
from ..base.presets import vae_d8, vae_d4, vae_toy_d8, vae_toy_d4, ce_unet_sd21, ce_unet_toy
from ..base.vae import VaeModel, build_vae
from ..base.unet import UnetModel, build_unet
from ..base.diffusion import DiffusionSchedule
from ..base.losses import PerceptualNet, VsdConfig
from ..base.data import ImageSource, ProceduralImageSource, ingest_images, split_indices
from ..base.degradation import DegradationConfig, Pair, make_pairs
from ..base.metrics import MetricRecord, recon_benchmark
from ..base.checkpoint import Checkpoint, load_checkpoint
from ..base.sr import ConditioningStub, SrEvaluation, SrPipeline, evaluate_sr
from ..base.complexity import CostReport, audit, published_crosscheck
from .common import OptimizerConfig, TrainingLog, Checkpointer, TrainingException
from .reference import (ReferenceVaeConfig, ReferenceUnetConfig, PHASE_REFERENCE_VAE, PHASE_REFERENCE_UNET,
                        train_reference_vae, train_reference_unet, latent_scale)
from .tvt import (TvtStage1Config, TvtStage2Config, TvtJointConfig, PHASE_DECODER, PHASE_ENCODER, PHASE_JOINT,
                  train_decoder, train_encoder, train_joint)
from .sr import SrConfig, SrModels, PHASE_SR, build_sr_models, train_sr

logger = logging.getLogger(__name__)

PHASE_EVAL_RECON = 'eval-recon'
PHASE_EVAL_SR = 'eval-sr'
PHASE_AUDIT = 'audit'

# Execution order
PHASES = (PHASE_REFERENCE_VAE, PHASE_REFERENCE_UNET, PHASE_DECODER, PHASE_ENCODER, PHASE_JOINT, PHASE_SR,
          PHASE_EVAL_RECON, PHASE_EVAL_SR, PHASE_AUDIT)

PhaseName = Literal['reference-vae', 'reference-unet', 'tvt-decoder', 'tvt-encoder', 'tvt-joint', 'sr', 'eval-recon',
                    'eval-sr', 'audit']


class ConfigException(Exception):
    """ Exception for experiment config file errors """
    pass


class ModelsConfig(SpecModel):
    vae_d8: VaeSpec
    vae_d4: VaeSpec
    # Its base is the reference denoiser
    ce_unet: CeUnetSpec

    @model_validator(mode='after')
    def compatible_models(self) -> 'ModelsConfig':
        if self.vae_d8.downsample_factor != 8:
            raise ValueError('vae_d8 must have downsample_factor 8')
        if self.vae_d4.downsample_factor != 4:
            raise ValueError('vae_d4 must have downsample_factor 4')
        if self.vae_d8.latent_channels != self.vae_d4.latent_channels:
            raise ValueError('vae_d8 and vae_d4 must have the same latent_channels')
        if self.ce_unet.base.in_channels != self.vae_d4.latent_channels:
            raise ValueError('ce_unet base in_channels must match the VAE latent_channels')
        return self


class DataConfig(SpecModel):
    # Directory or zip archive, procedural images are generated when not provided
    source: Optional[str] = None
    procedural_count: NonNegativeInt = 500
    image_size: PositiveInt = 64
    holdout: float = 0.1
    seed: int = 0

    @field_validator('holdout')
    @classmethod
    def valid_holdout(cls, holdout: float) -> float:
        if not 0.0 < holdout < 1.0:
            raise ValueError('holdout must be within (0, 1)')
        return holdout


class PairsConfig(SpecModel):
    train: NonNegativeInt = 400
    test: PositiveInt = 16
    crop_size: PositiveInt = 64
    seed: int = 0
    degradation: DegradationConfig = DegradationConfig()


class TvtConfig(SpecModel):
    variant: Literal['tvt', 't1', 't2'] = 'tvt'
    stage1: TvtStage1Config = TvtStage1Config()
    stage2: TvtStage2Config = TvtStage2Config()
    joint: TvtJointConfig = TvtJointConfig()

    @model_validator(mode='after')
    def variant_alignment(self) -> 'TvtConfig':
        if self.variant == 't1' and self.joint.align_weight != 0:
            raise ValueError('variant t1 trains without latent alignment, joint.align_weight must be 0')
        if self.variant == 't2' and self.joint.align_weight <= 0:
            raise ValueError('variant t2 requires joint.align_weight > 0')
        return self

    @property
    def phases(self) -> tuple[str, ...]:
        return (PHASE_DECODER, PHASE_ENCODER) if self.variant == 'tvt' else (PHASE_JOINT,)


class ExperimentConfig(SpecModel):
    preset: Literal['toy', 'paper'] = 'toy'
    seed: int = 0
    models: ModelsConfig
    data: DataConfig = DataConfig()
    pairs: PairsConfig = PairsConfig()
    reference_vae: ReferenceVaeConfig = ReferenceVaeConfig()
    reference_unet: ReferenceUnetConfig = ReferenceUnetConfig()
    tvt: TvtConfig = TvtConfig()
    sr: SrConfig = SrConfig()
    perceptual_seed: int = 0
    # Phases to execute, all phases of the tvt variant when not provided
    phases: Optional[tuple[PhaseName, ...]] = None

    @model_validator(mode='after')
    def consistent_phases(self) -> 'ExperimentConfig':
        excluded = {PHASE_DECODER, PHASE_ENCODER, PHASE_JOINT} - set(self.tvt.phases)
        selected = excluded.intersection(self.phases or ())
        if selected:
            raise ValueError(f'Phases {", ".join(sorted(selected))} do not apply to tvt variant {self.tvt.variant}')
        if self.data.source is None and self.pairs.crop_size > self.data.image_size:
            raise ValueError(f'pairs crop_size {self.pairs.crop_size} exceeds data image_size {self.data.image_size}')
        multiple = self.models.ce_unet.input_multiple * self.models.vae_d4.downsample_factor
        if self.pairs.crop_size % multiple:
            raise ValueError(f'pairs crop_size {self.pairs.crop_size} is not a multiple of {multiple}')
        return self

    @property
    def selected_phases(self) -> tuple[str, ...]:
        selected = self.phases if self.phases is not None else self.default_phases
        return tuple(phase for phase in PHASES if phase in selected)

    @property
    def default_phases(self) -> tuple[str, ...]:
        return tuple(phase for phase in PHASES if phase not in {PHASE_DECODER, PHASE_ENCODER, PHASE_JOINT}
                     or phase in self.tvt.phases)

    @property
    def d4_phase(self) -> str:
        return self.tvt.phases[-1]

    @classmethod
    def parse_yaml(cls, filename: Union[str, Path]) -> 'ExperimentConfig':
        """
        Load an experiment config file. Schema errors are raised as pydantic ValidationError naming the field.
        """
        try:
            with open(filename) as yaml_file:
                config_dict = yaml.safe_load(yaml_file)
        except FileNotFoundError as ex:
            raise ConfigException(f'Could not load config file: {ex}') from None
        except yaml.YAMLError as ex:
            raise ConfigException(f'Config file YAML syntax error: {ex}') from None

        if not isinstance(config_dict, dict):
            raise ConfigException(f'Config file {filename} does not contain a mapping')

        return cls.model_validate(config_dict)

    def save_yaml(self, filename: Union[str, Path]) -> None:
        with open(filename, 'w') as yaml_file:
            yaml.dump(self.model_dump(mode='json'), yaml_file, indent=2, sort_keys=True)

    @classmethod
    def from_preset(cls, tag: str, **overrides: Any) -> 'ExperimentConfig':
        base = preset(tag, PresetKind.EXPERIMENT)
        if not overrides:
            return base

        return cls.model_validate({**base.model_dump(mode='json'), **overrides})


@register('toy', 'desk-scale end-to-end experiment on procedural images', PresetKind.EXPERIMENT)
def experiment_toy() -> ExperimentConfig:
    vae_optimizer = OptimizerConfig(lr=2e-4)
    return ExperimentConfig(
        preset='toy',
        models=ModelsConfig(vae_d8=vae_toy_d8(), vae_d4=vae_toy_d4(), ce_unet=ce_unet_toy()),
        data=DataConfig(procedural_count=500, image_size=64),
        pairs=PairsConfig(train=400, test=16, crop_size=64),
        # Matched budget with stage 1 + stage 2
        reference_vae=ReferenceVaeConfig(batch_size=8, total_steps=4000, optimizer=vae_optimizer),
        reference_unet=ReferenceUnetConfig(batch_size=8, total_steps=2000),
        tvt=TvtConfig(
            stage1=TvtStage1Config(batch_size=8, total_steps=2000, disc_ndf=16, optimizer=vae_optimizer,
                                   disc_optimizer=vae_optimizer),
            stage2=TvtStage2Config(batch_size=8, total_steps=2000, optimizer=vae_optimizer),
            joint=TvtJointConfig(batch_size=8, total_steps=4000, optimizer=vae_optimizer),
        ),
        # Summed VSD proxy is scaled down to the per-pixel reconstruction terms of a 64x64 frame
        sr=SrConfig(batch_size=8, total_steps=1000, lambda_2=1e-3, optimizer=OptimizerConfig(lr=1e-4)),
    )


@register('paper', 'large-scale experiment: SD-scale architectures and published training settings',
          PresetKind.EXPERIMENT)
def experiment_paper() -> ExperimentConfig:
    vae_loop = {'batch_size': 256, 'total_steps': 200_000, 'checkpoint_every': 10_000}
    return ExperimentConfig(
        preset='paper',
        models=ModelsConfig(vae_d8=vae_d8(), vae_d4=vae_d4(), ce_unet=ce_unet_sd21()),
        data=DataConfig(procedural_count=0, image_size=512),
        pairs=PairsConfig(train=10_000, test=100, crop_size=512),
        reference_vae=ReferenceVaeConfig(**vae_loop),
        reference_unet=ReferenceUnetConfig(**vae_loop),
        tvt=TvtConfig(stage1=TvtStage1Config(**vae_loop), stage2=TvtStage2Config(**vae_loop),
                      joint=TvtJointConfig(**vae_loop)),
        sr=SrConfig(batch_size=16, total_steps=20_000, checkpoint_every=1_000, vsd=VsdConfig()),
    )


def config_hash(*parts: SpecModel) -> str:
    """ sha256 over the canonical JSON of parts, in order """
    digest = hashlib.sha256()
    for part in parts:
        digest.update(part.canonical_json().encode())
    return digest.hexdigest()


class Workdir:
    """
    <root>/checkpoints/<phase>-<step:08d>.safetensors
    <root>/logs/train.jsonl
    <root>/metrics/<phase>*.jsonl|json
    <root>/pairs/test/
    <root>/manifest.json
    """
    def __init__(self, root: Union[str, Path]) -> None:
        self.root = Path(DATA_DIR, root)
        self.checkpoints = Path(self.root, 'checkpoints')
        self.metrics = Path(self.root, 'metrics')
        self.manifest_file = Path(self.root, 'manifest.json')
        for directory in (self.checkpoints, self.metrics):
            directory.mkdir(parents=True, exist_ok=True)
        self.log = TrainingLog(Path(self.root, 'logs', 'train.jsonl'))

    @property
    def test_pairs(self) -> Path:
        return Path(self.root, 'pairs', 'test')

    def latest_checkpoint(self, phase: str) -> Optional[Path]:
        candidates = sorted(self.checkpoints.glob(f'{phase}-*.safetensors'))
        return candidates[-1] if candidates else None

    def read_manifest(self) -> dict[str, Any]:
        if not self.manifest_file.exists():
            return {}
        with open(self.manifest_file) as read_f:
            return json.load(read_f)

    def record(self, phase: str, phase_hash: str, checkpoint_ids: Sequence[str] = (),
               metric_files: Sequence[str] = ()) -> dict[str, Any]:
        """ Update the lineage manifest: phase -> config hash, checkpoint ids and metric files """
        manifest = self.read_manifest()
        manifest.setdefault('phases', {})[phase] = {
            'config_hash': phase_hash,
            'checkpoints': list(checkpoint_ids),
            'metrics': list(metric_files),
        }
        return self.write_manifest(manifest)

    def write_manifest(self, manifest: dict[str, Any]) -> dict[str, Any]:
        with open(self.manifest_file, 'w') as write_f:
            write_f.write(json.dumps(manifest, indent=2, sort_keys=True))
        return manifest

    def write_jsonl(self, name: str, records: Iterable[dict[str, Any]]) -> str:
        path = Path(self.metrics, name)
        with open(path, 'w') as write_f:
            write_f.writelines(json.dumps(record, sort_keys=True) + '\n' for record in records)
        return path.relative_to(self.root).as_posix()

    def write_json(self, name: str, data: Any) -> str:
        path = Path(self.metrics, name)
        with open(path, 'w') as write_f:
            write_f.write(json.dumps(data, indent=2, sort_keys=True))
        return path.relative_to(self.root).as_posix()


# Phases whose models a phase consumes
DEPENDENCIES: dict[str, tuple[str, ...]] = {
    PHASE_REFERENCE_VAE: (),
    PHASE_REFERENCE_UNET: (PHASE_REFERENCE_VAE,),
    PHASE_DECODER: (PHASE_REFERENCE_VAE,),
    PHASE_ENCODER: (PHASE_DECODER,),
    PHASE_JOINT: (PHASE_REFERENCE_VAE,),
    PHASE_AUDIT: (),
}


def phase_dependencies(config: ExperimentConfig, phase: str) -> tuple[str, ...]:
    if phase == PHASE_SR:
        return PHASE_REFERENCE_UNET, config.d4_phase
    if phase == PHASE_EVAL_RECON:
        return PHASE_REFERENCE_VAE, config.d4_phase
    if phase == PHASE_EVAL_SR:
        return (PHASE_SR,)
    return DEPENDENCIES[phase]


def required_phases(config: ExperimentConfig, selected: Iterable[str]) -> set[str]:
    required, pending = set(), list(selected)
    while pending:
        phase = pending.pop()
        if phase not in required:
            required.add(phase)
            pending.extend(phase_dependencies(config, phase))
    return required


class ExperimentResult(NamedTuple):
    workdir: Workdir
    manifest: dict[str, Any]
    recon: dict[str, list[MetricRecord]]
    sr: Optional[SrEvaluation]
    audit: Optional[CostReport]


class Experiment:
    """
    Holds the models of one experiment while its phases execute. Training phases resume from the latest checkpoint
    of the phase found in the workdir. A complete checkpoint restores the phase without running any step.
    """
    def __init__(self, config: ExperimentConfig, workdir: Workdir) -> None:
        self.config = config
        self.workdir = workdir
        self.seed = config.seed
        self.latent_scale: Optional[float] = None
        self.sr_models: Optional[SrModels] = None
        self.recon: dict[str, list[MetricRecord]] = {}
        self.sr_evaluation: Optional[SrEvaluation] = None
        self.cost: Optional[CostReport] = None
        self.parents: dict[str, str] = {}
        # Explicit resume checkpoints, by phase
        self.resume_paths: dict[str, Path] = {}

    # Data and models are built on first use, an audit-only run needs neither

    @cached_property
    def source(self) -> ImageSource:
        data = self.config.data
        if data.source is not None:
            source = ingest_images(Path(DATA_DIR, data.source))
        else:
            source = ProceduralImageSource(data.procedural_count, data.image_size, data.seed)
        if len(source) < 2:
            raise ConfigException(f'Need at least 2 images to split train and held-out sets, got {len(source)}. '
                                  f'Set data.source or data.procedural_count')
        return source

    @cached_property
    def splits(self) -> tuple[list[int], list[int]]:
        train, holdout = split_indices(len(self.source), self.config.data.holdout, self.config.data.seed)
        logger.info('Image source: %d train, %d held-out images', len(train), len(holdout))
        return train, holdout

    @property
    def train_indices(self) -> list[int]:
        return self.splits[0]

    @property
    def holdout_indices(self) -> list[int]:
        return self.splits[1]

    @cached_property
    def feature_net(self) -> PerceptualNet:
        return PerceptualNet(seed=self.config.perceptual_seed)

    @cached_property
    def schedule(self) -> DiffusionSchedule:
        return DiffusionSchedule.from_config(self.config.sr.schedule)

    # Model seeds are fixed offsets of the experiment seed

    @cached_property
    def d8(self) -> VaeModel:
        return build_vae(self.config.models.vae_d8, seed=self.seed)

    @cached_property
    def d4(self) -> VaeModel:
        return build_vae(self.config.models.vae_d4, seed=self.seed + 1)

    @cached_property
    def unet(self) -> UnetModel:
        return build_unet(self.config.models.ce_unet.base, seed=self.seed + 2)

    @cached_property
    def stub(self) -> ConditioningStub:
        base = self.config.models.ce_unet.base
        return ConditioningStub(base.context_tokens, base.context_dim, seed=self.seed + 3)

    def scale(self) -> float:
        if self.latent_scale is None:
            self.latent_scale = latent_scale(self.d8, self.source, self.train_indices,
                                             self.config.reference_unet.scale_samples)
        return self.latent_scale

    def phase_hash(self, phase: str) -> str:
        config = self.config
        parts: dict[str, tuple[SpecModel, ...]] = {
            PHASE_REFERENCE_VAE: (config.models.vae_d8, config.reference_vae),
            PHASE_REFERENCE_UNET: (config.models.vae_d8, config.models.ce_unet.base, config.reference_unet),
            PHASE_DECODER: (config.models.vae_d8, config.models.vae_d4, config.tvt.stage1),
            PHASE_ENCODER: (config.models.vae_d4, config.tvt.stage2),
            PHASE_JOINT: (config.models.vae_d8, config.models.vae_d4, config.tvt.joint),
            PHASE_SR: (config.models.vae_d4, config.models.ce_unet, config.pairs, config.sr),
        }
        return config_hash(*parts.get(phase, (config,)), config.data)

    def train_phase(self, phase: str, kind: str, total_steps: int, execute: bool,
                    train_fn: Callable[[Checkpointer, Optional[Checkpoint]], Any],
                    parent: Optional[str] = None) -> None:
        """
        Run or restore one training phase.
        @param phase: Phase name
        @param kind: Checkpoint kind
        @param total_steps: Steps of a complete phase
        @param execute: If False the phase must already be complete in the workdir, it is only restored
        @param train_fn: Called with (checkpointer, resume checkpoint or None)
        @param parent: Phase whose final checkpoint is the parent of this phase
        """
        phase_hash = self.phase_hash(phase)
        last_path = self.resume_paths.get(phase) or self.workdir.latest_checkpoint(phase)
        resume = load_checkpoint(last_path, phase_hash) if last_path is not None else None
        if not execute and (resume is None or resume.step < total_steps):
            raise TrainingException(f'Phase {phase} is required but not complete in {self.workdir.root}')

        parent_id = resume.checkpoint_id if resume is not None else self.parents.get(parent)
        checkpointer = Checkpointer(self.workdir.checkpoints, phase, kind, phase_hash, parent_id)
        if resume is not None:
            logger.info('%s phase %s from %s', 'Restoring' if resume.step == total_steps else 'Resuming', phase,
                        last_path.name)
        train_fn(checkpointer, resume)

        ids = [checkpoint_id for _, checkpoint_id in checkpointer.saved]
        if not ids and resume is not None:
            ids = [resume.checkpoint_id]
        prior = self.workdir.read_manifest().get('phases', {}).get(phase, {})
        if prior.get('config_hash') == phase_hash:
            ids = [checkpoint_id for checkpoint_id in prior['checkpoints'] if checkpoint_id not in ids] + ids
        if ids:
            self.parents[phase] = ids[-1]
        if execute:
            self.workdir.record(phase, phase_hash, ids)

    def reference_vae(self, execute: bool) -> None:
        cfg = self.config.reference_vae
        self.train_phase(PHASE_REFERENCE_VAE, 'vae', cfg.total_steps, execute,
                         lambda checkpointer, resume: train_reference_vae(
                             self.d8, self.source, self.train_indices, cfg, self.seed, self.feature_net,
                             self.workdir.log, checkpointer, resume))

    def reference_unet(self, execute: bool) -> None:
        cfg = self.config.reference_unet
        self.train_phase(PHASE_REFERENCE_UNET, 'unet', cfg.total_steps, execute,
                         lambda checkpointer, resume: train_reference_unet(
                             self.d8, self.unet, self.stub, self.source, self.train_indices, cfg, self.schedule,
                             self.scale(), self.seed, self.workdir.log, checkpointer, resume),
                         parent=PHASE_REFERENCE_VAE)

    def tvt_decoder(self, execute: bool) -> None:
        cfg = self.config.tvt.stage1
        self.train_phase(PHASE_DECODER, 'vae', cfg.total_steps, execute,
                         lambda checkpointer, resume: train_decoder(
                             self.d8, self.d4, self.source, self.train_indices, cfg, self.seed, self.feature_net,
                             self.workdir.log, checkpointer, resume),
                         parent=PHASE_REFERENCE_VAE)

    def tvt_encoder(self, execute: bool) -> None:
        cfg = self.config.tvt.stage2
        self.train_phase(PHASE_ENCODER, 'vae', cfg.total_steps, execute,
                         lambda checkpointer, resume: train_encoder(
                             self.d4, self.source, self.train_indices, cfg, self.seed, self.feature_net,
                             self.workdir.log, checkpointer, resume),
                         parent=PHASE_DECODER)

    def tvt_joint(self, execute: bool) -> None:
        cfg = self.config.tvt.joint
        d8 = self.d8 if cfg.align_weight > 0 else None
        self.train_phase(PHASE_JOINT, 'vae', cfg.total_steps, execute,
                         lambda checkpointer, resume: train_joint(
                             self.d4, self.source, self.train_indices, cfg, self.seed, self.feature_net, d8,
                             self.workdir.log, checkpointer, resume),
                         parent=PHASE_REFERENCE_VAE)

    def make_pairs(self, indices: Sequence[int], n: int, seed: int,
                   out_dir: Optional[Path] = None) -> list[Pair]:
        cfg = self.config.pairs
        images = [self.source[index] for index in indices]
        pairs, _ = make_pairs(images, cfg.degradation, n, seed, cfg.crop_size, out_dir)
        return pairs

    def sr(self, execute: bool) -> None:
        cfg = self.config.sr
        # A restored phase runs no step
        pairs = self.make_pairs(self.train_indices, self.config.pairs.train, self.config.pairs.seed) if execute else []
        self.d4.requires_grad_(False)
        self.sr_models = build_sr_models(self.d4, self.unet, self.config.models.ce_unet, self.stub, cfg,
                                         self.scale())
        self.train_phase(PHASE_SR, 'sr', cfg.total_steps, execute,
                         lambda checkpointer, resume: train_sr(
                             self.sr_models, pairs, range(len(pairs)), cfg, self.seed, self.feature_net,
                             self.workdir.log, checkpointer, resume),
                         parent=PHASE_REFERENCE_UNET)

    def eval_recon(self) -> None:
        images = [self.source[index] for index in self.holdout_indices]
        records = []
        for name, vae in (('vae-d8', self.d8), ('vae-d4', self.d4)):
            vae.eval()
            self.recon[name] = recon_benchmark(vae, images, self.feature_net)
            records.extend({'model': name, **record.model_dump()} for record in self.recon[name])
            logger.info('Reconstruction %s: %s', name,
                        ', '.join(f'{record.name} {record.mean:.4f}' for record in self.recon[name]))

        metric_file = self.workdir.write_jsonl(f'{PHASE_EVAL_RECON}.jsonl', records)
        self.workdir.record(PHASE_EVAL_RECON, self.phase_hash(PHASE_EVAL_RECON), metric_files=[metric_file])

    def eval_sr(self) -> None:
        # Test pairs come from held-out images with a seed disjoint from the training pairs
        pairs = self.make_pairs(self.holdout_indices, self.config.pairs.test, self.config.pairs.seed + 1,
                                self.workdir.test_pairs)
        self.sr_evaluation = evaluate_sr(self.sr_models.pipeline, pairs, feature_net=self.feature_net)
        metric_files = write_sr_evaluation(self.workdir, self.sr_evaluation)
        self.workdir.record(PHASE_EVAL_SR, self.phase_hash(PHASE_EVAL_SR), metric_files=metric_files)

    def audit(self) -> None:
        config = self.config
        spec = PipelineSpec(vae=config.models.vae_d4, ce_unet=config.models.ce_unet,
                            output_resolution=config.pairs.crop_size)
        self.cost = audit(spec)
        metric_files = [
            self.workdir.write_jsonl(f'{PHASE_AUDIT}.jsonl', (layer._asdict() for layer in self.cost.layers)),
            self.workdir.write_json(f'{PHASE_AUDIT}-summary.json', self.cost.summary()),
            self.workdir.write_jsonl(f'{PHASE_AUDIT}-crosscheck.jsonl',
                                     (row.model_dump() for row in published_crosscheck())),
        ]
        self.workdir.record(PHASE_AUDIT, self.phase_hash(PHASE_AUDIT), metric_files=metric_files)

    def execute(self, selected: Sequence[str], restore: Sequence[str] = ()) -> None:
        """
        Execute the selected phases in order, restoring from complete checkpoints the phases they depend on and the
        phases in restore.
        """
        unknown = set(selected).union(restore) - set(PHASES)
        if unknown:
            raise ConfigException(f'Unknown phases: {", ".join(sorted(unknown))}')

        required = required_phases(self.config, [*selected, *restore])
        invalid = required - set(self.config.default_phases)
        if invalid:
            raise ConfigException(f'Phases {", ".join(sorted(invalid))} do not apply to tvt variant '
                                  f'{self.config.tvt.variant}')

        handlers = {
            PHASE_REFERENCE_VAE: self.reference_vae,
            PHASE_REFERENCE_UNET: self.reference_unet,
            PHASE_DECODER: self.tvt_decoder,
            PHASE_ENCODER: self.tvt_encoder,
            PHASE_JOINT: self.tvt_joint,
            PHASE_SR: self.sr,
        }
        for phase in PHASES:
            if phase not in required:
                continue
            logger.info('Phase %s%s', phase, '' if phase in selected else ' (restore only)')
            if phase in handlers:
                handlers[phase](phase in selected)
            elif phase == PHASE_EVAL_RECON:
                self.eval_recon()
            elif phase == PHASE_EVAL_SR:
                self.eval_sr()
            elif phase == PHASE_AUDIT:
                self.audit()

    def sr_pipeline(self) -> SrPipeline:
        """ The trained SR pipeline, restored from the workdir if needed """
        if self.sr_models is None:
            self.execute((), restore=(PHASE_SR,))
        return self.sr_models.pipeline

    def result(self) -> ExperimentResult:
        return ExperimentResult(self.workdir, self.workdir.read_manifest(), self.recon, self.sr_evaluation, self.cost)


def write_sr_evaluation(workdir: Workdir, evaluation: SrEvaluation, prefix: str = PHASE_EVAL_SR) -> list[str]:
    per_image = ({'name': name, **metrics} for name, metrics in zip(evaluation.names, evaluation.per_image))
    summary = {
        'sr': {record.name: record.mean for record in evaluation.records},
        'bicubic': {record.name: record.mean for record in evaluation.baseline_records},
        'count': len(evaluation.names),
    }
    return [workdir.write_jsonl(f'{prefix}.jsonl', per_image), workdir.write_json(f'{prefix}-summary.json', summary)]


def open_experiment(config: ExperimentConfig, workdir: Union[str, Path, Workdir],
                    resume: Optional[Union[str, Path]] = None) -> Experiment:
    """
    @param config: ExperimentConfig
    @param workdir: Workdir or its root directory, relative paths are anchored at the data directory
    @param resume: Optional checkpoint to resume its phase from, instead of the latest one in the workdir
    @return: Experiment
    """
    workdir = workdir if isinstance(workdir, Workdir) else Workdir(workdir)
    manifest = workdir.read_manifest()
    previous_hash = manifest.get('config_hash')
    if previous_hash is not None and previous_hash != config.spec_hash():
        logger.warning('Config differs from the one previously used in %s, phases with changed settings start over',
                       workdir.root)
    manifest['config_hash'] = config.spec_hash()
    workdir.write_manifest(manifest)
    config.save_yaml(Path(workdir.root, 'config.yaml'))

    experiment = Experiment(config, workdir)
    if resume is not None:
        checkpoint = load_checkpoint(resume)
        phase = checkpoint.manifest.phase
        if phase not in PHASES:
            raise ConfigException(f'Checkpoint {resume} belongs to unknown phase "{phase}"')
        experiment.resume_paths[phase] = Path(resume)

    return experiment


def run_experiment(config: ExperimentConfig, workdir: Union[str, Path, Workdir],
                   phases: Optional[Iterable[str]] = None,
                   resume: Optional[Union[str, Path]] = None) -> ExperimentResult:
    """
    Execute the selected phases in order. Phases they depend on but that are not selected are restored from their
    final checkpoint in the workdir. Identical (config, seed) on one device gives identical artifacts, an interrupted
    run continues from its latest checkpoints.
    @param config: ExperimentConfig
    @param workdir: Workdir or its root directory, relative paths are anchored at the data directory
    @param phases: Phases to execute, defaults to config.selected_phases
    @param resume: Optional checkpoint to resume its phase from
    @return: ExperimentResult
    """
    experiment = open_experiment(config, workdir, resume)
    experiment.execute(tuple(phases) if phases is not None else config.selected_phases)

    return experiment.result()


def load_config(filename: Optional[str] = None, preset_tag: Optional[str] = None, seed: Optional[int] = None,
                **overrides: Any) -> ExperimentConfig:
    """
    Config from a YAML file or a named preset (toy by default), with an optional seed override.
    """
    config = ExperimentConfig.parse_yaml(filename) if filename is not None else ExperimentConfig.from_preset(
        preset_tag or 'toy')
    updates = {key: value for key, value in overrides.items() if value is not None}
    if seed is not None:
        updates['seed'] = seed
    if updates:
        config = ExperimentConfig.model_validate({**config.model_dump(mode='json'), **updates})

    return config
