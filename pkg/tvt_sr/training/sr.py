"""
 TVT-SR - Transfer VAE Training toolset for one-step super-resolution

 tvt_sr.training.sr
 This module implements one-step SR training: L1 + λ1·LPIPS + λ2·VSD on the CE-UNet replicas, adapters, LoRA pairs
 and conditioning stub, with a LoRA-tuned score regularizer updated after every generator step
"""
import copy
import logging
from typing import NamedTuple, Optional
from collections.abc import Sequence
import torch
from torch import nn
from pydantic import PositiveFloat, model_validator
from ..base.models_base import freeze, to_signed
from ..base.specs import CeUnetSpec, LoraConfig
from ..base.vae import VaeModel
from ..base.unet import UnetModel
from ..base.ce_unet import CeUnetModel, build_ce_unet, trainable_parameters
from ..base.lora import inject_lora, lora_parameters
from ..base.diffusion import DiffusionSchedule, ScheduleConfig
from ..base.losses import (LossReport, VsdConfig, NonFiniteScoreException, l1_loss, perceptual_loss,
                           vsd_generator_grad, vsd_regularizer_step)
from ..base.degradation import Pair
from ..base.data import DataException
from ..base.checkpoint import Checkpoint
from ..base.sr import ConditioningStub, SrPipeline
from .common import (LoopConfig, OptimizerConfig, TrainingLog, Checkpointer, PhaseRunner, FreezeGuard,
                     NonFiniteLossException, build_optimizer, check_frozen, check_finite)

logger = logging.getLogger(__name__)

PHASE_SR = 'sr'


class SrConfig(LoopConfig):
    t: int = 1
    lambda_1: PositiveFloat = 2.0
    lambda_2: PositiveFloat = 1.0
    schedule: ScheduleConfig = ScheduleConfig()
    vsd: VsdConfig = VsdConfig()
    regularizer_lora: LoraConfig = LoraConfig()
    regularizer_seed: int = 0
    optimizer: OptimizerConfig = OptimizerConfig()

    @model_validator(mode='after')
    def t_within_schedule(self) -> 'SrConfig':
        if not 0 <= self.t < self.schedule.num_train_timesteps:
            raise ValueError(f't={self.t} is outside a schedule of {self.schedule.num_train_timesteps} steps')
        if self.vsd.timestep_range[1] >= self.schedule.num_train_timesteps:
            raise ValueError(f'vsd timestep_range {self.vsd.timestep_range} exceeds the schedule')
        return self


class SrModels(NamedTuple):
    pipeline: SrPipeline
    ce_unet: CeUnetModel
    stub: ConditioningStub
    eps_pretrained: UnetModel
    eps_lora: UnetModel

    def frozen_modules(self) -> tuple[nn.Module, ...]:
        """ Modules whose non-LoRA weights must not change during SR training """
        return self.pipeline.vae, self.ce_unet.base, self.eps_pretrained, self.eps_lora


def build_sr_models(vae: VaeModel, base_unet: UnetModel, ce_spec: CeUnetSpec, stub: ConditioningStub,
                    cfg: SrConfig, latent_scale: float = 1.0) -> SrModels:
    """
    Assemble the SR generator and the two score networks. base_unet is copied, never modified.
    @param vae: Trained VAE-D4, frozen here
    @param base_unet: Trained reference UNet
    @param ce_spec: CeUnetSpec, its base must match base_unet
    @param stub: Conditioning stub, trained jointly with the generator
    @param cfg: SrConfig
    @param latent_scale: Latent scaling factor base_unet was trained with
    @return: SrModels
    """
    ce_unet = build_ce_unet(ce_spec, base_unet)
    eps_pretrained = freeze(copy.deepcopy(base_unet))
    eps_lora = freeze(copy.deepcopy(base_unet))
    inject_lora(eps_lora, cfg.regularizer_lora, torch.Generator().manual_seed(cfg.regularizer_seed))
    for _, param in lora_parameters(eps_lora):
        param.requires_grad_(True)
    stub.requires_grad_(True)

    pipeline = SrPipeline(vae, ce_unet, stub, DiffusionSchedule.from_config(cfg.schedule), cfg.t, latent_scale)

    return SrModels(pipeline, ce_unet, stub, eps_pretrained, eps_lora)


def generator_parameters(models: SrModels) -> list[nn.Parameter]:
    groups = trainable_parameters(models.ce_unet)
    return [param for group in groups.values() for param in group.values()] + list(models.stub.parameters())


def sample_pairs(pairs: Sequence[Pair], indices: Sequence[int], batch_size: int,
                 generator: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """ Draw batch_size (LR, HR) pairs with replacement, as stacked NCHW unit-range batches """
    if not indices:
        raise DataException('Cannot sample from an empty pair set')
    picks = [indices[pick] for pick in torch.randint(len(indices), (batch_size,), generator=generator).tolist()]
    return torch.stack([pairs[pick].lr for pick in picks]), torch.stack([pairs[pick].hr for pick in picks])


def sr_train_step(models: SrModels, lr: torch.Tensor, hr: torch.Tensor, cfg: SrConfig, feature_net: nn.Module,
                  optimizer: torch.optim.Optimizer, reg_optimizer: torch.optim.Optimizer,
                  generator: Optional[torch.Generator] = None) -> LossReport:
    """
    One generator update on L_SR = L1(I_SR, I_HR) + λ1·LPIPS(I_SR, I_HR) + λ2·VSD(z_SR), then one update of the
    LoRA score regularizer on the detached z_SR.
    @param models: SrModels
    @param lr: NCHW unit-range LR batch
    @param hr: NCHW unit-range HR batch, 4x the LR size
    @param cfg: SrConfig
    @param feature_net: Frozen perceptual surrogate
    @param optimizer: Optimizer over generator_parameters(models)
    @param reg_optimizer: Optimizer over the LoRA pairs of models.eps_lora
    @param generator: Source of the VSD timesteps and noise
    @return: LossReport, reg holds the regularizer diffusion loss
    """
    check_frozen(*models.frozen_modules())
    pipeline = models.pipeline

    z_sr, context = pipeline.restore_latent(lr)
    output = pipeline.decode(z_sr)
    target = to_signed(hr)

    l1 = l1_loss(output, target)
    lpips = perceptual_loss(output, target, feature_net)
    try:
        vsd = vsd_generator_grad(z_sr, context, pipeline.schedule, models.eps_pretrained, models.eps_lora, cfg.vsd,
                                 generator)
    except NonFiniteScoreException as ex:
        raise NonFiniteLossException(f'VSD term: {ex}') from None
    total = check_finite(l1 + cfg.lambda_1 * lpips + cfg.lambda_2 * vsd.loss, 'SR loss')

    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()

    try:
        reg = vsd_regularizer_step(models.eps_lora, z_sr, context, pipeline.schedule, reg_optimizer, cfg.vsd,
                                   generator)
    except NonFiniteScoreException as ex:
        raise NonFiniteLossException(f'score regularizer: {ex}') from None

    return LossReport(l1=float(l1), lpips=float(lpips), vsd=float(vsd.loss), reg=reg, total=float(total))


def train_sr(models: SrModels, pairs: Sequence[Pair], indices: Sequence[int], cfg: SrConfig, seed: int,
             feature_net: nn.Module, log: Optional[TrainingLog] = None, checkpointer: Optional[Checkpointer] = None,
             resume: Optional[Checkpoint] = None) -> list[LossReport]:
    """
    SR training phase. Checkpoints hold components 'ce_unet', 'stub' and 'eps_lora'. The frozen set is verified by
    digest at every checkpoint and at the end of the phase.
    """
    if resume is not None:
        resume.restore('ce_unet', models.ce_unet)
        resume.restore('stub', models.stub)
        resume.restore_lora('eps_lora', models.eps_lora)

    guard = FreezeGuard(*models.frozen_modules(), label='SR frozen set')
    optimizer = build_optimizer(generator_parameters(models), cfg.optimizer)
    reg_optimizer = build_optimizer((param for _, param in lora_parameters(models.eps_lora)),
                                    cfg.optimizer.model_copy(update={'lr': cfg.vsd.regularizer_lr}))

    start_step = 0
    if resume is not None:
        resume.restore_optimizer('generator', optimizer)
        resume.restore_optimizer('regularizer', reg_optimizer)
        start_step = resume.step

    def step_fn(step: int, generator: torch.Generator) -> LossReport:
        lr, hr = sample_pairs(pairs, indices, cfg.batch_size, generator)
        return sr_train_step(models, lr, hr, cfg, feature_net, optimizer, reg_optimizer, generator)

    def state_fn():
        return ({'ce_unet': models.ce_unet, 'stub': models.stub, 'eps_lora': models.eps_lora},
                {'generator': optimizer, 'regularizer': reg_optimizer})

    runner = PhaseRunner(PHASE_SR, seed, cfg, cfg.optimizer.lr, log, checkpointer)
    reports = runner.run(step_fn, state_fn, start_step, on_checkpoint=lambda _: guard.verify())
    guard.verify()

    return reports
