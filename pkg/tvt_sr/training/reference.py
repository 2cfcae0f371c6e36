"""
 TVT-SR - Transfer VAE Training toolset for one-step super-resolution

 tvt_sr.training.reference
 This module implements the desk-scale reference pretraining that stands in for pretrained weights: an end-to-end
 VAE-D8 and an ε-prediction UNet on its latents
"""
import logging
from typing import Optional
from collections.abc import Sequence
import torch
from torch import nn
from pydantic import NonNegativeFloat, PositiveInt
from ..base.models_base import freeze, to_signed
from ..base.vae import VaeModel
from ..base.unet import UnetModel
from ..base.diffusion import DiffusionSchedule
from ..base.losses import LossReport, diffusion_loss
from ..base.data import DataException, sample_batch
from ..base.checkpoint import Checkpoint
from ..base.sr import ConditioningStub
from .common import (LoopConfig, OptimizerConfig, TrainingLog, Checkpointer, PhaseRunner, FreezeGuard,
                     build_optimizer, check_finite)
from .tvt import autoencoder_losses

logger = logging.getLogger(__name__)

PHASE_REFERENCE_VAE = 'reference-vae'
PHASE_REFERENCE_UNET = 'reference-unet'


class ReferenceVaeConfig(LoopConfig):
    perceptual_weight: NonNegativeFloat = 1.0
    kl_weight: NonNegativeFloat = 1e-6
    sample_latent: bool = True
    optimizer: OptimizerConfig = OptimizerConfig(lr=1e-4)


class ReferenceUnetConfig(LoopConfig):
    optimizer: OptimizerConfig = OptimizerConfig(lr=1e-4)
    # Images used to estimate the latent scale
    scale_samples: PositiveInt = 64


def reference_vae_step(vae: VaeModel, batch: torch.Tensor, cfg: ReferenceVaeConfig, feature_net: nn.Module,
                       optimizer: torch.optim.Optimizer, generator: Optional[torch.Generator] = None) -> LossReport:
    image = to_signed(batch)
    _, l1, lpips, kl = autoencoder_losses(vae, image, feature_net, cfg.sample_latent, generator)
    total = check_finite(l1 + cfg.perceptual_weight * lpips + cfg.kl_weight * kl, 'reference VAE loss')

    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()

    return LossReport(l1=float(l1), lpips=float(lpips), kl=float(kl), total=float(total))


def train_reference_vae(vae: VaeModel, source: Sequence[torch.Tensor], indices: Sequence[int],
                        cfg: ReferenceVaeConfig, seed: int, feature_net: nn.Module, log: Optional[TrainingLog] = None,
                        checkpointer: Optional[Checkpointer] = None,
                        resume: Optional[Checkpoint] = None) -> list[LossReport]:
    """
    End-to-end L1 + perceptual + KL training of a VAE. The trained model is frozen on return.
    """
    vae.requires_grad_(True)
    optimizer = build_optimizer(vae.parameters(), cfg.optimizer)

    start_step = 0
    if resume is not None:
        resume.restore('vae', vae)
        resume.restore_optimizer('vae', optimizer)
        start_step = resume.step

    def step_fn(step: int, generator: torch.Generator) -> LossReport:
        batch = sample_batch(source, indices, cfg.batch_size, generator)
        return reference_vae_step(vae, batch, cfg, feature_net, optimizer, generator)

    def state_fn():
        return {'vae': vae}, {'vae': optimizer}

    reports = PhaseRunner(PHASE_REFERENCE_VAE, seed, cfg, cfg.optimizer.lr, log, checkpointer).run(
        step_fn, state_fn, start_step
    )
    freeze(vae)

    return reports


def latent_scale(vae: VaeModel, source: Sequence[torch.Tensor], indices: Sequence[int], samples: int = 64) -> float:
    """
    1 / std of the mean latents of the first samples images of indices, so that scaled latents have unit variance.
    Deterministic given (weights, source).
    """
    if not indices:
        raise DataException('Cannot estimate the latent scale from an empty index set')

    chunk = list(indices[:samples])
    with torch.no_grad():
        latents = torch.cat([
            vae.encode(to_signed(torch.stack([source[index] for index in chunk[start:start + 16]])), sample=False)
            for start in range(0, len(chunk), 16)
        ])
    std = float(latents.double().std())
    if not std > 0.0:
        raise DataException('Degenerate latents, the latent scale is undefined')
    logger.debug('Latent std %.6f over %d images', std, len(chunk))

    return 1.0 / std


def reference_unet_step(vae: VaeModel, unet: UnetModel, stub: ConditioningStub, batch: torch.Tensor,
                        schedule: DiffusionSchedule, scale: float, optimizer: torch.optim.Optimizer,
                        generator: torch.Generator) -> LossReport:
    """
    ε-prediction MSE on scaled mean latents of the frozen vae, timesteps uniform over the whole schedule
    """
    with torch.no_grad():
        z0 = vae.encode(to_signed(batch), sample=False) * scale
    timesteps = schedule.sample_timesteps(z0.shape[0], 0, len(schedule) - 1, generator)
    noise = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)

    loss = check_finite(diffusion_loss(unet, z0, stub(z0.shape[0]), schedule, timesteps, noise),
                        'reference UNet loss')
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()

    return LossReport(total=float(loss))


def train_reference_unet(vae: VaeModel, unet: UnetModel, stub: ConditioningStub, source: Sequence[torch.Tensor],
                         indices: Sequence[int], cfg: ReferenceUnetConfig, schedule: DiffusionSchedule, scale: float,
                         seed: int, log: Optional[TrainingLog] = None, checkpointer: Optional[Checkpointer] = None,
                         resume: Optional[Checkpoint] = None) -> list[LossReport]:
    """
    Train unet and the conditioning stub as a denoiser of vae latents. Checkpoints hold components 'unet' and 'stub'.
    The trained unet is frozen on return, the stub is left trainable.
    """
    freeze(vae)
    guard = FreezeGuard(vae, label='reference VAE')
    unet.requires_grad_(True)
    stub.requires_grad_(True)
    optimizer = build_optimizer([*unet.parameters(), *stub.parameters()], cfg.optimizer)

    start_step = 0
    if resume is not None:
        resume.restore('unet', unet)
        resume.restore('stub', stub)
        resume.restore_optimizer('unet', optimizer)
        start_step = resume.step

    def step_fn(step: int, generator: torch.Generator) -> LossReport:
        batch = sample_batch(source, indices, cfg.batch_size, generator)
        return reference_unet_step(vae, unet, stub, batch, schedule, scale, optimizer, generator)

    def state_fn():
        return {'unet': unet, 'stub': stub}, {'unet': optimizer}

    reports = PhaseRunner(PHASE_REFERENCE_UNET, seed, cfg, cfg.optimizer.lr, log, checkpointer).run(
        step_fn, state_fn, start_step, on_checkpoint=lambda _: guard.verify()
    )
    freeze(unet)

    return reports
