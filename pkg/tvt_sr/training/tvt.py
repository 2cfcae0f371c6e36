"""
 TVT-SR - Transfer VAE Training toolset for one-step super-resolution

 tvt_sr.training.tvt
 This module implements transfer VAE training: the VAE-D4 decoder learns to decode VAE-D8 latents of 2x upsampled
 images, then the VAE-D4 encoder is trained against the frozen decoder. Joint training ablations are included.
"""
import logging
from typing import Literal, NamedTuple, Optional
from collections.abc import Sequence
import torch
import torch.nn.functional as F
from torch import nn
from pydantic import NonNegativeFloat, NonNegativeInt, PositiveFloat, PositiveInt
from ..base.models_base import check_image, freeze, to_signed
from ..base.vae import DiagonalGaussian, VaeModel, kl_divergence
from ..base.losses import (LossReport, PatchDiscriminator, l1_loss, perceptual_loss, hinge_d_loss, lambda_d,
                           LAMBDA_D_EPS, LAMBDA_D_MAX)
from ..base.data import sample_batch
from ..base.checkpoint import Checkpoint
from .common import (LoopConfig, OptimizerConfig, TrainingLog, Checkpointer, PhaseRunner, FreezeGuard,
                     TrainingException, build_optimizer, check_frozen, check_finite)

logger = logging.getLogger(__name__)

PHASE_DECODER = 'tvt-decoder'
PHASE_ENCODER = 'tvt-encoder'
PHASE_JOINT = 'tvt-joint'


class TvtStage1Config(LoopConfig):
    upsample_factor: Literal[2] = 2
    lambda_d_eps: PositiveFloat = LAMBDA_D_EPS
    lambda_d_max: Optional[PositiveFloat] = LAMBDA_D_MAX
    # Defaults to 25% of total_steps
    gan_start_step: Optional[NonNegativeInt] = None
    perceptual_weight: NonNegativeFloat = 1.0
    optimizer: OptimizerConfig = OptimizerConfig()
    disc_optimizer: OptimizerConfig = OptimizerConfig()
    disc_ndf: PositiveInt = 64
    disc_seed: int = 0

    @property
    def gan_start(self) -> int:
        return self.gan_start_step if self.gan_start_step is not None else self.total_steps // 4


class TvtStage2Config(LoopConfig):
    perceptual_weight: NonNegativeFloat = 1.0
    kl_weight: NonNegativeFloat = 1e-6
    sample_latent: bool = True
    optimizer: OptimizerConfig = OptimizerConfig()


class TvtJointConfig(LoopConfig):
    """ End-to-end D4 training, optionally pulled towards the D8 latents by an L1 alignment term """
    perceptual_weight: NonNegativeFloat = 1.0
    kl_weight: NonNegativeFloat = 1e-6
    align_weight: NonNegativeFloat = 0.0
    sample_latent: bool = True
    optimizer: OptimizerConfig = OptimizerConfig()


def upsample2x(image: torch.Tensor) -> torch.Tensor:
    """ Bicubic 2x upsampling of a signed-range NCHW batch """
    return F.interpolate(image, scale_factor=2.0, mode='bicubic', align_corners=False).clamp(-1.0, 1.0)


def stage1_step(d8: VaeModel, d4: VaeModel, batch: torch.Tensor, cfg: TvtStage1Config, feature_net: nn.Module,
                optimizer: torch.optim.Optimizer, discriminator: Optional[nn.Module] = None,
                disc_optimizer: Optional[torch.optim.Optimizer] = None, step: int = 0) -> LossReport:
    """
    O = D4(E8(upsample2x(I))), L_D = L1(I, O) + LPIPS(I, O) + λ_D·L_GAN(O) with λ_D = g_rec / (g_gan + ε) taken at
    the decoder last layer. Updates the D4 decoder, then the discriminator once the GAN is active.
    @param d8: Frozen reference VAE, only its encoder is used
    @param d4: VAE-D4, its decoder is trained
    @param batch: NCHW unit-range images with dims divisible by 4
    @param cfg: TvtStage1Config
    @param feature_net: Frozen perceptual surrogate
    @param optimizer: Optimizer over the D4 decoder parameters
    @param discriminator: Patch discriminator, None disables the GAN term
    @param disc_optimizer: Discriminator optimizer
    @param step: Current step, compared with cfg.gan_start
    @return: LossReport
    """
    check_frozen(d8.encoder)
    image = to_signed(batch)
    check_image(image, d8.factor // cfg.upsample_factor)

    with torch.no_grad():
        latent = d8.encode(upsample2x(image), sample=False)
    output = d4.decode(latent)

    l1 = l1_loss(output, image)
    lpips = perceptual_loss(output, image, feature_net)
    rec = l1 + cfg.perceptual_weight * lpips

    gan_active = discriminator is not None and step >= cfg.gan_start
    weight, gan_g = 0.0, rec.new_zeros(())
    if gan_active:
        gan_g = -torch.mean(discriminator(output))
        weight = lambda_d(rec, gan_g, d4.last_layer, cfg.lambda_d_eps, cfg.lambda_d_max)
    total = check_finite(rec + weight * gan_g, 'stage-1 loss')

    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()

    gan_d = 0.0
    if gan_active:
        if disc_optimizer is None:
            raise TrainingException('GAN is active but no discriminator optimizer was provided')
        disc_optimizer.zero_grad(set_to_none=True)
        disc_loss = check_finite(hinge_d_loss(discriminator(image), discriminator(output.detach())),
                                 'discriminator loss')
        disc_loss.backward()
        disc_optimizer.step()
        gan_d = float(disc_loss)

    return LossReport(l1=float(l1), lpips=float(lpips), gan_g=float(gan_g), gan_d=gan_d, lambda_d=weight,
                      total=float(total))


def autoencoder_losses(vae: VaeModel, image: torch.Tensor, feature_net: nn.Module, sample_latent: bool = True,
                       generator: Optional[torch.Generator] = None
                       ) -> tuple[DiagonalGaussian, torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    Round trip of a signed-range batch through vae.
    @return: (posterior, L1, perceptual, KL per sample)
    """
    posterior = vae.encode_distribution(image)
    latent = posterior.sample(generator) if sample_latent else posterior.mode()
    output = vae.decode(latent)

    return (posterior, l1_loss(output, image), perceptual_loss(output, image, feature_net),
            kl_divergence(posterior) / image.shape[0])


def stage2_step(d4: VaeModel, batch: torch.Tensor, cfg: TvtStage2Config, feature_net: nn.Module,
                optimizer: torch.optim.Optimizer, generator: Optional[torch.Generator] = None) -> LossReport:
    """
    O = D4(E4(I)) with a frozen D4 decoder, L_E = L1(I, O) + LPIPS(I, O) (+ kl_weight·KL). No GAN term.
    @param d4: VAE-D4, decoder must be frozen
    @param batch: NCHW unit-range images with dims divisible by 4
    @param cfg: TvtStage2Config
    @param feature_net: Frozen perceptual surrogate
    @param optimizer: Optimizer over the D4 encoder parameters
    @param generator: Source of the latent sample
    @return: LossReport
    """
    check_frozen(d4.decoder)
    image = to_signed(batch)
    _, l1, lpips, kl = autoencoder_losses(d4, image, feature_net, cfg.sample_latent, generator)
    total = check_finite(l1 + cfg.perceptual_weight * lpips + cfg.kl_weight * kl, 'stage-2 loss')

    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()

    return LossReport(l1=float(l1), lpips=float(lpips), kl=float(kl), total=float(total))


def joint_step(d4: VaeModel, batch: torch.Tensor, cfg: TvtJointConfig, feature_net: nn.Module,
               optimizer: torch.optim.Optimizer, generator: Optional[torch.Generator] = None,
               d8: Optional[VaeModel] = None) -> LossReport:
    """
    End-to-end D4 step. With align_weight > 0 the D4 mean latent of I is pulled towards the frozen D8 mean latent of
    upsample2x(I) by an L1 term.
    """
    image = to_signed(batch)
    posterior, l1, lpips, kl = autoencoder_losses(d4, image, feature_net, cfg.sample_latent, generator)
    total = l1 + cfg.perceptual_weight * lpips + cfg.kl_weight * kl

    align = 0.0
    if cfg.align_weight > 0:
        if d8 is None:
            raise TrainingException('Latent alignment requires the reference VAE-D8')
        check_frozen(d8.encoder)
        with torch.no_grad():
            target = d8.encode(upsample2x(image), sample=False)
        align_loss = l1_loss(posterior.mode(), target)
        total = total + cfg.align_weight * align_loss
        align = float(align_loss)
    total = check_finite(total, 'joint loss')

    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()

    return LossReport(l1=float(l1), lpips=float(lpips), kl=float(kl), align=align, total=float(total))


#
# Phases
#
def train_decoder(d8: VaeModel, d4: VaeModel, source: Sequence[torch.Tensor], indices: Sequence[int],
                  cfg: TvtStage1Config, seed: int, feature_net: nn.Module, log: Optional[TrainingLog] = None,
                  checkpointer: Optional[Checkpointer] = None, resume: Optional[Checkpoint] = None) -> list[LossReport]:
    """
    Stage 1. Checkpoints hold components 'vae' and 'discriminator'.
    """
    freeze(d8)
    guard = FreezeGuard(d8, label='VAE-D8')
    d4.decoder.requires_grad_(True)
    discriminator = PatchDiscriminator(3, cfg.disc_ndf, seed=cfg.disc_seed)
    optimizer = build_optimizer(d4.decoder.parameters(), cfg.optimizer)
    disc_optimizer = build_optimizer(discriminator.parameters(), cfg.disc_optimizer)

    start_step = 0
    if resume is not None:
        resume.restore('vae', d4)
        resume.restore('discriminator', discriminator)
        resume.restore_optimizer('decoder', optimizer)
        resume.restore_optimizer('discriminator', disc_optimizer)
        start_step = resume.step

    def step_fn(step: int, generator: torch.Generator) -> LossReport:
        batch = sample_batch(source, indices, cfg.batch_size, generator)
        return stage1_step(d8, d4, batch, cfg, feature_net, optimizer, discriminator, disc_optimizer, step)

    def state_fn():
        return ({'vae': d4, 'discriminator': discriminator},
                {'decoder': optimizer, 'discriminator': disc_optimizer})

    runner = PhaseRunner(PHASE_DECODER, seed, cfg, cfg.optimizer.lr, log, checkpointer)
    reports = runner.run(step_fn, state_fn, start_step, on_checkpoint=lambda _: guard.verify())
    guard.verify()

    return reports


def train_encoder(d4: VaeModel, source: Sequence[torch.Tensor], indices: Sequence[int], cfg: TvtStage2Config,
                  seed: int, feature_net: nn.Module, log: Optional[TrainingLog] = None,
                  checkpointer: Optional[Checkpointer] = None, resume: Optional[Checkpoint] = None) -> list[LossReport]:
    """
    Stage 2. The decoder trained by stage 1 stays frozen. Checkpoints hold component 'vae'.
    """
    if resume is not None:
        resume.restore('vae', d4)
    freeze(d4.decoder)
    guard = FreezeGuard(d4.decoder, label='VAE-D4 decoder')
    d4.encoder.requires_grad_(True)
    optimizer = build_optimizer(d4.encoder.parameters(), cfg.optimizer)

    start_step = 0
    if resume is not None:
        resume.restore_optimizer('encoder', optimizer)
        start_step = resume.step

    def step_fn(step: int, generator: torch.Generator) -> LossReport:
        batch = sample_batch(source, indices, cfg.batch_size, generator)
        return stage2_step(d4, batch, cfg, feature_net, optimizer, generator)

    def state_fn():
        return {'vae': d4}, {'encoder': optimizer}

    runner = PhaseRunner(PHASE_ENCODER, seed, cfg, cfg.optimizer.lr, log, checkpointer)
    reports = runner.run(step_fn, state_fn, start_step, on_checkpoint=lambda _: guard.verify())
    guard.verify()

    return reports


def train_joint(d4: VaeModel, source: Sequence[torch.Tensor], indices: Sequence[int], cfg: TvtJointConfig,
                seed: int, feature_net: nn.Module, d8: Optional[VaeModel] = None, log: Optional[TrainingLog] = None,
                checkpointer: Optional[Checkpointer] = None, resume: Optional[Checkpoint] = None) -> list[LossReport]:
    """
    Ablations: from-scratch end-to-end D4 training (align_weight = 0) or joint training with latent alignment.
    """
    guard = None
    if d8 is not None:
        freeze(d8)
        guard = FreezeGuard(d8, label='VAE-D8')
    d4.requires_grad_(True)
    optimizer = build_optimizer(d4.parameters(), cfg.optimizer)

    start_step = 0
    if resume is not None:
        resume.restore('vae', d4)
        resume.restore_optimizer('vae', optimizer)
        start_step = resume.step

    def step_fn(step: int, generator: torch.Generator) -> LossReport:
        batch = sample_batch(source, indices, cfg.batch_size, generator)
        return joint_step(d4, batch, cfg, feature_net, optimizer, generator, d8)

    def state_fn():
        return {'vae': d4}, {'vae': optimizer}

    def verify(_: int) -> None:
        if guard is not None:
            guard.verify()

    runner = PhaseRunner(PHASE_JOINT, seed, cfg, cfg.optimizer.lr, log, checkpointer)
    reports = runner.run(step_fn, state_fn, start_step, on_checkpoint=verify)
    verify(cfg.total_steps)

    return reports


class TvtResult(NamedTuple):
    vae: VaeModel
    stage1: list[LossReport]
    stage2: list[LossReport]


def run_tvt(d8: VaeModel, d4: VaeModel, source: Sequence[torch.Tensor], indices: Sequence[int],
            cfg1: TvtStage1Config, cfg2: TvtStage2Config, seed: int, feature_net: nn.Module,
            log: Optional[TrainingLog] = None, checkpoint_dir: Optional[str] = None, spec_hash: str = '') -> TvtResult:
    """
    Stage 1 then stage 2, with a checkpoint at each stage boundary when checkpoint_dir is provided.
    @param d8: Trained reference VAE-D8, frozen throughout
    @param d4: Freshly built VAE-D4, trained in place
    @param source: Training images
    @param indices: Training indices into source
    @param cfg1: TvtStage1Config
    @param cfg2: TvtStage2Config
    @param seed: Run seed
    @param feature_net: Frozen perceptual surrogate
    @param log: Optional TrainingLog receiving per-step records of both stages
    @param checkpoint_dir: Optional checkpoint directory
    @param spec_hash: Spec hash recorded in the checkpoints
    @return: TvtResult
    """
    log = log if log is not None else TrainingLog()
    checkpointer1 = Checkpointer(checkpoint_dir, PHASE_DECODER, 'vae', spec_hash) if checkpoint_dir else None
    stage1 = train_decoder(d8, d4, source, indices, cfg1, seed, feature_net, log, checkpointer1)

    parent_id = checkpointer1.parent_id if checkpointer1 is not None else None
    checkpointer2 = Checkpointer(checkpoint_dir, PHASE_ENCODER, 'vae', spec_hash, parent_id) if checkpoint_dir else None
    stage2 = train_encoder(d4, source, indices, cfg2, seed, feature_net, log, checkpointer2)
    logger.info('Transfer VAE training finished: stage 1 %d steps, stage 2 %d steps', len(stage1), len(stage2))

    return TvtResult(d4, stage1, stage2)
