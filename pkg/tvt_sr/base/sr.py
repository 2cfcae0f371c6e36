"""
 TVT-SR - Transfer VAE Training toolset for one-step super-resolution

 tvt_sr.base.sr
 This module implements one-step restoration: encode, single ε-prediction at a fixed timestep, closed-form inversion
 to the clean latent and decode. Plus the SR evaluation against the bicubic baseline.
"""
import logging
from typing import NamedTuple, Optional, Union
from collections.abc import Callable, Sequence
import torch
import torch.nn.functional as F
from torch import nn
from .models_base import ShapeException, to_signed, to_unit, freeze
from .diffusion import DiffusionSchedule
from .vae import VaeModel
from .ce_unet import CeUnetModel
from .unet import UnetModel
from .degradation import Pair, FINAL_SCALE
from .metrics import MetricException, MetricRecord, image_metrics, summarize

logger = logging.getLogger(__name__)

Denoiser = Union[CeUnetModel, UnetModel, Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]]


class ConditioningStub(nn.Module):
    """
    Learned fixed-length conditioning sequence standing in for a prompt encoder. Every sample of a batch receives the
    same (tokens, dim) sequence.
    """
    def __init__(self, tokens: int, dim: int, seed: int = 0) -> None:
        super().__init__()
        generator = torch.Generator().manual_seed(seed)
        self.embedding = nn.Parameter(0.02 * torch.randn(tokens, dim, generator=generator))

    @property
    def tokens(self) -> int:
        return self.embedding.shape[0]

    def forward(self, batch: int) -> torch.Tensor:
        return self.embedding.unsqueeze(0).expand(batch, -1, -1)


def bicubic_baseline(lr: torch.Tensor, scale: int = FINAL_SCALE) -> torch.Tensor:
    """ Unit-range CHW or NCHW LR image bicubic-upsampled by scale """
    batched = lr if lr.dim() == 4 else lr.unsqueeze(0)
    upsampled = F.interpolate(batched, scale_factor=scale, mode='bicubic', align_corners=False).clamp(0.0, 1.0)
    return upsampled if lr.dim() == 4 else upsampled[0]


def restore_latent(vae: VaeModel, denoiser: Denoiser, image: torch.Tensor, context: torch.Tensor,
                   schedule: DiffusionSchedule, t: int = 1, latent_scale: float = 1.0) -> torch.Tensor:
    """ Scaled restored latent z_SR of a signed-range NCHW image, see one_step_restore """
    if not 0 <= t < len(schedule):
        raise ShapeException(f'Timestep {t} is outside the schedule of length {len(schedule)}')

    z = vae.encode(image, sample=False) * latent_scale
    return schedule.predict_original(z, denoiser(z, t, context), t)


def one_step_restore(vae: VaeModel, denoiser: Denoiser, image: torch.Tensor, context: torch.Tensor,
                     schedule: DiffusionSchedule, t: int = 1, latent_scale: float = 1.0) -> torch.Tensor:
    """
    z = E(I)·s (mean latent), ε̂ = denoiser(z, t, c), z_SR = (z − √(1−ᾱ_t)·ε̂)/√ᾱ_t, I_SR = D(z_SR/s).
    No noise is injected, identical inputs give bit-identical outputs.
    @param vae: Autoencoder, typically VAE-D4
    @param denoiser: CE-UNet or any ε-prediction callable
    @param image: NCHW signed-range image already in the output frame
    @param context: (N, tokens, context_dim) conditioning
    @param schedule: DiffusionSchedule
    @param t: Restoration timestep
    @param latent_scale: Latent scaling factor the denoiser was trained with
    @return: NCHW signed-range restored image
    """
    z_sr = restore_latent(vae, denoiser, image, context, schedule, t, latent_scale)
    return vae.decode(z_sr / latent_scale)


class SrPipeline:
    """
    Inference wrapper: LR unit-range images in, SR unit-range images out.
    """
    def __init__(self, vae: VaeModel, denoiser: Denoiser, stub: ConditioningStub, schedule: DiffusionSchedule,
                 t: int = 1, latent_scale: float = 1.0, scale: int = FINAL_SCALE) -> None:
        self.vae = freeze(vae).eval()
        self.denoiser = denoiser
        self.stub = stub
        self.schedule = schedule
        self.t = t
        self.latent_scale = latent_scale
        self.scale = scale

    @property
    def input_multiple(self) -> int:
        """ LR spatial dims must be multiples of this value """
        spec = getattr(self.denoiser, 'spec', None)
        multiple = spec.input_multiple if spec is not None else 1
        return max(1, multiple * self.vae.factor // self.scale)

    def check_lr(self, lr: torch.Tensor) -> None:
        if lr.dim() != 4 or lr.shape[1] != 3:
            raise ShapeException(f'Expected an NCHW RGB batch, got shape {tuple(lr.shape)}')
        multiple = self.input_multiple
        if lr.shape[-2] % multiple or lr.shape[-1] % multiple:
            raise ShapeException(f'LR dims {tuple(lr.shape[-2:])} are not multiples of {multiple}')

    def restore_latent(self, lr: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """
        Differentiable path: unit-range NCHW LR to the scaled restored latent.
        @return: (z_SR, context)
        """
        self.check_lr(lr)
        frame = to_signed(bicubic_baseline(lr, self.scale))
        context = self.stub(lr.shape[0])
        z_sr = restore_latent(self.vae, self.denoiser, frame, context, self.schedule, self.t, self.latent_scale)

        return z_sr, context

    def decode(self, z_sr: torch.Tensor) -> torch.Tensor:
        return self.vae.decode(z_sr / self.latent_scale)

    def signed_restore(self, lr: torch.Tensor) -> torch.Tensor:
        """ Differentiable path: unit-range NCHW LR to signed-range SR """
        z_sr, _ = self.restore_latent(lr)
        return self.decode(z_sr)

    def __call__(self, lr: torch.Tensor) -> torch.Tensor:
        """
        @param lr: CHW or NCHW unit-range LR image(s)
        @return: Unit-range SR image(s), same rank as lr
        """
        batched = lr if lr.dim() == 4 else lr.unsqueeze(0)
        with torch.no_grad():
            sr = to_unit(self.signed_restore(batched))

        return sr if lr.dim() == 4 else sr[0]


class SrEvaluation(NamedTuple):
    names: list[str]
    per_image: list[dict[str, float]]
    records: list[MetricRecord]
    baseline_records: list[MetricRecord]


def evaluate_sr(pipeline: SrPipeline, pairs: Sequence[Pair], names: Optional[Sequence[str]] = None,
                feature_net: Optional[nn.Module] = None) -> SrEvaluation:
    """
    Per-image and aggregate PSNR-Y / SSIM-Y (and perceptual distance) of the pipeline output and of the bicubic
    baseline, in pair order.
    @param pipeline: SrPipeline
    @param pairs: Test pairs
    @param names: Optional image names, defaults to the pair index
    @param feature_net: Optional perceptual surrogate network
    @return: SrEvaluation
    """
    if not pairs:
        raise MetricException('Empty SR test set')
    names = list(names) if names is not None else [f'{index:06d}' for index in range(len(pairs))]

    per_image, baseline = [], []
    for pair in pairs:
        per_image.append(image_metrics(pipeline(pair.lr), pair.hr, feature_net))
        baseline.append(image_metrics(bicubic_baseline(pair.lr, pipeline.scale), pair.hr, feature_net))

    logger.debug('SR evaluation over %d pairs', len(pairs))
    return SrEvaluation(names, per_image, summarize(per_image), summarize(baseline))
