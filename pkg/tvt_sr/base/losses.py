"""
 TVT-SR - Transfer VAE Training toolset for one-step super-resolution

 tvt_sr.base.losses
 This module implements the loss terms: L1, perceptual surrogate, hinge adversarial, adaptive GAN weight and
 variational score distillation
"""
import math
from typing import Literal, NamedTuple, Optional, Union
from collections.abc import Callable
import torch
import torch.nn.functional as F
from torch import nn
from pydantic import BaseModel, ConfigDict, PositiveFloat, field_validator, model_validator
from .models_base import SpecModel, freeze, seeded_reset
from .layers import group_norm
from .diffusion import DiffusionSchedule

# Signature of a noise-prediction network: (z_t, timesteps, context) -> ε̂
EpsModel = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]

LAMBDA_D_EPS = 1e-6
LAMBDA_D_MAX = 1e4


class LossException(Exception):
    """ Exception for loss evaluation errors """
    pass


class NonFiniteScoreException(LossException):
    """ Exception indicating NaN or infinite noise predictions or diffusion loss in score distillation """
    pass


class LossReport(BaseModel):
    """
    Scalar value of every loss term of one training step. Inactive terms are zero. total is the weighted sum of the
    active terms as optimized by the step that produced the report.
    """
    model_config = ConfigDict(extra='forbid')

    l1: float = 0.0
    lpips: float = 0.0
    gan_g: float = 0.0
    gan_d: float = 0.0
    vsd: float = 0.0
    kl: float = 0.0
    align: float = 0.0
    reg: float = 0.0
    lambda_d: float = 0.0
    total: float = 0.0

    @field_validator('*')
    @classmethod
    def finite_value(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError(f'non-finite loss value {value}')
        return value


class VsdConfig(SpecModel):
    timestep_range: tuple[int, int] = (20, 980)
    weight_fn: Literal['uniform', 'snr'] = 'uniform'
    grad_clip: Optional[PositiveFloat] = None
    regularizer_lr: PositiveFloat = 1e-4

    @model_validator(mode='after')
    def valid_range(self) -> 'VsdConfig':
        t_min, t_max = self.timestep_range
        if not 0 < t_min <= t_max:
            raise ValueError(f'Invalid timestep_range {self.timestep_range}, require 0 < t_min <= t_max')
        return self


def check_same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise LossException(f'Shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}')


def l1_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    check_same_shape(a, b)
    return torch.mean(torch.abs(a - b))


class PerceptualNet(nn.Module):
    """
    Small frozen convolutional pyramid with weights drawn from a fixed seed. Stands in for the LPIPS backbone.
    """
    widths = (8, 16, 16, 32, 32)
    strides = (1, 2, 1, 2, 1)

    def __init__(self, in_channels: int = 3, seed: int = 0) -> None:
        super().__init__()
        self.layers = nn.ModuleList()
        for width, stride in zip(self.widths, self.strides):
            self.layers.append(nn.Conv2d(in_channels, width, kernel_size=3, stride=stride, padding=1))
            in_channels = width

        seeded_reset(self, torch.Generator().manual_seed(seed))
        freeze(self)
        self.eval()

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        features = []
        for layer in self.layers:
            x = F.silu(layer(x))
            features.append(x)
        return features


def normalize_channels(features: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
    norm = torch.sqrt(torch.sum(features ** 2, dim=1, keepdim=True))
    return features / (norm + eps)


def perceptual_loss(a: torch.Tensor, b: torch.Tensor, feature_net: nn.Module) -> torch.Tensor:
    """
    Sum over layers of the spatially averaged squared distance between channel-normalized feature maps.
    @param a: NCHW image batch
    @param b: NCHW image batch, same shape as a
    @param feature_net: Frozen module returning a list of feature maps
    @return: Scalar tensor >= 0
    """
    check_same_shape(a, b)
    if any(param.requires_grad for param in feature_net.parameters()):
        raise LossException('Perceptual feature network must be frozen')

    loss = a.new_zeros(())
    for feat_a, feat_b in zip(feature_net(a), feature_net(b)):
        diff = (normalize_channels(feat_a) - normalize_channels(feat_b)) ** 2
        loss = loss + diff.sum(dim=1).mean()

    return loss


class PatchDiscriminator(nn.Module):
    """
    PatchGAN discriminator with two stride-2 and two stride-1 4x4 convs. Outputs one logit per overlapping patch.
    """
    def __init__(self, in_channels: int = 3, ndf: int = 64, norm_groups: int = 32, seed: Optional[int] = None) -> None:
        super().__init__()
        self.model = nn.Sequential(
            nn.Conv2d(in_channels, ndf, kernel_size=4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(ndf, 2 * ndf, kernel_size=4, stride=2, padding=1, bias=False),
            group_norm(2 * ndf, norm_groups),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * ndf, 4 * ndf, kernel_size=4, stride=1, padding=1, bias=False),
            group_norm(4 * ndf, norm_groups),
            nn.LeakyReLU(0.2),
            nn.Conv2d(4 * ndf, 1, kernel_size=4, stride=1, padding=1),
        )
        if seed is not None:
            seeded_reset(self, torch.Generator().manual_seed(seed))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.model(x)


def hinge_d_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    return torch.mean(F.relu(1.0 - real_logits)) + torch.mean(F.relu(1.0 + fake_logits))


def gan_losses(disc: Callable[[torch.Tensor], torch.Tensor], real: torch.Tensor,
               fake: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """
    Hinge adversarial losses.
    @param disc: Patch discriminator
    @param real: Real image batch
    @param fake: Generated image batch, same shape as real
    @return: (gan_g, gan_d). gan_g carries gradients to the generator through fake, gan_d is computed on a detached
             fake and only trains the discriminator.
    """
    check_same_shape(real, fake)
    gan_g = -torch.mean(disc(fake))
    gan_d = hinge_d_loss(disc(real.detach()), disc(fake.detach()))

    return gan_g, gan_d


def adaptive_gan_weight(g_rec: Union[float, torch.Tensor], g_gan: Union[float, torch.Tensor],
                        eps: float = LAMBDA_D_EPS, max_weight: Optional[float] = LAMBDA_D_MAX) -> float:
    """
    λ_D = g_rec / (g_gan + eps), clamped to [0, max_weight].
    @param g_rec: Gradient norm of the reconstruction loss w.r.t. the decoder last layer
    @param g_gan: Gradient norm of the GAN loss w.r.t. the decoder last layer
    @param eps: Denominator floor
    @param max_weight: Upper clamp, None to disable
    @return: λ_D
    """
    g_rec, g_gan = float(g_rec), float(g_gan)
    if g_rec < 0 or g_gan < 0:
        raise LossException(f'Gradient norms must be non-negative, got {g_rec} and {g_gan}')

    weight = g_rec / (g_gan + eps)
    return weight if max_weight is None else min(weight, max_weight)


def last_layer_grad_norm(loss: torch.Tensor, last_layer: torch.Tensor) -> float:
    grad, = torch.autograd.grad(loss, last_layer, retain_graph=True)
    return float(torch.linalg.vector_norm(grad))


def lambda_d(rec_loss: torch.Tensor, gan_loss: torch.Tensor, last_layer: torch.Tensor,
             eps: float = LAMBDA_D_EPS, max_weight: Optional[float] = LAMBDA_D_MAX) -> float:
    """ Adaptive GAN weight from the gradients of both losses at the decoder last layer """
    return adaptive_gan_weight(last_layer_grad_norm(rec_loss, last_layer), last_layer_grad_norm(gan_loss, last_layer),
                               eps, max_weight)


def vsd_weight(schedule: DiffusionSchedule, timesteps: torch.Tensor, like: torch.Tensor,
               weight_fn: str) -> Union[float, torch.Tensor]:
    if weight_fn == 'uniform':
        return 1.0
    if weight_fn == 'snr':
        # 1 / (1 + SNR(t))
        return 1.0 - schedule.alpha_bar(timesteps, like)

    raise LossException(f'Unknown weight_fn: {weight_fn}')


class VsdResult(NamedTuple):
    loss: torch.Tensor
    grad: torch.Tensor
    timesteps: torch.Tensor
    z_t: torch.Tensor


def check_timestep_range(config: VsdConfig, schedule: DiffusionSchedule) -> tuple[int, int]:
    t_min, t_max = config.timestep_range
    if t_max >= len(schedule):
        raise LossException(f'VSD timestep range [{t_min}, {t_max}] exceeds schedule length {len(schedule)}')
    return t_min, t_max


def vsd_generator_grad(z_sr: torch.Tensor, context: torch.Tensor, schedule: DiffusionSchedule,
                       eps_pretrained: EpsModel, eps_lora: EpsModel, config: VsdConfig,
                       generator: Optional[torch.Generator] = None, timesteps: Optional[torch.Tensor] = None,
                       noise: Optional[torch.Tensor] = None) -> VsdResult:
    """
    Score distillation direction ω(t)·(ε_φ(z_t) − ε_θ(z_t)) on the noised generator latent.
    @param z_sr: Generator latent, requires grad
    @param context: Conditioning sequence
    @param schedule: DiffusionSchedule
    @param eps_pretrained: Frozen pretrained noise predictor ε_φ
    @param eps_lora: LoRA-tuned noise predictor ε_θ
    @param config: VsdConfig
    @param generator: Source of timesteps and noise
    @param timesteps: Optional explicit timesteps, sampled from config.timestep_range otherwise
    @param noise: Optional explicit noise, sampled from generator otherwise
    @return: VsdResult. The proxy loss 0.5·Σ‖z_sr − stopgrad(z_sr − g)‖² has gradient g w.r.t. z_sr.
    """
    t_min, t_max = check_timestep_range(config, schedule)
    batch = z_sr.shape[0]
    if timesteps is None:
        timesteps = schedule.sample_timesteps(batch, t_min, t_max, generator)
    if noise is None:
        noise = torch.randn(z_sr.shape, generator=generator, dtype=z_sr.dtype, device=z_sr.device)
    check_same_shape(z_sr, noise)

    with torch.no_grad():
        z_t = schedule.add_noise(z_sr.detach(), noise, timesteps)
        eps_phi = eps_pretrained(z_t, timesteps, context.detach())
        eps_theta = eps_lora(z_t, timesteps, context.detach())
        grad = vsd_weight(schedule, timesteps, z_sr, config.weight_fn) * (eps_phi - eps_theta)
        if not bool(torch.isfinite(grad).all()):
            raise NonFiniteScoreException(f'Non-finite score difference at timesteps {timesteps.tolist()}')
        if config.grad_clip is not None:
            grad = grad.clamp(-config.grad_clip, config.grad_clip)

    # d(loss)/d(z_sr) = z_sr - target = grad
    target = (z_sr - grad).detach()
    loss = 0.5 * F.mse_loss(z_sr, target, reduction='sum')

    return VsdResult(loss, grad, timesteps, z_t)


def diffusion_loss(eps_model: EpsModel, z0: torch.Tensor, context: torch.Tensor, schedule: DiffusionSchedule,
                   timesteps: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    """ ε-prediction MSE: mean‖ε_model(z_t, t, c) − ε‖² """
    check_same_shape(z0, noise)
    z_t = schedule.add_noise(z0, noise, timesteps)
    return F.mse_loss(eps_model(z_t, timesteps, context), noise, reduction='mean')


def vsd_regularizer_step(eps_lora: EpsModel, z_sr: torch.Tensor, context: torch.Tensor, schedule: DiffusionSchedule,
                         optimizer: torch.optim.Optimizer, config: VsdConfig,
                         generator: Optional[torch.Generator] = None) -> float:
    """
    One update of the finetunable regularizer ε_θ on detached generator latents.
    @param eps_lora: ε_θ. The optimizer must only hold its LoRA parameters.
    @param z_sr: Generator latent, detached internally
    @param context: Conditioning sequence, detached internally
    @param schedule: DiffusionSchedule
    @param optimizer: Optimizer over ε_θ trainable parameters
    @param config: VsdConfig, provides the timestep range
    @param generator: Source of timesteps and noise
    @return: Diffusion loss value before the update
    """
    z0 = z_sr.detach()
    t_min, t_max = check_timestep_range(config, schedule)
    timesteps = schedule.sample_timesteps(z0.shape[0], t_min, t_max, generator)
    noise = torch.randn(z0.shape, generator=generator, dtype=z0.dtype, device=z0.device)

    optimizer.zero_grad(set_to_none=True)
    loss = diffusion_loss(eps_lora, z0, context.detach(), schedule, timesteps, noise)
    if not torch.isfinite(loss):
        raise NonFiniteScoreException('Non-finite regularizer diffusion loss')
    loss.backward()
    optimizer.step()

    return float(loss.detach())
