"""
 TVT-SR - Transfer VAE Training toolset for one-step super-resolution

 tvt_sr.base.diffusion
 This module implements the discrete diffusion schedule used by the one-step inversion and by score distillation
"""
from typing import Literal, Union
import torch
from pydantic import PositiveInt, PositiveFloat, model_validator
from .models_base import SpecModel, ModelException

TimestepsType = Union[int, torch.Tensor]


class ScheduleConfig(SpecModel):
    num_train_timesteps: PositiveInt = 1000
    beta_start: PositiveFloat = 0.00085
    beta_end: PositiveFloat = 0.012
    beta_schedule: Literal['scaled_linear', 'linear'] = 'scaled_linear'

    @model_validator(mode='after')
    def ordered_betas(self) -> 'ScheduleConfig':
        if not self.beta_start <= self.beta_end < 1.0:
            raise ValueError('Require beta_start <= beta_end < 1')
        return self


class DiffusionSchedule:
    """
    Table of cumulative products ᾱ_t, indexed by integer timestep. Stored in float64, coefficients are cast to the
    dtype of the tensors they scale.
    """
    def __init__(self, alphas_cumprod: torch.Tensor) -> None:
        alphas_cumprod = torch.as_tensor(alphas_cumprod, dtype=torch.float64)
        if alphas_cumprod.dim() != 1 or alphas_cumprod.numel() < 1:
            raise ModelException('ᾱ table must be a non-empty 1-D tensor')
        if bool((alphas_cumprod <= 0).any()) or bool((alphas_cumprod > 1).any()):
            raise ModelException('ᾱ values must be within (0, 1]')
        if bool((alphas_cumprod[1:] > alphas_cumprod[:-1]).any()):
            raise ModelException('ᾱ table must be monotone non-increasing')

        self.alphas_cumprod = alphas_cumprod

    @classmethod
    def from_config(cls, config: ScheduleConfig) -> 'DiffusionSchedule':
        if config.beta_schedule == 'scaled_linear':
            betas = torch.linspace(config.beta_start ** 0.5, config.beta_end ** 0.5, config.num_train_timesteps,
                                   dtype=torch.float64) ** 2
        else:
            betas = torch.linspace(config.beta_start, config.beta_end, config.num_train_timesteps,
                                   dtype=torch.float64)

        return cls(torch.cumprod(1.0 - betas, dim=0))

    def __len__(self) -> int:
        return self.alphas_cumprod.numel()

    def timesteps(self, timesteps: TimestepsType, batch: int) -> torch.Tensor:
        timesteps = torch.as_tensor(timesteps)
        if timesteps.dtype.is_floating_point:
            raise ModelException(f'Timesteps must be integers, got {timesteps.dtype}')
        if timesteps.dim() == 0:
            timesteps = timesteps.expand(batch)
        if bool((timesteps < 0).any()) or bool((timesteps >= len(self)).any()):
            raise ModelException(f'Timesteps must be within [0, {len(self)})')
        return timesteps.long()

    def alpha_bar(self, timesteps: TimestepsType, like: torch.Tensor) -> torch.Tensor:
        """
        @param timesteps: int or (N,) integer tensor
        @param like: NCHW tensor whose batch size, dtype and device the coefficients follow
        @return: ᾱ_t shaped (N, 1, 1, 1)
        """
        index = self.timesteps(timesteps, like.shape[0]).cpu()
        values = self.alphas_cumprod[index].reshape(-1, *([1] * (like.dim() - 1)))
        return values.to(dtype=like.dtype, device=like.device)

    def add_noise(self, z0: torch.Tensor, noise: torch.Tensor, timesteps: TimestepsType) -> torch.Tensor:
        """ z_t = √ᾱ_t·z0 + √(1 − ᾱ_t)·ε """
        alpha_bar = self.alpha_bar(timesteps, z0)
        return alpha_bar.sqrt() * z0 + (1.0 - alpha_bar).sqrt() * noise

    def predict_original(self, z_t: torch.Tensor, eps: torch.Tensor, timesteps: TimestepsType) -> torch.Tensor:
        """ z0 = (z_t − √(1 − ᾱ_t)·ε) / √ᾱ_t """
        alpha_bar = self.alpha_bar(timesteps, z_t)
        return (z_t - (1.0 - alpha_bar).sqrt() * eps) / alpha_bar.sqrt()

    def snr(self, timesteps: TimestepsType, like: torch.Tensor) -> torch.Tensor:
        alpha_bar = self.alpha_bar(timesteps, like)
        return alpha_bar / (1.0 - alpha_bar)

    def sample_timesteps(self, batch: int, t_min: int, t_max: int, generator: torch.Generator) -> torch.Tensor:
        """ Uniform integer timesteps within [t_min, t_max] """
        if not 0 <= t_min <= t_max < len(self):
            raise ModelException(f'Timestep range [{t_min}, {t_max}] is outside the schedule')
        return torch.randint(t_min, t_max + 1, (batch,), generator=generator)


def default_schedule(num_train_timesteps: int = 1000) -> DiffusionSchedule:
    return DiffusionSchedule.from_config(ScheduleConfig(num_train_timesteps=num_train_timesteps))
