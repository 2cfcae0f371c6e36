"""
 TVT-SR - Transfer VAE Training toolset for one-step super-resolution

 tvt_sr.base.metrics
 This module implements reference-based quality metrics on the luma channel and the reconstruction benchmark
"""
import math
import logging
from typing import Optional
from collections.abc import Iterable
import torch
import torch.nn.functional as F
from torch import nn
from pydantic import BaseModel, ConfigDict, model_validator
from .models_base import to_signed, to_unit
from .losses import perceptual_loss

logger = logging.getLogger(__name__)

# Full-range ITU-R BT.601 luma coefficients
LUMA_WEIGHTS = (0.299, 0.587, 0.114)
PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class MetricException(Exception):
    """ Exception for metric computation errors """
    pass


class MetricRecord(BaseModel):
    model_config = ConfigDict(extra='forbid')

    name: str
    values: list[float]
    mean: float
    count: int

    @model_validator(mode='after')
    def consistent_summary(self) -> 'MetricRecord':
        if self.count != len(self.values):
            raise ValueError(f'count {self.count} does not match {len(self.values)} values')
        if self.values and not math.isclose(self.mean, math.fsum(self.values) / len(self.values), rel_tol=1e-12):
            raise ValueError('mean is not the arithmetic mean of values')
        return self

    @classmethod
    def from_values(cls, name: str, values: Iterable[float]) -> 'MetricRecord':
        values = [float(value) for value in values]
        if not values:
            raise MetricException(f'No values for metric {name}')
        return cls(name=name, values=values, mean=math.fsum(values) / len(values), count=len(values))


def as_batch(image: torch.Tensor) -> torch.Tensor:
    if image.dim() == 3:
        image = image.unsqueeze(0)
    if image.dim() != 4 or image.shape[1] != 3:
        raise MetricException(f'Expected a CHW or NCHW RGB image, got shape {tuple(image.shape)}')
    return image.to(torch.float64)


def to_y(image: torch.Tensor) -> torch.Tensor:
    """
    Luma plane of a unit-range RGB image.
    @param image: CHW or NCHW RGB tensor in [0, 1]
    @return: N1HW float64 tensor
    """
    image = as_batch(image)
    red, green, blue = image[:, 0:1], image[:, 1:2], image[:, 2:3]
    return LUMA_WEIGHTS[0] * red + LUMA_WEIGHTS[1] * green + LUMA_WEIGHTS[2] * blue


def check_pair(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise MetricException(f'Image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}')


def psnr_y(a: torch.Tensor, b: torch.Tensor, max_value: float = 1.0, cap: float = PSNR_CAP) -> float:
    """
    PSNR on the Y channel, averaged over the batch if a and b hold more than one image.
    @return: PSNR in dB, capped at cap
    """
    check_pair(a, b)
    mse = torch.mean((to_y(a) - to_y(b)) ** 2, dim=(1, 2, 3))
    values = [cap if value == 0 else min(cap, 10.0 * math.log10(max_value ** 2 / value)) for value in mse.tolist()]

    return math.fsum(values) / len(values)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - size // 2
    kernel = torch.exp(-(coords ** 2) / (2 * sigma ** 2))
    kernel = kernel / kernel.sum()
    return torch.outer(kernel, kernel)


def ssim_map(y_a: torch.Tensor, y_b: torch.Tensor, max_value: float = 1.0) -> torch.Tensor:
    """ SSIM over every valid window position of N1HW luma planes """
    if min(y_a.shape[-2:]) < SSIM_WINDOW:
        raise MetricException(f'Images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM')

    window = gaussian_window().to(y_a.device)[None, None]
    c1 = (SSIM_K1 * max_value) ** 2
    c2 = (SSIM_K2 * max_value) ** 2

    mu_a = F.conv2d(y_a, window)
    mu_b = F.conv2d(y_b, window)
    var_a = F.conv2d(y_a * y_a, window) - mu_a ** 2
    var_b = F.conv2d(y_b * y_b, window) - mu_b ** 2
    cov = F.conv2d(y_a * y_b, window) - mu_a * mu_b

    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))


def ssim_y(a: torch.Tensor, b: torch.Tensor, max_value: float = 1.0) -> float:
    """
    SSIM on the Y channel with an 11x11 gaussian window (σ=1.5), averaged over valid window positions and batch.
    """
    check_pair(a, b)
    return float(ssim_map(to_y(a), to_y(b), max_value).mean())


def perceptual_distance(a: torch.Tensor, b: torch.Tensor, feature_net: nn.Module) -> float:
    dtype = next(feature_net.parameters()).dtype
    with torch.no_grad():
        return float(perceptual_loss(to_signed(as_batch(a)).to(dtype), to_signed(as_batch(b)).to(dtype), feature_net))


def image_metrics(pred: torch.Tensor, target: torch.Tensor,
                  feature_net: Optional[nn.Module] = None) -> dict[str, float]:
    """
    @param pred: CHW unit-range image
    @param target: CHW unit-range image
    @param feature_net: Optional perceptual surrogate network
    @return: {'psnr_y': ..., 'ssim_y': ..., 'perceptual': ...}
    """
    metrics = {'psnr_y': psnr_y(pred, target), 'ssim_y': ssim_y(pred, target)}
    if feature_net is not None:
        metrics['perceptual'] = perceptual_distance(pred, target, feature_net)

    return metrics


def summarize(per_image: list[dict[str, float]]) -> list[MetricRecord]:
    if not per_image:
        raise MetricException('Empty image set')
    return [MetricRecord.from_values(name, (entry[name] for entry in per_image)) for name in per_image[0]]


def recon_benchmark(vae: nn.Module, images: Iterable[torch.Tensor],
                    feature_net: Optional[nn.Module] = None) -> list[MetricRecord]:
    """
    Round-trip reconstruction benchmark, decode(encode(I)) with the mean latent.
    @param vae: VaeModel
    @param images: Unit-range CHW images with dims divisible by the VAE factor
    @param feature_net: Optional perceptual surrogate network
    @return: MetricRecords for psnr_y, ssim_y and perceptual (if feature_net provided)
    """
    per_image = []
    with torch.no_grad():
        for image in images:
            signed = to_signed(image.unsqueeze(0).to(next(vae.parameters()).dtype))
            reconstruction = to_unit(vae.decode(vae.encode(signed, sample=False)))[0]
            per_image.append(image_metrics(reconstruction, image, feature_net))

    logger.debug('Reconstruction benchmark over %d images', len(per_image))
    return summarize(per_image)
