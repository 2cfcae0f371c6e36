"""
 TVT-SR - Transfer VAE Training toolset for one-step super-resolution

 tvt_sr.base.degradation
 This module implements the seeded synthetic degradation pipeline (blur, resize, noise, compression) used to build
 LR-HR training pairs
"""
import json
import logging
from pathlib import Path
from typing import Annotated, Any, Literal, NamedTuple, Optional, Union
from collections.abc import Sequence
import numpy as np
import torch
import torch.nn.functional as F
from scipy.fft import dctn, idctn
from pydantic import Field, NonNegativeFloat, PositiveInt, field_validator, model_validator
from .models_base import SpecModel, check_image, ShapeException
from .data import save_image, load_image, DataException

logger = logging.getLogger(__name__)

FINAL_SCALE = 4
JPEG_BLOCK = 8

LUMINANCE_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)

CHROMINANCE_TABLE = np.full((8, 8), 99, dtype=np.float64)
CHROMINANCE_TABLE[:4, :4] = [
    [17, 18, 24, 47],
    [18, 21, 26, 66],
    [24, 26, 56, 99],
    [47, 66, 99, 99],
]


class DegradationException(Exception):
    """ Exception for degradation pipeline errors """
    pass


def ordered_pair(value: tuple[float, float]) -> tuple[float, float]:
    if value[0] > value[1]:
        raise ValueError(f'Range {tuple(value)} is empty, lower bound exceeds upper bound')
    return value


class BlurStage(SpecModel):
    op: Literal['blur'] = 'blur'
    kernel_size: PositiveInt = 21
    sigma_range: tuple[float, float] = (0.2, 3.0)
    anisotropic_prob: float = Field(0.5, ge=0.0, le=1.0)

    @field_validator('kernel_size')
    @classmethod
    def odd_kernel(cls, kernel_size: int) -> int:
        if kernel_size % 2 == 0:
            raise ValueError('kernel_size must be odd')
        return kernel_size

    @field_validator('sigma_range')
    @classmethod
    def positive_sigma(cls, sigma_range: tuple[float, float]) -> tuple[float, float]:
        if sigma_range[0] <= 0:
            raise ValueError('Blur sigma must be positive')
        return ordered_pair(sigma_range)


class ResizeStage(SpecModel):
    op: Literal['resize'] = 'resize'
    scale_range: tuple[float, float] = (0.5, 1.5)
    modes: tuple[Literal['bilinear', 'bicubic', 'area'], ...] = ('bilinear', 'bicubic', 'area')

    @field_validator('scale_range')
    @classmethod
    def positive_scale(cls, scale_range: tuple[float, float]) -> tuple[float, float]:
        if scale_range[0] <= 0:
            raise ValueError('Resize scale must be positive')
        return ordered_pair(scale_range)

    @field_validator('modes')
    @classmethod
    def some_mode(cls, modes: tuple[str, ...]) -> tuple[str, ...]:
        if not modes:
            raise ValueError('At least one resize mode is required')
        return modes


class NoiseStage(SpecModel):
    op: Literal['noise'] = 'noise'
    gaussian_prob: float = Field(0.5, ge=0.0, le=1.0)
    sigma_range: tuple[NonNegativeFloat, NonNegativeFloat] = (1.0, 30.0)
    poisson_scale_range: tuple[NonNegativeFloat, NonNegativeFloat] = (0.05, 3.0)
    gray_prob: float = Field(0.4, ge=0.0, le=1.0)

    @field_validator('sigma_range', 'poisson_scale_range')
    @classmethod
    def nonempty_range(cls, value: tuple[float, float]) -> tuple[float, float]:
        return ordered_pair(value)


class CompressionStage(SpecModel):
    op: Literal['compression'] = 'compression'
    quality_range: tuple[int, int] = (30, 95)

    @field_validator('quality_range')
    @classmethod
    def valid_quality(cls, quality_range: tuple[int, int]) -> tuple[int, int]:
        if quality_range[0] < 1 or quality_range[1] > 100:
            raise ValueError('Quality must be within [1, 100]')
        return ordered_pair(quality_range)


StageType = Annotated[Union[BlurStage, ResizeStage, NoiseStage, CompressionStage], Field(discriminator='op')]


class DegradationConfig(SpecModel):
    stages: tuple[StageType, ...] = (BlurStage(), ResizeStage(), NoiseStage(), CompressionStage())
    second_order: bool = False
    final_scale: Literal[4] = FINAL_SCALE
    seed: int = 0

    @model_validator(mode='after')
    def single_resize(self) -> 'DegradationConfig':
        if sum(isinstance(stage, ResizeStage) for stage in self.stages) > 1:
            raise ValueError('At most one resize stage is supported')
        return self

    @property
    def has_resize(self) -> bool:
        return any(isinstance(stage, ResizeStage) for stage in self.stages)


class DegradeResult(NamedTuple):
    lr: torch.Tensor
    record: list[dict[str, Any]]


#
# Blur
#
def sigma_matrix2(sig_x: float, sig_y: float, theta: float) -> np.ndarray:
    diagonal = np.array([[sig_x ** 2, 0.0], [0.0, sig_y ** 2]])
    rotation = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    return rotation @ diagonal @ rotation.T


def bivariate_gaussian(kernel_size: int, sig_x: float, sig_y: float, theta: float) -> np.ndarray:
    """ Normalized, possibly rotated, gaussian kernel """
    axis = np.arange(-(kernel_size // 2), kernel_size // 2 + 1, dtype=np.float64)
    xx, yy = np.meshgrid(axis, axis)
    grid = np.stack([xx, yy], axis=-1)
    inverse_sigma = np.linalg.inv(sigma_matrix2(sig_x, sig_y, theta))
    kernel = np.exp(-0.5 * np.sum((grid @ inverse_sigma) * grid, axis=-1))
    return kernel / kernel.sum()


def filter2d(image: torch.Tensor, kernel: np.ndarray) -> torch.Tensor:
    """ Depthwise 2-D filtering of an NCHW batch with reflect padding """
    size = kernel.shape[-1]
    batch, channels, height, width = image.shape
    if size // 2 >= min(height, width):
        raise DegradationException(f'Blur kernel {size} is too large for a {height}x{width} image')

    padded = F.pad(image, (size // 2,) * 4, mode='reflect')
    weight = torch.as_tensor(kernel, dtype=image.dtype, device=image.device).expand(channels, 1, size, size)
    return F.conv2d(padded, weight, groups=channels)


def apply_blur(image: torch.Tensor, stage: BlurStage, rng: np.random.Generator) -> tuple[torch.Tensor, dict]:
    if rng.random() < stage.anisotropic_prob:
        family = 'anisotropic'
        sig_x, sig_y = rng.uniform(*stage.sigma_range, size=2)
        theta = rng.uniform(-np.pi, np.pi)
    else:
        family = 'isotropic'
        sig_x = sig_y = rng.uniform(*stage.sigma_range)
        theta = 0.0

    kernel = bivariate_gaussian(stage.kernel_size, sig_x, sig_y, theta)
    params = {'op': 'blur', 'family': family, 'kernel_size': stage.kernel_size, 'sigma_x': float(sig_x),
              'sigma_y': float(sig_y), 'theta': float(theta)}
    return filter2d(image, kernel), params


#
# Resize
#
def snap(image: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    if tuple(image.shape[-2:]) == size:
        return image
    return F.interpolate(image, size=size, mode='bicubic', align_corners=False, antialias=True)


def apply_resize(image: torch.Tensor, stage: ResizeStage, rng: np.random.Generator,
                 target: tuple[int, int]) -> tuple[torch.Tensor, dict]:
    scale = rng.uniform(*stage.scale_range)
    mode = stage.modes[rng.integers(len(stage.modes))]
    height, width = image.shape[-2:]
    size = (max(1, round(height * scale)), max(1, round(width * scale)))
    if mode == 'area':
        image = F.interpolate(image, size=size, mode='area')
    else:
        image = F.interpolate(image, size=size, mode=mode, align_corners=False)

    return snap(image, target), {'op': 'resize', 'scale': float(scale), 'mode': mode, 'size': list(size)}


#
# Noise
#
def luma(image: torch.Tensor) -> torch.Tensor:
    return 0.299 * image[:, 0:1] + 0.587 * image[:, 1:2] + 0.114 * image[:, 2:3]


def gaussian_noise(image: torch.Tensor, sigma: float, gray: bool, generator: torch.Generator) -> torch.Tensor:
    batch, channels, height, width = image.shape
    shape = (batch, 1, height, width) if gray else image.shape
    noise = torch.randn(shape, generator=generator, dtype=image.dtype) * sigma / 255.0
    return noise.expand(batch, channels, height, width)


def poisson_noise(image: torch.Tensor, scale: float, gray: bool, generator: torch.Generator,
                  levels: float = 255.0) -> torch.Tensor:
    source = luma(image) if gray else image
    source = torch.clamp(source, 0.0, 1.0)
    noise = torch.poisson(source * levels, generator=generator) / levels - source
    return (noise * scale).expand_as(image)


def apply_noise(image: torch.Tensor, stage: NoiseStage, rng: np.random.Generator,
                generator: torch.Generator) -> tuple[torch.Tensor, dict]:
    gray = bool(rng.random() < stage.gray_prob)
    if rng.random() < stage.gaussian_prob:
        sigma = rng.uniform(*stage.sigma_range)
        noise = gaussian_noise(image, sigma, gray, generator)
        params = {'op': 'noise', 'kind': 'gaussian', 'sigma': float(sigma), 'gray': gray}
    else:
        scale = rng.uniform(*stage.poisson_scale_range)
        noise = poisson_noise(image, scale, gray, generator)
        params = {'op': 'noise', 'kind': 'poisson', 'scale': float(scale), 'gray': gray}

    return torch.clamp(image + noise, 0.0, 1.0), params


#
# Compression
#
def quantization_tables(quality: int) -> tuple[np.ndarray, np.ndarray]:
    """ IJG quality scaling of the standard luminance and chrominance tables """
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    luminance = np.clip(np.floor((LUMINANCE_TABLE * scale + 50.0) / 100.0), 1, 255)
    chrominance = np.clip(np.floor((CHROMINANCE_TABLE * scale + 50.0) / 100.0), 1, 255)
    return luminance, chrominance


def rgb_to_ycbcr(rgb: np.ndarray) -> np.ndarray:
    """ Full-range JPEG YCbCr, values in [0, 255]. rgb is HWC in [0, 255]. """
    matrix = np.array([[0.299, 0.587, 0.114], [-0.168736, -0.331264, 0.5], [0.5, -0.418688, -0.081312]])
    ycbcr = rgb @ matrix.T
    ycbcr[..., 1:] += 128.0
    return ycbcr


def ycbcr_to_rgb(ycbcr: np.ndarray) -> np.ndarray:
    matrix = np.array([[1.0, 0.0, 1.402], [1.0, -0.344136, -0.714136], [1.0, 1.772, 0.0]])
    shifted = ycbcr.copy()
    shifted[..., 1:] -= 128.0
    return shifted @ matrix.T


def quantize_plane(plane: np.ndarray, table: np.ndarray) -> np.ndarray:
    """ Blockwise DCT quantization of a level-shifted plane whose dims are multiples of 8 """
    height, width = plane.shape
    blocks = plane.reshape(height // JPEG_BLOCK, JPEG_BLOCK, width // JPEG_BLOCK, JPEG_BLOCK).transpose(0, 2, 1, 3)
    coefficients = dctn(blocks, axes=(2, 3), norm='ortho')
    blocks = idctn(np.round(coefficients / table) * table, axes=(2, 3), norm='ortho')
    return blocks.transpose(0, 2, 1, 3).reshape(height, width)


def jpeg_like(image: torch.Tensor, quality: int) -> torch.Tensor:
    """
    Simulate JPEG compression: 8x8 block DCT quantization of the YCbCr planes, without chroma subsampling.
    @param image: NCHW RGB in [0, 1]
    @param quality: 1..100
    @return: Compressed NCHW image in [0, 1]
    """
    luminance, chrominance = quantization_tables(quality)
    batch, _, height, width = image.shape
    pad_h, pad_w = -height % JPEG_BLOCK, -width % JPEG_BLOCK
    output = []
    for rgb in image.detach().cpu().to(torch.float64).permute(0, 2, 3, 1).numpy():
        rgb = np.pad(rgb * 255.0, ((0, pad_h), (0, pad_w), (0, 0)), mode='edge')
        ycbcr = rgb_to_ycbcr(rgb) - 128.0
        planes = [quantize_plane(ycbcr[..., index], table)
                  for index, table in enumerate((luminance, chrominance, chrominance))]
        restored = ycbcr_to_rgb(np.stack(planes, axis=-1) + 128.0)[:height, :width]
        output.append(np.clip(restored / 255.0, 0.0, 1.0))

    return torch.from_numpy(np.stack(output)).permute(0, 3, 1, 2).to(dtype=image.dtype, device=image.device)


def apply_compression(image: torch.Tensor, stage: CompressionStage,
                      rng: np.random.Generator) -> tuple[torch.Tensor, dict]:
    quality = int(rng.integers(stage.quality_range[0], stage.quality_range[1] + 1))
    return jpeg_like(image, quality), {'op': 'compression', 'quality': quality}


#
# Pipeline
#
def degrade(hr: torch.Tensor, config: DegradationConfig, seed: Optional[int] = None) -> DegradeResult:
    """
    Degrade a high-resolution image to exactly 1/4 of its size.
    @param hr: CHW RGB tensor in [0, 1], dims divisible by 4
    @param config: DegradationConfig
    @param seed: Overrides config.seed when provided
    @return: DegradeResult with the CHW LR tensor in [0, 1] and the list of applied ops with their sampled parameters
    """
    if hr.dim() != 3:
        raise DegradationException(f'Expected a CHW image, got shape {tuple(hr.shape)}')
    try:
        check_image(hr.unsqueeze(0), config.final_scale)
    except ShapeException as ex:
        raise DegradationException(f'Cannot degrade: {ex}') from None

    rng = np.random.default_rng(config.seed if seed is None else seed)
    generator = torch.Generator().manual_seed(int(rng.integers(2 ** 62)))
    target = (hr.shape[-2] // config.final_scale, hr.shape[-1] // config.final_scale)

    record = []
    image = hr.unsqueeze(0).to(torch.float32)
    if not config.has_resize:
        image = snap(image, target)
        record.append({'op': 'snap', 'size': list(target)})

    def run_stage(stage: StageType, x: torch.Tensor) -> torch.Tensor:
        if isinstance(stage, BlurStage):
            x, params = apply_blur(x, stage, rng)
        elif isinstance(stage, ResizeStage):
            x, params = apply_resize(x, stage, rng, target)
        elif isinstance(stage, NoiseStage):
            x, params = apply_noise(x, stage, rng, generator)
        else:
            x, params = apply_compression(x, stage, rng)
        record.append(params)
        return x

    for stage in config.stages:
        image = run_stage(stage, image)

    if config.second_order:
        for stage in config.stages:
            if not isinstance(stage, ResizeStage):
                image = run_stage(stage, image)

    return DegradeResult(torch.clamp(image, 0.0, 1.0)[0], record)


class Pair(NamedTuple):
    hr: torch.Tensor
    lr: torch.Tensor
    record: dict[str, Any]


def make_pairs(source: Sequence[torch.Tensor], config: DegradationConfig, n: int, seed: int, crop_size: int = 512,
               out_dir: Optional[Union[str, Path]] = None) -> tuple[list[Pair], dict[str, Any]]:
    """
    Crop HR patches from an image source and degrade each one.
    @param source: Indexable collection of CHW unit-range images
    @param config: DegradationConfig
    @param n: Number of pairs
    @param seed: Dataset seed, per-pair seeds derive from it
    @param crop_size: HR crop size
    @param out_dir: If provided, write hr/NNNNNN.png, lr/NNNNNN.png and manifest.json under this directory
    @return: (pairs, manifest)
    """
    if n < 0:
        raise DegradationException(f'Number of pairs must be non-negative, got {n}')
    if crop_size % config.final_scale:
        raise DegradationException(f'crop_size {crop_size} is not divisible by {config.final_scale}')
    if n > 0 and len(source) == 0:
        raise DegradationException('Image source is empty')

    rng = np.random.default_rng(seed)
    pairs = []
    for index in range(n):
        source_index = int(rng.integers(len(source)))
        image = source[source_index]
        height, width = image.shape[-2:]
        if height < crop_size or width < crop_size:
            raise DegradationException(f'Source image {source_index} ({height}x{width}) is smaller than crop '
                                       f'size {crop_size}')
        top = int(rng.integers(height - crop_size + 1))
        left = int(rng.integers(width - crop_size + 1))
        pair_seed = int(rng.integers(2 ** 31))

        hr = image[:, top:top + crop_size, left:left + crop_size]
        lr, ops = degrade(hr, config, pair_seed)
        record = {
            'index': index,
            'hr': f'hr/{index:06d}.png',
            'lr': f'lr/{index:06d}.png',
            'source': source_index,
            'crop': {'top': top, 'left': left, 'size': crop_size},
            'seed': pair_seed,
            'ops': ops,
        }
        pairs.append(Pair(hr, lr, record))

    manifest = {
        'seed': seed,
        'count': n,
        'crop_size': crop_size,
        'config': config.model_dump(mode='json'),
        'pairs': [pair.record for pair in pairs],
    }
    if out_dir is not None:
        write_pairs(pairs, manifest, out_dir)

    return pairs, manifest


def write_pairs(pairs: Sequence[Pair], manifest: dict[str, Any], out_dir: Union[str, Path]) -> Path:
    root = Path(out_dir)
    for folder in ('hr', 'lr'):
        Path(root, folder).mkdir(parents=True, exist_ok=True)
    for pair in pairs:
        save_image(pair.hr, Path(root, pair.record['hr']))
        save_image(pair.lr, Path(root, pair.record['lr']))

    manifest_file = Path(root, 'manifest.json')
    with open(manifest_file, 'w') as write_f:
        write_f.write(json.dumps(manifest, indent=2, sort_keys=True))
    logger.info('Wrote %d pairs to %s', len(pairs), root)

    return manifest_file


def load_pairs(pairs_dir: Union[str, Path]) -> list[Pair]:
    """
    Load a pair dataset written by make_pairs.
    @param pairs_dir: Directory containing manifest.json
    @return: List of Pair with CHW unit-range tensors
    """
    manifest_file = Path(pairs_dir, 'manifest.json')
    try:
        with open(manifest_file) as read_f:
            manifest = json.load(read_f)
    except (OSError, json.JSONDecodeError) as ex:
        raise DegradationException(f'Unable to read pair manifest {manifest_file}: {ex}') from None

    pairs = []
    for record in manifest.get('pairs', []):
        try:
            pairs.append(Pair(load_image(Path(pairs_dir, record['hr'])), load_image(Path(pairs_dir, record['lr'])),
                              record))
        except (KeyError, DataException) as ex:
            raise DegradationException(f'Invalid pair record {record.get("index")}: {ex}') from None

    return pairs
