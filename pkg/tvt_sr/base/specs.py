"""
 TVT-SR - Transfer VAE Training toolset for one-step super-resolution

 tvt_sr.base.specs
 This module implements the declarative architecture specs from which networks and their cost audits derive
"""
from typing import Literal, Optional
from pydantic import PositiveInt, PositiveFloat, model_validator, field_validator
from .models_base import SpecModel


class VaeSpec(SpecModel):
    downsample_factor: Literal[4, 8]
    stage_channels: tuple[PositiveInt, ...]
    blocks_per_stage: PositiveInt = 2
    has_mid_attention: bool = False
    # 1x1 encoder to decoder connections at every stage resolution
    skip_connections: bool = False
    latent_channels: PositiveInt = 4
    base_resolution: PositiveInt = 512
    norm_groups: PositiveInt = 32

    @model_validator(mode='after')
    def factor_matches_stages(self) -> 'VaeSpec':
        if 2 ** (len(self.stage_channels) - 1) != self.downsample_factor:
            raise ValueError(f'downsample_factor {self.downsample_factor} requires '
                             f'{self.downsample_factor.bit_length()} stages, got {len(self.stage_channels)}')
        if self.base_resolution % self.downsample_factor:
            raise ValueError(f'base_resolution {self.base_resolution} is not divisible by {self.downsample_factor}')
        return self

    @property
    def num_stages(self) -> int:
        return len(self.stage_channels)

    @property
    def decoder_blocks_per_stage(self) -> int:
        # Decoder stages carry one extra ResBlock, as in the SD autoencoder
        return self.blocks_per_stage + 1


class UnetSpec(SpecModel):
    in_channels: PositiveInt = 4
    out_channels: PositiveInt = 4
    block_channels: tuple[PositiveInt, ...] = (320, 640, 1280, 1280)
    layers_per_block: PositiveInt = 2
    attention_levels: tuple[bool, ...] = (True, True, True, False)
    mid_attention: bool = True
    head_dim: PositiveInt = 64
    time_embed_dim: Optional[PositiveInt] = None
    context_dim: PositiveInt = 1024
    context_tokens: PositiveInt = 77
    norm_groups: PositiveInt = 32
    num_train_timesteps: PositiveInt = 1000
    toy_scale: bool = False

    @model_validator(mode='after')
    def consistent_levels(self) -> 'UnetSpec':
        if self.in_channels != self.out_channels:
            raise ValueError('in_channels and out_channels must match')
        if len(self.block_channels) < 2:
            raise ValueError('block_channels needs at least two resolution levels')
        if len(self.attention_levels) != len(self.block_channels):
            raise ValueError('attention_levels must have one entry per block_channels entry')
        for channels, has_attention in zip(self.block_channels, self.attention_levels):
            if has_attention and channels % self.head_dim:
                raise ValueError(f'Channel width {channels} is not divisible by head_dim {self.head_dim}')
        if self.mid_attention and self.block_channels[-1] % self.head_dim:
            raise ValueError(f'Channel width {self.block_channels[-1]} is not divisible by head_dim {self.head_dim}')
        return self

    @property
    def temb_dim(self) -> int:
        return self.time_embed_dim or 4 * self.block_channels[0]

    @property
    def num_levels(self) -> int:
        return len(self.block_channels)

    @property
    def input_multiple(self) -> int:
        """ Spatial dims of the UNet input must be multiples of this value """
        return 2 ** (self.num_levels - 1)


class LoraConfig(SpecModel):
    rank: PositiveInt = 4
    alpha: PositiveFloat = 4.0
    targets: tuple[str, ...] = ('to_q', 'to_k', 'to_v', 'to_out', 'proj_in', 'proj_out')

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


class CeUnetSpec(SpecModel):
    base: UnetSpec
    replica_source: Literal['first_and_last_layers'] = 'first_and_last_layers'
    replica_depth: PositiveInt = 1
    adapter_seed: int = 0
    lora: Optional[LoraConfig] = LoraConfig()

    @model_validator(mode='after')
    def depth_within_level(self) -> 'CeUnetSpec':
        if self.replica_depth > self.base.layers_per_block:
            raise ValueError(f'replica_depth {self.replica_depth} exceeds layers_per_block '
                             f'{self.base.layers_per_block}')
        return self

    @property
    def input_multiple(self) -> int:
        return 2 * self.base.input_multiple


class PipelineSpec(SpecModel):
    """
    End-to-end restoration pipeline: a VAE plus exactly one denoiser (plain UNet or CE-UNet)
    """
    vae: VaeSpec
    unet: Optional[UnetSpec] = None
    ce_unet: Optional[CeUnetSpec] = None
    output_resolution: PositiveInt = 512

    @model_validator(mode='after')
    def single_denoiser(self) -> 'PipelineSpec':
        if (self.unet is None) == (self.ce_unet is None):
            raise ValueError('Exactly one of "unet" or "ce_unet" must be provided')
        if self.output_resolution % self.vae.downsample_factor:
            raise ValueError(f'output_resolution is not divisible by {self.vae.downsample_factor}')
        denoiser_channels = self.unet.in_channels if self.unet is not None else self.ce_unet.base.in_channels
        if denoiser_channels != self.vae.latent_channels:
            raise ValueError(f'Denoiser expects {denoiser_channels} latent channels, '
                             f'VAE provides {self.vae.latent_channels}')
        return self

    @property
    def latent_resolution(self) -> int:
        return self.output_resolution // self.vae.downsample_factor


class Conv2dSpec(SpecModel):
    """ A single convolution, the smallest auditable unit """
    in_channels: PositiveInt
    out_channels: PositiveInt
    kernel_size: PositiveInt = 3
    stride: PositiveInt = 1
    bias: bool = True

    @field_validator('kernel_size')
    @classmethod
    def odd_kernel(cls, kernel_size: int) -> int:
        if kernel_size % 2 == 0:
            raise ValueError('kernel_size must be odd')
        return kernel_size
