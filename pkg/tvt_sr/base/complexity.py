"""
 TVT-SR - Transfer VAE Training toolset for one-step super-resolution

 tvt_sr.base.complexity
 This module implements the static parameter and FLOPs audit of architecture specs, and a forward-hook counter used
 to verify it against instantiated networks
"""
from functools import singledispatch
from typing import Any, NamedTuple, Optional, Union
from collections.abc import Iterable, Iterator
import torch
from torch import nn
from pydantic import BaseModel, ConfigDict
from .specs import VaeSpec, UnetSpec, CeUnetSpec, LoraConfig, PipelineSpec, Conv2dSpec
from .layers import SpatialAttention
from .lora import LoraLinear
from .unet import Attention
from .catalog import preset
from .presets import vae_d8, vae_d4, unet_sd21, ce_unet_sd21

Resolution = Union[int, tuple[int, int]]


class LayerCost(NamedTuple):
    name: str
    kind: str
    params: int
    macs: int
    attention_macs: int = 0


class CostReport:
    """
    Per-layer cost breakdown for one forward pass of a single sample.
    macs counts convolution and linear multiply-accumulates, attention_macs the QKᵀ logits and value mixing.
    """
    def __init__(self, layers: Iterable[LayerCost] = ()) -> None:
        self.layers = list(layers)

    def __iter__(self) -> Iterator[LayerCost]:
        return iter(self.layers)

    def __len__(self) -> int:
        return len(self.layers)

    def __add__(self, other: 'CostReport') -> 'CostReport':
        return CostReport(self.layers + other.layers)

    @property
    def params(self) -> int:
        return sum(layer.params for layer in self.layers)

    @property
    def macs(self) -> int:
        return sum(layer.macs for layer in self.layers)

    @property
    def attention_macs(self) -> int:
        return sum(layer.attention_macs for layer in self.layers)

    @property
    def total_macs(self) -> int:
        return self.macs + self.attention_macs

    @property
    def flops(self) -> int:
        """ FLOPs = 2 x multiply-accumulates, attention included """
        return 2 * self.total_macs

    def prefixed(self, prefix: str) -> 'CostReport':
        return CostReport(layer._replace(name=f'{prefix}{layer.name}') for layer in self.layers)

    def by_kind(self) -> dict[str, tuple[int, int]]:
        totals = {}
        for layer in self.layers:
            params, macs = totals.get(layer.kind, (0, 0))
            totals[layer.kind] = (params + layer.params, macs + layer.macs + layer.attention_macs)
        return totals

    def summary(self) -> dict[str, Any]:
        return {
            'params': self.params,
            'macs': self.macs,
            'attention_macs': self.attention_macs,
            'flops': self.flops,
            'by_kind': {kind: {'params': params, 'macs': macs} for kind, (params, macs) in self.by_kind().items()},
        }


class CostBuilder:
    """ Accumulates layer costs while walking a spec in module order """
    def __init__(self, lora: Optional[LoraConfig] = None) -> None:
        self.layers: list[LayerCost] = []
        self.lora = lora

    def report(self) -> CostReport:
        return CostReport(self.layers)

    def conv(self, name: str, in_channels: int, out_channels: int, kernel: int, out_hw: tuple[int, int],
             bias: bool = True) -> None:
        weights = kernel * kernel * in_channels * out_channels
        self.layers.append(
            LayerCost(name, 'conv', weights + (out_channels if bias else 0), weights * out_hw[0] * out_hw[1])
        )

    def linear(self, name: str, in_features: int, out_features: int, tokens: int, bias: bool = True) -> None:
        if self.lora is not None and name.split('.')[-1] in self.lora.targets:
            lora_params = self.lora.rank * (in_features + out_features)
            self.layers.append(LayerCost(name, 'lora', lora_params, tokens * lora_params))
            name = f'{name}.base'
        weights = in_features * out_features
        self.layers.append(
            LayerCost(name, 'linear', weights + (out_features if bias else 0), weights * tokens)
        )

    def norm(self, name: str, channels: int) -> None:
        self.layers.append(LayerCost(name, 'norm', 2 * channels, 0))

    def attention(self, name: str, attention_macs: int) -> None:
        self.layers.append(LayerCost(name, 'attention', 0, 0, attention_macs))

    def embedding(self, name: str, params: int) -> None:
        self.layers.append(LayerCost(name, 'embedding', params, 0))


def as_hw(resolution: Resolution) -> tuple[int, int]:
    return (resolution, resolution) if isinstance(resolution, int) else tuple(resolution)


def halve(hw: tuple[int, int]) -> tuple[int, int]:
    # Stride-2 3x3 conv, either padded by one on each side or by one on the right/bottom
    return (hw[0] - 1) // 2 + 1, (hw[1] - 1) // 2 + 1


def double(hw: tuple[int, int]) -> tuple[int, int]:
    return 2 * hw[0], 2 * hw[1]


#
# Shared blocks
#
def resnet_cost(builder: CostBuilder, name: str, in_channels: int, out_channels: int, hw: tuple[int, int],
                temb_channels: Optional[int] = None) -> None:
    builder.norm(f'{name}.norm1', in_channels)
    builder.conv(f'{name}.conv1', in_channels, out_channels, 3, hw)
    if temb_channels:
        builder.linear(f'{name}.time_emb_proj', temb_channels, out_channels, 1)
    builder.norm(f'{name}.norm2', out_channels)
    builder.conv(f'{name}.conv2', out_channels, out_channels, 3, hw)
    if in_channels != out_channels:
        builder.conv(f'{name}.conv_shortcut', in_channels, out_channels, 1, hw)


def spatial_attention_cost(builder: CostBuilder, name: str, channels: int, hw: tuple[int, int]) -> None:
    tokens = hw[0] * hw[1]
    builder.norm(f'{name}.group_norm', channels)
    for projection in ('to_q', 'to_k', 'to_v', 'to_out'):
        builder.linear(f'{name}.{projection}', channels, channels, tokens)
    builder.attention(name, 2 * tokens * tokens * channels)


#
# VAE
#
def vae_mid_cost(builder: CostBuilder, name: str, channels: int, hw: tuple[int, int]) -> None:
    resnet_cost(builder, f'{name}.resnets.0', channels, channels, hw)
    spatial_attention_cost(builder, f'{name}.attention', channels, hw)
    resnet_cost(builder, f'{name}.resnets.1', channels, channels, hw)


def encoder_cost(builder: CostBuilder, spec: VaeSpec, hw: tuple[int, int], prefix: str = 'encoder') -> None:
    channels = spec.stage_channels
    builder.conv(f'{prefix}.conv_in', 3, channels[0], 3, hw)
    in_channels = channels[0]
    for index, out_channels in enumerate(channels):
        for block in range(spec.blocks_per_stage):
            resnet_cost(builder, f'{prefix}.down_blocks.{index}.resnets.{block}',
                        in_channels if block == 0 else out_channels, out_channels, hw)
        if index < len(channels) - 1:
            hw = halve(hw)
            builder.conv(f'{prefix}.down_blocks.{index}.downsample.conv', out_channels, out_channels, 3, hw)
        in_channels = out_channels

    if spec.has_mid_attention:
        vae_mid_cost(builder, f'{prefix}.mid_block', channels[-1], hw)
    builder.norm(f'{prefix}.conv_norm_out', channels[-1])
    builder.conv(f'{prefix}.conv_out', channels[-1], 2 * spec.latent_channels, 3, hw)
    builder.conv(f'{prefix}.quant_conv', 2 * spec.latent_channels, 2 * spec.latent_channels, 1, hw)


def decoder_cost(builder: CostBuilder, spec: VaeSpec, hw: tuple[int, int], prefix: str = 'decoder') -> None:
    """ hw is the latent resolution """
    channels = tuple(reversed(spec.stage_channels))
    builder.conv(f'{prefix}.post_quant_conv', spec.latent_channels, spec.latent_channels, 1, hw)
    builder.conv(f'{prefix}.conv_in', spec.latent_channels, channels[0], 3, hw)
    if spec.has_mid_attention:
        vae_mid_cost(builder, f'{prefix}.mid_block', channels[0], hw)

    in_channels = channels[0]
    for index, out_channels in enumerate(channels):
        if spec.skip_connections:
            builder.conv(f'{prefix}.skip_convs.{index}', out_channels, in_channels, 1, hw)
        for block in range(spec.decoder_blocks_per_stage):
            resnet_cost(builder, f'{prefix}.up_blocks.{index}.resnets.{block}',
                        in_channels if block == 0 else out_channels, out_channels, hw)
        if index < len(channels) - 1:
            hw = double(hw)
            builder.conv(f'{prefix}.up_blocks.{index}.upsample.conv', out_channels, out_channels, 3, hw)
        in_channels = out_channels

    builder.norm(f'{prefix}.conv_norm_out', channels[-1])
    builder.conv(f'{prefix}.conv_out', channels[-1], 3, 3, hw)


#
# UNet
#
def transformer_cost(builder: CostBuilder, name: str, channels: int, spec: UnetSpec, hw: tuple[int, int]) -> None:
    tokens = hw[0] * hw[1]
    context_tokens = spec.context_tokens
    block = f'{name}.transformer_blocks.0'

    builder.norm(f'{name}.norm', channels)
    builder.linear(f'{name}.proj_in', channels, channels, tokens)
    builder.norm(f'{block}.norm1', channels)
    for projection in ('to_q', 'to_k', 'to_v'):
        builder.linear(f'{block}.attn1.{projection}', channels, channels, tokens, bias=False)
    builder.linear(f'{block}.attn1.to_out', channels, channels, tokens)
    builder.attention(f'{block}.attn1', 2 * tokens * tokens * channels)
    builder.norm(f'{block}.norm2', channels)
    builder.linear(f'{block}.attn2.to_q', channels, channels, tokens, bias=False)
    builder.linear(f'{block}.attn2.to_k', spec.context_dim, channels, context_tokens, bias=False)
    builder.linear(f'{block}.attn2.to_v', spec.context_dim, channels, context_tokens, bias=False)
    builder.linear(f'{block}.attn2.to_out', channels, channels, tokens)
    builder.attention(f'{block}.attn2', 2 * tokens * context_tokens * channels)
    builder.norm(f'{block}.norm3', channels)
    builder.linear(f'{block}.ff.proj', channels, 8 * channels, tokens)
    builder.linear(f'{block}.ff.out', 4 * channels, channels, tokens)
    builder.linear(f'{name}.proj_out', channels, channels, tokens)


def unit_cost(builder: CostBuilder, name: str, in_channels: int, out_channels: int, spec: UnetSpec,
              has_attention: bool, hw: tuple[int, int]) -> None:
    resnet_cost(builder, f'{name}.resnet', in_channels, out_channels, hw, spec.temb_dim)
    if has_attention:
        transformer_cost(builder, f'{name}.attention', out_channels, spec, hw)


def up_unit_channels(spec: UnetSpec, level: int) -> list[tuple[int, int]]:
    """ (input channels, output channels) of every unit of up level <level>, skip concatenation included """
    channels = spec.block_channels
    reversed_channels = tuple(reversed(channels))
    prev_channels = reversed_channels[max(level - 1, 0)]
    out_channels = reversed_channels[level]
    skip_in_channels = reversed_channels[min(level + 1, len(channels) - 1)]
    num_units = spec.layers_per_block + 1

    units = []
    for index in range(num_units):
        skip_channels = skip_in_channels if index == num_units - 1 else out_channels
        unit_in_channels = prev_channels if index == 0 else out_channels
        units.append((unit_in_channels + skip_channels, out_channels))
    return units


def unet_cost(builder: CostBuilder, spec: UnetSpec, hw: tuple[int, int], prefix: str = '') -> None:
    """ hw is the latent resolution """
    channels = spec.block_channels
    builder.conv(f'{prefix}conv_in', spec.in_channels, channels[0], 3, hw)
    builder.linear(f'{prefix}time_embedding.linear_1', channels[0], spec.temb_dim, 1)
    builder.linear(f'{prefix}time_embedding.linear_2', spec.temb_dim, spec.temb_dim, 1)

    in_channels = channels[0]
    for level, (out_channels, has_attention) in enumerate(zip(channels, spec.attention_levels)):
        for index in range(spec.layers_per_block):
            unit_in = in_channels if index == 0 else out_channels
            unit_cost(builder, f'{prefix}down_blocks.{level}.units.{index}', unit_in, out_channels, spec, has_attention,
                      hw)
        if level < len(channels) - 1:
            hw = halve(hw)
            builder.conv(f'{prefix}down_blocks.{level}.downsample.conv', out_channels, out_channels, 3, hw)
        in_channels = out_channels

    mid = f'{prefix}mid_block'
    resnet_cost(builder, f'{mid}.resnets.0', channels[-1], channels[-1], hw, spec.temb_dim)
    if spec.mid_attention:
        transformer_cost(builder, f'{mid}.attention', channels[-1], spec, hw)
    resnet_cost(builder, f'{mid}.resnets.1', channels[-1], channels[-1], hw, spec.temb_dim)

    reversed_attention = tuple(reversed(spec.attention_levels))
    for level, has_attention in enumerate(reversed_attention):
        for index, (unit_in, unit_out) in enumerate(up_unit_channels(spec, level)):
            unit_cost(builder, f'{prefix}up_blocks.{level}.units.{index}', unit_in, unit_out, spec, has_attention, hw)
        if level < len(channels) - 1:
            hw = double(hw)
            out_channels = up_unit_channels(spec, level)[-1][1]
            builder.conv(f'{prefix}up_blocks.{level}.upsample.conv', out_channels, out_channels, 3, hw)

    builder.norm(f'{prefix}conv_norm_out', channels[0])
    builder.conv(f'{prefix}conv_out', channels[0], spec.out_channels, 3, hw)


def ce_unet_cost(builder: CostBuilder, spec: CeUnetSpec, hw: tuple[int, int]) -> None:
    """ hw is the f=4 latent resolution consumed by the replicas """
    base = spec.base
    depth = spec.replica_depth
    width = base.block_channels[0]
    first_level_attention = base.attention_levels[0]

    builder.conv('front.conv_in', base.in_channels, width, 3, hw)
    for index in range(depth):
        unit_cost(builder, f'front.units.{index}', width, width, base, first_level_attention, hw)

    builder.conv('down_adapter', width, base.in_channels, 3, halve(hw))

    # Only the base carries LoRA
    base_builder = CostBuilder(spec.lora)
    unet_cost(base_builder, base, halve(hw), prefix='base.')
    builder.layers.extend(base_builder.layers)

    last_level = base.num_levels - 1
    back_units = up_unit_channels(base, last_level)[-(depth + 1):]
    hidden = back_units[0][0] - width
    builder.conv('up_adapter.conv', base.out_channels, hidden, 3, hw)
    last_level_attention = base.attention_levels[0]
    for index, (unit_in, unit_out) in enumerate(back_units):
        unit_cost(builder, f'back.units.{index}', unit_in, unit_out, base, last_level_attention, hw)
    builder.norm('back.conv_norm_out', width)
    builder.conv('back.conv_out', width, base.out_channels, 3, hw)


#
# Audit entry points
#
@singledispatch
def audit(spec, resolution: Optional[Resolution] = None) -> CostReport:
    """
    Static cost audit of an architecture spec.
    @param spec: VaeSpec, UnetSpec, CeUnetSpec, PipelineSpec or Conv2dSpec
    @param resolution: Input resolution: image resolution for VAEs (round trip), latent resolution for denoisers,
                       input resolution for a single conv. Spec defaults apply when None.
    @return: CostReport
    """
    raise TypeError(f'Cannot audit objects of type {type(spec).__name__}')


@audit.register
def _(spec: Conv2dSpec, resolution: Optional[Resolution] = None) -> CostReport:
    height, width = as_hw(resolution or 1)
    out_hw = ((height - 1) // spec.stride + 1, (width - 1) // spec.stride + 1)
    builder = CostBuilder()
    builder.conv('conv', spec.in_channels, spec.out_channels, spec.kernel_size, out_hw, spec.bias)
    return builder.report()


@audit.register
def _(spec: VaeSpec, resolution: Optional[Resolution] = None) -> CostReport:
    return vae_cost(spec, resolution)


@audit.register
def _(spec: UnetSpec, resolution: Optional[Resolution] = None) -> CostReport:
    builder = CostBuilder()
    unet_cost(builder, spec, as_hw(resolution or 64))
    return builder.report()


@audit.register
def _(spec: CeUnetSpec, resolution: Optional[Resolution] = None) -> CostReport:
    builder = CostBuilder()
    ce_unet_cost(builder, spec, as_hw(resolution or 128))
    return builder.report()


@audit.register
def _(spec: PipelineSpec, resolution: Optional[Resolution] = None) -> CostReport:
    return pipeline_cost(spec)


def vae_cost(spec: VaeSpec, resolution: Optional[Resolution] = None, part: str = 'roundtrip') -> CostReport:
    """
    @param spec: VaeSpec
    @param resolution: Image resolution, defaults to spec.base_resolution
    @param part: 'encoder', 'decoder' or 'roundtrip'
    """
    if part not in ('encoder', 'decoder', 'roundtrip'):
        raise ValueError(f'Invalid VAE part: {part}')

    hw = as_hw(resolution or spec.base_resolution)
    latent_hw = (hw[0] // spec.downsample_factor, hw[1] // spec.downsample_factor)
    builder = CostBuilder()
    if part in ('encoder', 'roundtrip'):
        encoder_cost(builder, spec, hw)
    if part in ('decoder', 'roundtrip'):
        decoder_cost(builder, spec, latent_hw)

    return builder.report()


def conditioning_cost(spec: UnetSpec) -> CostReport:
    builder = CostBuilder()
    builder.embedding('embedding', spec.context_tokens * spec.context_dim)
    return builder.report()


def pipeline_cost(spec: PipelineSpec) -> CostReport:
    """
    End-to-end cost of one restoration at spec.output_resolution: VAE encoder, denoiser at the latent resolution,
    VAE decoder and the conditioning stub.
    """
    latent = spec.latent_resolution
    unet_spec = spec.unet if spec.unet is not None else spec.ce_unet.base
    denoiser = audit(spec.unet if spec.unet is not None else spec.ce_unet, latent)

    return (
        vae_cost(spec.vae, spec.output_resolution, 'encoder').prefixed('vae.')
        + denoiser.prefixed('unet.')
        + vae_cost(spec.vae, spec.output_resolution, 'decoder').prefixed('vae.')
        + conditioning_cost(unet_spec).prefixed('conditioning.')
    )


def count_params(spec) -> int:
    return audit(spec).params


def count_flops(spec, resolution: Optional[Resolution] = None) -> int:
    """ FLOPs (2 x MACs, attention included) of one forward pass at resolution """
    return audit(spec, resolution).flops


class ReductionReport(NamedTuple):
    params_pct: float
    macs_pct: float
    flops_pct: float


def reduction_pct(before: int, after: int) -> float:
    return (1.0 - after / before) * 100.0 if before else 0.0


def reduction_report(a: CostReport, b: CostReport) -> ReductionReport:
    """ Percentage reduction going from a to b: (1 - b/a)·100 """
    return ReductionReport(reduction_pct(a.params, b.params), reduction_pct(a.macs, b.macs),
                           reduction_pct(a.flops, b.flops))


#
# Published figures cross-check
#
class CrossCheckRow(BaseModel):
    model_config = ConfigDict(extra='forbid')

    item: str
    metric: str
    published: float
    audited: float

    @property
    def delta_pct(self) -> float:
        return (self.audited / self.published - 1.0) * 100.0


def published_crosscheck() -> list[CrossCheckRow]:
    """
    Audited figures next to the published ones. Published FLOPs track layer-profiler MAC counts, so they are compared
    against conv/linear MACs (G or T units). Reductions are percentages.
    """
    d8 = audit(vae_d8(), 512)
    d4 = audit(vae_d4(), 512)
    base_128 = audit(unet_sd21(), 128)
    ce_128 = audit(ce_unet_sd21(), 128)
    vae_reduction = reduction_report(d8, d4)

    rows = [
        CrossCheckRow(item='VAE-D8', metric='params (M)', published=83.7, audited=d8.params / 1e6),
        CrossCheckRow(item='VAE-D4', metric='params (M)', published=15.2, audited=d4.params / 1e6),
        CrossCheckRow(item='VAE-D8 round trip 512', metric='MACs (T)', published=1.8, audited=d8.macs / 1e12),
        CrossCheckRow(item='VAE-D4 round trip 512', metric='MACs (T)', published=1.1, audited=d4.macs / 1e12),
        CrossCheckRow(item='VAE-D8 -> VAE-D4', metric='params reduction (%)', published=81.89,
                      audited=vae_reduction.params_pct),
        CrossCheckRow(item='VAE-D8 -> VAE-D4', metric='MACs reduction (%)', published=38.89,
                      audited=vae_reduction.macs_pct),
        CrossCheckRow(item='UNet at 128x128 latent', metric='MACs (T)', published=1.35, audited=base_128.macs / 1e12),
        CrossCheckRow(item='CE-UNet at 128x128 latent', metric='MACs (T)', published=0.73,
                      audited=ce_128.macs / 1e12),
        CrossCheckRow(item='UNet -> CE-UNet', metric='MACs reduction (%)', published=51.0,
                      audited=reduction_pct(base_128.macs, ce_128.macs)),
    ]
    for tag, published in (('tvt', 1.97), ('s1', 2.27), ('s2', 2.27), ('s3', 2.27), ('s4', 2.59), ('s5', 2.00),
                           ('v1-ce', 3.02), ('v2-ce', 2.40)):
        rows.append(CrossCheckRow(item=f'pipeline {tag}', metric='MACs (T)', published=published,
                                  audited=audit(preset(tag)).macs / 1e12))

    return rows


#
# Instrumented counting
#
class MacCounter:
    """
    Forward-hook counter of the multiply-accumulates actually executed by conv, linear, LoRA and attention modules.
    Counts are totals over the batch of every forward call made while the counter is active.

    with MacCounter(model) as counter:
        model(x)
    counter.macs, counter.attention_macs
    """
    def __init__(self, model: nn.Module) -> None:
        self.model = model
        self.counts: dict[str, LayerCost] = {}
        self.handles = []

    def __enter__(self) -> 'MacCounter':
        for name, module in self.model.named_modules():
            hook = self.hook_for(module)
            if hook is not None:
                self.handles.append(module.register_forward_hook(self.recorder(name, hook)))
        return self

    def __exit__(self, exc_type, exc_val, exc_tb) -> None:
        for handle in self.handles:
            handle.remove()
        self.handles.clear()

    @staticmethod
    def hook_for(module: nn.Module):
        if isinstance(module, nn.Conv2d):
            return conv_macs
        if isinstance(module, nn.Linear):
            return linear_macs
        if isinstance(module, LoraLinear):
            return lora_macs
        if isinstance(module, (SpatialAttention, Attention)):
            return attention_macs
        return None

    def recorder(self, name: str, hook):
        def record(module: nn.Module, inputs: tuple, output: torch.Tensor) -> None:
            kind, macs, attn = hook(module, inputs, output)
            previous = self.counts.get(name, LayerCost(name, kind, 0, 0, 0))
            self.counts[name] = previous._replace(macs=previous.macs + macs,
                                                  attention_macs=previous.attention_macs + attn)
        return record

    @property
    def macs(self) -> int:
        return sum(layer.macs for layer in self.counts.values())

    @property
    def attention_macs(self) -> int:
        return sum(layer.attention_macs for layer in self.counts.values())

    @property
    def flops(self) -> int:
        return 2 * (self.macs + self.attention_macs)


def conv_macs(module: nn.Conv2d, inputs: tuple, output: torch.Tensor) -> tuple[str, int, int]:
    return 'conv', module.weight.numel() * output.shape[0] * output.shape[-2] * output.shape[-1], 0


def linear_macs(module: nn.Linear, inputs: tuple, output: torch.Tensor) -> tuple[str, int, int]:
    tokens = inputs[0].numel() // module.in_features
    return 'linear', tokens * module.in_features * module.out_features, 0


def lora_macs(module: LoraLinear, inputs: tuple, output: torch.Tensor) -> tuple[str, int, int]:
    tokens = inputs[0].numel() // module.in_features
    return 'lora', tokens * module.rank * (module.in_features + module.out_features), 0


def attention_macs(module: nn.Module, inputs: tuple, output: torch.Tensor) -> tuple[str, int, int]:
    if isinstance(module, SpatialAttention):
        batch, channels, height, width = inputs[0].shape
        tokens = height * width
        return 'attention', 0, batch * 2 * tokens * tokens * channels

    x = inputs[0]
    context = inputs[1] if len(inputs) > 1 and inputs[1] is not None else x
    return 'attention', 0, x.shape[0] * 2 * x.shape[1] * context.shape[1] * module.inner_dim
