"""
 TVT-SR - Transfer VAE Training toolset for one-step super-resolution

 tvt_sr.base.unet
 This module implements the conditional denoising UNet (SD 2.1-base layout) built from a UnetSpec
"""
import math
from typing import Optional, Union
import torch
import torch.nn.functional as F
from torch import nn
from .models_base import ShapeException, ModelException, seeded_reset
from .specs import UnetSpec
from .layers import ResnetBlock2D, Downsample2D, Upsample2D, group_norm


def timestep_embedding(timesteps: torch.Tensor, dim: int, max_period: int = 10000) -> torch.Tensor:
    """
    Sinusoidal timestep embedding, cosine half first.
    @param timesteps: 1-D tensor of N timesteps
    @param dim: Embedding dimension
    @return: (N, dim) tensor
    """
    half = dim // 2
    exponent = -math.log(max_period) * torch.arange(half, dtype=torch.float32, device=timesteps.device) / half
    args = timesteps[:, None].float() * torch.exp(exponent)[None, :]
    embedding = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        embedding = F.pad(embedding, (0, 1))

    return embedding


class TimestepEmbedding(nn.Module):
    def __init__(self, in_channels: int, time_embed_dim: int) -> None:
        super().__init__()
        self.linear_1 = nn.Linear(in_channels, time_embed_dim)
        self.linear_2 = nn.Linear(time_embed_dim, time_embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.linear_2(F.silu(self.linear_1(x)))


class Attention(nn.Module):
    """
    Multi-head attention over token sequences. Self-attention when context_dim is None, cross-attention otherwise.
    """
    def __init__(self, query_dim: int, heads: int, dim_head: int, context_dim: Optional[int] = None) -> None:
        super().__init__()
        inner_dim = heads * dim_head
        self.heads = heads
        self.dim_head = dim_head
        self.inner_dim = inner_dim
        self.to_q = nn.Linear(query_dim, inner_dim, bias=False)
        self.to_k = nn.Linear(context_dim or query_dim, inner_dim, bias=False)
        self.to_v = nn.Linear(context_dim or query_dim, inner_dim, bias=False)
        self.to_out = nn.Linear(inner_dim, query_dim)

    def forward(self, x: torch.Tensor, context: Optional[torch.Tensor] = None) -> torch.Tensor:
        context = x if context is None else context
        batch = x.shape[0]

        def split_heads(t: torch.Tensor) -> torch.Tensor:
            return t.view(batch, -1, self.heads, self.dim_head).transpose(1, 2)

        q, k, v = split_heads(self.to_q(x)), split_heads(self.to_k(context)), split_heads(self.to_v(context))
        weights = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.dim_head), dim=-1)
        h = (weights @ v).transpose(1, 2).reshape(batch, -1, self.inner_dim)

        return self.to_out(h)


class FeedForward(nn.Module):
    """ GEGLU feed-forward: dim -> 2*4*dim (value and gate) -> 4*dim -> dim """
    def __init__(self, dim: int, mult: int = 4) -> None:
        super().__init__()
        inner_dim = dim * mult
        self.proj = nn.Linear(dim, 2 * inner_dim)
        self.out = nn.Linear(inner_dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, gate = self.proj(x).chunk(2, dim=-1)
        return self.out(h * F.gelu(gate))


class BasicTransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, dim_head: int, context_dim: int) -> None:
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn1 = Attention(dim, heads, dim_head)
        self.norm2 = nn.LayerNorm(dim)
        self.attn2 = Attention(dim, heads, dim_head, context_dim=context_dim)
        self.norm3 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        x = x + self.attn1(self.norm1(x))
        x = x + self.attn2(self.norm2(x), context)
        return x + self.ff(self.norm3(x))


class Transformer2D(nn.Module):
    def __init__(self, channels: int, head_dim: int, context_dim: int, norm_groups: int = 32) -> None:
        super().__init__()
        self.norm = group_norm(channels, norm_groups)
        self.proj_in = nn.Linear(channels, channels)
        self.transformer_blocks = nn.ModuleList([
            BasicTransformerBlock(channels, channels // head_dim, head_dim, context_dim)
        ])
        self.proj_out = nn.Linear(channels, channels)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        batch, channels, height, width = x.shape
        h = self.norm(x).permute(0, 2, 3, 1).reshape(batch, height * width, channels)
        h = self.proj_in(h)
        for block in self.transformer_blocks:
            h = block(h, context)
        h = self.proj_out(h).reshape(batch, height, width, channels).permute(0, 3, 1, 2)

        return x + h


class UnetUnit(nn.Module):
    """ One resnet followed by an optional transformer, the granularity at which CE-UNet replicas are copied """
    def __init__(self, in_channels: int, out_channels: int, spec: UnetSpec, has_attention: bool) -> None:
        super().__init__()
        self.resnet = ResnetBlock2D(in_channels, out_channels, temb_channels=spec.temb_dim,
                                    norm_groups=spec.norm_groups)
        self.attention = (
            Transformer2D(out_channels, spec.head_dim, spec.context_dim, spec.norm_groups) if has_attention else None
        )

    def forward(self, x: torch.Tensor, temb: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        x = self.resnet(x, temb)
        if self.attention is not None:
            x = self.attention(x, context)
        return x


class DownLevel(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, spec: UnetSpec, has_attention: bool,
                 add_downsample: bool) -> None:
        super().__init__()
        self.units = nn.ModuleList([
            UnetUnit(in_channels if index == 0 else out_channels, out_channels, spec, has_attention)
            for index in range(spec.layers_per_block)
        ])
        self.downsample = Downsample2D(out_channels) if add_downsample else None

    def forward(self, x: torch.Tensor, temb: torch.Tensor,
                context: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        skips = []
        for unit in self.units:
            x = unit(x, temb, context)
            skips.append(x)
        if self.downsample is not None:
            x = self.downsample(x)
            skips.append(x)

        return x, skips


class UpLevel(nn.Module):
    def __init__(self, prev_channels: int, out_channels: int, skip_in_channels: int, spec: UnetSpec,
                 has_attention: bool, add_upsample: bool) -> None:
        super().__init__()
        num_units = spec.layers_per_block + 1
        self.units = nn.ModuleList()
        for index in range(num_units):
            skip_channels = skip_in_channels if index == num_units - 1 else out_channels
            unit_in_channels = prev_channels if index == 0 else out_channels
            self.units.append(UnetUnit(unit_in_channels + skip_channels, out_channels, spec, has_attention))
        self.upsample = Upsample2D(out_channels) if add_upsample else None

    def forward(self, x: torch.Tensor, skips: list[torch.Tensor], temb: torch.Tensor,
                context: torch.Tensor) -> torch.Tensor:
        for unit in self.units:
            x = unit(torch.cat([x, skips.pop()], dim=1), temb, context)
        if self.upsample is not None:
            x = self.upsample(x)

        return x


class MidBlock(nn.Module):
    def __init__(self, channels: int, spec: UnetSpec) -> None:
        super().__init__()
        self.resnets = nn.ModuleList([
            ResnetBlock2D(channels, channels, temb_channels=spec.temb_dim, norm_groups=spec.norm_groups),
            ResnetBlock2D(channels, channels, temb_channels=spec.temb_dim, norm_groups=spec.norm_groups),
        ])
        self.attention = (
            Transformer2D(channels, spec.head_dim, spec.context_dim, spec.norm_groups) if spec.mid_attention else None
        )

    def forward(self, x: torch.Tensor, temb: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        x = self.resnets[0](x, temb)
        if self.attention is not None:
            x = self.attention(x, context)
        return self.resnets[1](x, temb)


class UnetModel(nn.Module):
    """
    Conditional ε-prediction UNet. Inputs are NCHW latents, integer timesteps and a (N, tokens, context_dim) context.
    """
    def __init__(self, spec: UnetSpec) -> None:
        super().__init__()
        self.spec = spec
        channels = spec.block_channels
        self.conv_in = nn.Conv2d(spec.in_channels, channels[0], kernel_size=3, padding=1)
        self.time_embedding = TimestepEmbedding(channels[0], spec.temb_dim)

        self.down_blocks = nn.ModuleList()
        in_channels = channels[0]
        for index, (out_channels, has_attention) in enumerate(zip(channels, spec.attention_levels)):
            self.down_blocks.append(
                DownLevel(in_channels, out_channels, spec, has_attention, add_downsample=index < len(channels) - 1)
            )
            in_channels = out_channels

        self.mid_block = MidBlock(channels[-1], spec)

        reversed_channels = tuple(reversed(channels))
        reversed_attention = tuple(reversed(spec.attention_levels))
        self.up_blocks = nn.ModuleList()
        out_channels = reversed_channels[0]
        for index, has_attention in enumerate(reversed_attention):
            prev_channels = out_channels
            out_channels = reversed_channels[index]
            skip_in_channels = reversed_channels[min(index + 1, len(channels) - 1)]
            self.up_blocks.append(
                UpLevel(prev_channels, out_channels, skip_in_channels, spec, has_attention,
                        add_upsample=index < len(channels) - 1)
            )

        self.conv_norm_out = group_norm(channels[0], spec.norm_groups)
        self.conv_out = nn.Conv2d(channels[0], spec.out_channels, kernel_size=3, padding=1)

    def timesteps_tensor(self, timesteps: Union[int, torch.Tensor], batch: int, device) -> torch.Tensor:
        timesteps = torch.as_tensor(timesteps, device=device)
        if timesteps.dim() == 0:
            timesteps = timesteps.expand(batch)
        if timesteps.dtype.is_floating_point or timesteps.shape != (batch,):
            raise ShapeException(f'Expected {batch} integer timesteps, got {tuple(timesteps.shape)} {timesteps.dtype}')
        if bool((timesteps < 0).any()) or bool((timesteps >= self.spec.num_train_timesteps).any()):
            raise ModelException(f'Timesteps must be within [0, {self.spec.num_train_timesteps})')
        return timesteps

    def embed_time(self, timesteps: torch.Tensor, dtype: torch.dtype) -> torch.Tensor:
        return self.time_embedding(timestep_embedding(timesteps, self.spec.block_channels[0]).to(dtype))

    def check_input(self, sample: torch.Tensor, context: torch.Tensor) -> None:
        if sample.dim() != 4 or sample.shape[1] != self.spec.in_channels:
            raise ShapeException(f'Expected a latent with {self.spec.in_channels} channels, '
                                 f'got shape {tuple(sample.shape)}')
        multiple = self.spec.input_multiple
        if sample.shape[-2] % multiple or sample.shape[-1] % multiple:
            raise ShapeException(f'Latent dims {tuple(sample.shape[-2:])} are not multiples of {multiple}')
        if context.dim() != 3 or context.shape[-1] != self.spec.context_dim:
            raise ShapeException(f'Expected a context of width {self.spec.context_dim}, got {tuple(context.shape)}')

    def forward(self, sample: torch.Tensor, timesteps: Union[int, torch.Tensor], context: torch.Tensor,
                emb: Optional[torch.Tensor] = None) -> torch.Tensor:
        """
        @param sample: NCHW latent
        @param timesteps: int or (N,) integer tensor
        @param context: (N, tokens, context_dim) conditioning sequence
        @param emb: Optional precomputed time embedding, skips the time MLP when provided
        @return: ε-prediction with the same shape as sample
        """
        self.check_input(sample, context)
        if emb is None:
            emb = self.embed_time(self.timesteps_tensor(timesteps, sample.shape[0], sample.device), sample.dtype)

        h = self.conv_in(sample)
        skips = [h]
        for down_block in self.down_blocks:
            h, down_skips = down_block(h, emb, context)
            skips.extend(down_skips)

        h = self.mid_block(h, emb, context)

        for up_block in self.up_blocks:
            h = up_block(h, skips, emb, context)

        return self.conv_out(F.silu(self.conv_norm_out(h)))


def build_unet(spec: UnetSpec, seed: Optional[int] = None) -> UnetModel:
    model = UnetModel(spec)
    if seed is not None:
        seeded_reset(model, torch.Generator().manual_seed(seed))
    return model
