"""
 TVT-SR - Transfer VAE Training toolset for one-step super-resolution

 tvt_sr.base.layers
 This module implements the convolutional building blocks shared by the VAE and the denoising UNet
"""
import math
from typing import Optional
import torch
import torch.nn.functional as F
from torch import nn


def group_count(channels: int, norm_groups: int = 32) -> int:
    """ Number of GroupNorm groups for a channel width, capped so that groups always divide channels """
    return math.gcd(norm_groups, channels)


def group_norm(channels: int, norm_groups: int = 32) -> nn.GroupNorm:
    return nn.GroupNorm(num_groups=group_count(channels, norm_groups), num_channels=channels, eps=1e-6, affine=True)


class ResnetBlock2D(nn.Module):
    def __init__(self, in_channels: int, out_channels: Optional[int] = None, temb_channels: Optional[int] = None,
                 norm_groups: int = 32) -> None:
        super().__init__()
        out_channels = out_channels or in_channels
        self.in_channels = in_channels
        self.out_channels = out_channels

        self.norm1 = group_norm(in_channels, norm_groups)
        self.conv1 = nn.Conv2d(in_channels, out_channels, kernel_size=3, stride=1, padding=1)
        self.time_emb_proj = nn.Linear(temb_channels, out_channels) if temb_channels else None
        self.norm2 = group_norm(out_channels, norm_groups)
        self.conv2 = nn.Conv2d(out_channels, out_channels, kernel_size=3, stride=1, padding=1)
        self.conv_shortcut = (
            nn.Conv2d(in_channels, out_channels, kernel_size=1, stride=1, padding=0)
            if in_channels != out_channels else None
        )

    def forward(self, x: torch.Tensor, temb: Optional[torch.Tensor] = None) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        if self.time_emb_proj is not None and temb is not None:
            h = h + self.time_emb_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))

        if self.conv_shortcut is not None:
            x = self.conv_shortcut(x)

        return x + h


class Downsample2D(nn.Module):
    """
    Stride-2 3x3 convolution. With asymmetric padding (SD autoencoder convention) the input is padded by one pixel
    on the right and bottom only, otherwise a symmetric one-pixel padding is used (SD UNet convention).
    """
    def __init__(self, channels: int, out_channels: Optional[int] = None, asymmetric_padding: bool = False) -> None:
        super().__init__()
        self.asymmetric_padding = asymmetric_padding
        self.conv = nn.Conv2d(channels, out_channels or channels, kernel_size=3, stride=2,
                              padding=0 if asymmetric_padding else 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.asymmetric_padding:
            x = F.pad(x, (0, 1, 0, 1), mode='constant', value=0)

        return self.conv(x)


class Upsample2D(nn.Module):
    """ Nearest-neighbor 2x interpolation followed by a 3x3 convolution """
    def __init__(self, channels: int, out_channels: Optional[int] = None) -> None:
        super().__init__()
        self.conv = nn.Conv2d(channels, out_channels or channels, kernel_size=3, stride=1, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(F.interpolate(x, scale_factor=2.0, mode='nearest'))


class SpatialAttention(nn.Module):
    """
    Single-head self-attention over the spatial positions of a feature map, with a residual connection.
    """
    def __init__(self, channels: int, norm_groups: int = 32) -> None:
        super().__init__()
        self.channels = channels
        self.group_norm = group_norm(channels, norm_groups)
        self.to_q = nn.Linear(channels, channels)
        self.to_k = nn.Linear(channels, channels)
        self.to_v = nn.Linear(channels, channels)
        self.to_out = nn.Linear(channels, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        batch, channels, height, width = x.shape
        h = self.group_norm(x).view(batch, channels, height * width).transpose(1, 2)

        q, k, v = self.to_q(h), self.to_k(h), self.to_v(h)
        weights = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(channels), dim=-1)
        h = self.to_out(weights @ v)

        return x + h.transpose(1, 2).reshape(batch, channels, height, width)
