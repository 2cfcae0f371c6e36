"""
 TVT-SR - Transfer VAE Training toolset for one-step super-resolution

 tvt_sr.base.vae
 This module implements the KL autoencoders (reference VAE-D8 and compact VAE-D4) built from a VaeSpec
"""
from typing import Optional
import torch
import torch.nn.functional as F
from torch import nn
from .models_base import ModelException, ShapeException, check_image, seeded_reset
from .specs import VaeSpec
from .layers import ResnetBlock2D, Downsample2D, Upsample2D, SpatialAttention, group_norm

LOGVAR_MIN = -30.0
LOGVAR_MAX = 20.0


class DiagonalGaussian:
    def __init__(self, mean: torch.Tensor, logvar: torch.Tensor) -> None:
        if mean.shape != logvar.shape:
            raise ShapeException(f'mean {tuple(mean.shape)} and logvar {tuple(logvar.shape)} shapes differ')

        self.mean = mean
        self.logvar = torch.clamp(logvar, LOGVAR_MIN, LOGVAR_MAX)
        self.std = torch.exp(0.5 * self.logvar)

    @classmethod
    def from_moments(cls, moments: torch.Tensor) -> 'DiagonalGaussian':
        mean, logvar = torch.chunk(moments, 2, dim=1)
        return cls(mean, logvar)

    def sample(self, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        noise = torch.randn(self.mean.shape, generator=generator, dtype=self.mean.dtype, device=self.mean.device)
        return self.mean + self.std * noise

    def mode(self) -> torch.Tensor:
        return self.mean

    def kl(self) -> torch.Tensor:
        return kl_divergence(self)


def kl_divergence(gaussian: DiagonalGaussian) -> torch.Tensor:
    """
    KL divergence between a diagonal gaussian and the standard normal, summed over all elements.
    @param gaussian: DiagonalGaussian
    @return: 0.5 * sum(mean^2 + exp(logvar) - 1 - logvar)
    """
    return 0.5 * torch.sum(gaussian.mean.pow(2) + torch.exp(gaussian.logvar) - 1.0 - gaussian.logvar)


class VaeMidBlock(nn.Module):
    def __init__(self, channels: int, norm_groups: int) -> None:
        super().__init__()
        self.resnets = nn.ModuleList([
            ResnetBlock2D(channels, channels, norm_groups=norm_groups),
            ResnetBlock2D(channels, channels, norm_groups=norm_groups),
        ])
        self.attention = SpatialAttention(channels, norm_groups)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.resnets[0](x)
        x = self.attention(x)
        return self.resnets[1](x)


class EncoderStage(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, num_blocks: int, add_downsample: bool,
                 norm_groups: int) -> None:
        super().__init__()
        self.resnets = nn.ModuleList([
            ResnetBlock2D(in_channels if index == 0 else out_channels, out_channels, norm_groups=norm_groups)
            for index in range(num_blocks)
        ])
        self.downsample = Downsample2D(out_channels, asymmetric_padding=True) if add_downsample else None

    def forward(self, x: torch.Tensor, skips: Optional[list[torch.Tensor]] = None) -> torch.Tensor:
        for resnet in self.resnets:
            x = resnet(x)
        if skips is not None:
            skips.append(x)
        if self.downsample is not None:
            x = self.downsample(x)
        return x


class DecoderStage(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, num_blocks: int, add_upsample: bool,
                 norm_groups: int) -> None:
        super().__init__()
        self.resnets = nn.ModuleList([
            ResnetBlock2D(in_channels if index == 0 else out_channels, out_channels, norm_groups=norm_groups)
            for index in range(num_blocks)
        ])
        self.upsample = Upsample2D(out_channels) if add_upsample else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for resnet in self.resnets:
            x = resnet(x)
        if self.upsample is not None:
            x = self.upsample(x)
        return x


class Encoder(nn.Module):
    def __init__(self, spec: VaeSpec) -> None:
        super().__init__()
        channels = spec.stage_channels
        self.conv_in = nn.Conv2d(3, channels[0], kernel_size=3, stride=1, padding=1)

        self.down_blocks = nn.ModuleList()
        in_channels = channels[0]
        for index, out_channels in enumerate(channels):
            is_final = index == len(channels) - 1
            self.down_blocks.append(
                EncoderStage(in_channels, out_channels, spec.blocks_per_stage, not is_final, spec.norm_groups)
            )
            in_channels = out_channels

        self.mid_block = VaeMidBlock(channels[-1], spec.norm_groups) if spec.has_mid_attention else None
        self.conv_norm_out = group_norm(channels[-1], spec.norm_groups)
        self.conv_out = nn.Conv2d(channels[-1], 2 * spec.latent_channels, kernel_size=3, padding=1)
        self.quant_conv = nn.Conv2d(2 * spec.latent_channels, 2 * spec.latent_channels, kernel_size=1)

    def forward(self, x: torch.Tensor, skips: Optional[list[torch.Tensor]] = None) -> torch.Tensor:
        """ When skips is a list, the output of every stage before its downsample is appended to it """
        x = self.conv_in(x)
        for down_block in self.down_blocks:
            x = down_block(x, skips)
        if self.mid_block is not None:
            x = self.mid_block(x)
        x = self.conv_out(F.silu(self.conv_norm_out(x)))

        return self.quant_conv(x)


class Decoder(nn.Module):
    def __init__(self, spec: VaeSpec) -> None:
        super().__init__()
        reversed_channels = tuple(reversed(spec.stage_channels))
        self.post_quant_conv = nn.Conv2d(spec.latent_channels, spec.latent_channels, kernel_size=1)
        self.conv_in = nn.Conv2d(spec.latent_channels, reversed_channels[0], kernel_size=3, padding=1)
        self.mid_block = VaeMidBlock(reversed_channels[0], spec.norm_groups) if spec.has_mid_attention else None

        self.up_blocks = nn.ModuleList()
        in_channels = reversed_channels[0]
        for index, out_channels in enumerate(reversed_channels):
            is_final = index == len(reversed_channels) - 1
            self.up_blocks.append(
                DecoderStage(in_channels, out_channels, spec.decoder_blocks_per_stage, not is_final, spec.norm_groups)
            )
            in_channels = out_channels

        # Stage i input takes the encoder features of the same resolution through a 1x1 conv
        self.skip_convs = nn.ModuleList([
            nn.Conv2d(encoder_channels, reversed_channels[max(index - 1, 0)], kernel_size=1)
            for index, encoder_channels in enumerate(reversed_channels)
        ]) if spec.skip_connections else None
        self.reset_skips()

        self.conv_norm_out = group_norm(reversed_channels[-1], spec.norm_groups)
        self.conv_out = nn.Conv2d(reversed_channels[-1], 3, kernel_size=3, padding=1)

    def reset_skips(self) -> None:
        """ Zero skip convs leave the decoder output equal to the one without skip connections """
        if self.skip_convs is None:
            return
        with torch.no_grad():
            for conv in self.skip_convs:
                conv.weight.zero_()
                conv.bias.zero_()

    def forward(self, z: torch.Tensor, skips: Optional[list[torch.Tensor]] = None) -> torch.Tensor:
        """
        @param z: Latent batch
        @param skips: Encoder stage features of the same images, finest first. Ignored without skip convs.
        """
        use_skips = skips is not None and self.skip_convs is not None
        if use_skips and len(skips) != len(self.skip_convs):
            raise ShapeException(f'Expected {len(self.skip_convs)} skip features, got {len(skips)}')

        x = self.conv_in(self.post_quant_conv(z))
        if self.mid_block is not None:
            x = self.mid_block(x)
        for index, up_block in enumerate(self.up_blocks):
            if use_skips:
                x = x + self.skip_convs[index](skips[-1 - index])
            x = up_block(x)

        return self.conv_out(F.silu(self.conv_norm_out(x)))


class VaeModel(nn.Module):
    """
    KL autoencoder. Images are NCHW tensors in model space [-1, 1]; latents are NCHW with spatial dims divided by
    the spec downsample factor.
    """
    def __init__(self, spec: VaeSpec) -> None:
        super().__init__()
        self.spec = spec
        self.encoder = Encoder(spec)
        self.decoder = Decoder(spec)

    @property
    def factor(self) -> int:
        return self.spec.downsample_factor

    @property
    def last_layer(self) -> nn.Parameter:
        """ Weight of the final decoder conv, used for the adaptive GAN weight """
        return self.decoder.conv_out.weight

    def encode_distribution(self, image: torch.Tensor,
                            skips: Optional[list[torch.Tensor]] = None) -> DiagonalGaussian:
        check_image(image, self.factor)
        return DiagonalGaussian.from_moments(self.encoder(image, skips))

    def encode(self, image: torch.Tensor, sample: bool = False,
               generator: Optional[torch.Generator] = None) -> torch.Tensor:
        """
        Encode an image batch to latents.
        @param image: NCHW tensor in [-1, 1], H and W divisible by the downsample factor
        @param sample: If False, return the mean latent. If True, draw a reparameterized sample.
        @param generator: Optional torch.Generator used for sampling
        @return: NCHW latent tensor
        """
        posterior = self.encode_distribution(image)
        return posterior.sample(generator) if sample else posterior.mode()

    def decode(self, latent: torch.Tensor, skips: Optional[list[torch.Tensor]] = None) -> torch.Tensor:
        if latent.dim() != 4 or latent.shape[1] != self.spec.latent_channels:
            raise ShapeException(f'Expected a latent with {self.spec.latent_channels} channels, '
                                 f'got shape {tuple(latent.shape)}')
        return self.decoder(latent, skips)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        """ Mean-latent round trip, through the skip connections when the spec has them """
        skips = [] if self.spec.skip_connections else None
        latent = self.encode_distribution(image, skips).mode()
        return self.decode(latent, skips)


def build_vae(spec: VaeSpec, seed: Optional[int] = None) -> VaeModel:
    """
    Build a VaeModel from a VaeSpec. Its invariants are re-checked, as VaeSpec objects may be constructed without
    validation (e.g. model_construct).
    @param spec: VaeSpec
    @param seed: If provided, conv and linear weights are drawn from a generator with this seed
    @return: VaeModel with freshly initialized weights
    """
    if 2 ** (len(spec.stage_channels) - 1) != spec.downsample_factor:
        raise ModelException(f'Stage count {len(spec.stage_channels)} disagrees with downsample factor '
                             f'{spec.downsample_factor}')

    model = VaeModel(spec)
    if seed is not None:
        seeded_reset(model, torch.Generator().manual_seed(seed))
        model.decoder.reset_skips()

    return model
