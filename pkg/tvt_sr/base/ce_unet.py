"""
 TVT-SR - Transfer VAE Training toolset for one-step super-resolution

 tvt_sr.base.ce_unet
 This module implements the compute-efficient UNet: replicated first and last layers running on f=4 latents around a
 LoRA-tuned base UNet that runs at half resolution
"""
import copy
import logging
from typing import Optional, Union
from collections.abc import Mapping
import torch
import torch.nn.functional as F
from torch import nn
from .models_base import ModelException, ShapeException, freeze, seeded_reset
from .specs import CeUnetSpec
from .layers import Upsample2D
from .lora import inject_lora, is_lora_param
from .unet import UnetModel, UnetUnit

logger = logging.getLogger(__name__)

PARAMETER_GROUPS = ('replicas', 'adapters', 'lora', 'base')
TRAINABLE_GROUPS = ('replicas', 'adapters', 'lora')


class ReplicaFront(nn.Module):
    """ Copy of the base input conv and the first replica_depth units of its first down level """
    def __init__(self, base: UnetModel, depth: int) -> None:
        super().__init__()
        self.conv_in = copy.deepcopy(base.conv_in)
        self.units = nn.ModuleList([copy.deepcopy(unit) for unit in base.down_blocks[0].units[:depth]])

    @property
    def out_channels(self) -> int:
        return self.conv_in.out_channels

    def forward(self, z: torch.Tensor, emb: torch.Tensor,
                context: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        h = self.conv_in(z)
        skips = [h]
        for unit in self.units:
            h = unit(h, emb, context)
            skips.append(h)

        return h, skips


class ReplicaBack(nn.Module):
    """ Copy of the last replica_depth + 1 units of the base final up level plus its output head """
    def __init__(self, base: UnetModel, depth: int) -> None:
        super().__init__()
        self.units = nn.ModuleList([copy.deepcopy(unit) for unit in base.up_blocks[-1].units[-(depth + 1):]])
        self.conv_norm_out = copy.deepcopy(base.conv_norm_out)
        self.conv_out = copy.deepcopy(base.conv_out)

    @property
    def first_unit(self) -> UnetUnit:
        return self.units[0]

    def forward(self, h: torch.Tensor, skips: list[torch.Tensor], emb: torch.Tensor,
                context: torch.Tensor) -> torch.Tensor:
        for unit in self.units:
            h = unit(torch.cat([h, skips.pop()], dim=1), emb, context)

        return self.conv_out(F.silu(self.conv_norm_out(h)))


class CeUnetModel(nn.Module):
    """
    replica front (2N) -> stride-2 conv (N) -> base UNet (N) -> nearest-x2 + conv (2N) -> concat skips -> replica back
    The base runs intact, including its own first and last layers.
    """
    def __init__(self, spec: CeUnetSpec, base: UnetModel, generator: Optional[torch.Generator] = None) -> None:
        super().__init__()
        self.spec = spec
        depth = spec.replica_depth
        self.front = ReplicaFront(base, depth)
        self.back = ReplicaBack(base, depth)

        width = self.front.out_channels
        hidden = self.back.first_unit.resnet.in_channels - width
        if hidden < 1:
            raise ModelException(f'Replica back expects {self.back.first_unit.resnet.in_channels} input channels, '
                                 f'skip width {width} leaves none for the upsampled path')

        self.down_adapter = nn.Conv2d(width, spec.base.in_channels, kernel_size=3, stride=2, padding=1)
        self.up_adapter = Upsample2D(spec.base.out_channels, hidden)

        if generator is None:
            generator = torch.Generator().manual_seed(spec.adapter_seed)
        seeded_reset(self.down_adapter, generator)
        seeded_reset(self.up_adapter, generator)

        # Replicas are copied first so that they stay plain, fully trainable layers
        self.base = freeze(base)
        self.lora_modules = inject_lora(self.base, spec.lora, generator) if spec.lora is not None else []
        for name, param in self.base.named_parameters():
            param.requires_grad_(is_lora_param(name))

    def check_input(self, z: torch.Tensor) -> None:
        if z.dim() != 4 or z.shape[1] != self.spec.base.in_channels:
            raise ShapeException(f'Expected a latent with {self.spec.base.in_channels} channels, '
                                 f'got shape {tuple(z.shape)}')
        height, width = z.shape[-2:]
        if height % 2 or width % 2:
            raise ShapeException(f'CE-UNet input dims must be even, got {height}x{width}')
        multiple = self.spec.input_multiple
        if height % multiple or width % multiple:
            raise ShapeException(f'CE-UNet input dims {height}x{width} are not multiples of {multiple}')

    def forward(self, z: torch.Tensor, timesteps: Union[int, torch.Tensor], context: torch.Tensor) -> torch.Tensor:
        """
        @param z: NCHW f=4 scale latent
        @param timesteps: int or (N,) integer tensor
        @param context: (N, tokens, context_dim) conditioning sequence
        @return: ε-prediction with the same shape as z
        """
        self.check_input(z)
        timesteps = self.base.timesteps_tensor(timesteps, z.shape[0], z.device)
        emb = self.base.embed_time(timesteps, z.dtype)

        h, skips = self.front(z, emb, context)
        h = self.base(self.down_adapter(h), timesteps, context, emb=emb)
        h = self.up_adapter(h)

        return self.back(h, skips, emb, context)


def build_ce_unet(spec: CeUnetSpec,
                  base_weights: Union[UnetModel, Mapping[str, torch.Tensor], None] = None) -> CeUnetModel:
    """
    Build a CE-UNet whose replicas are copies of the base first and last layers.
    @param spec: CeUnetSpec
    @param base_weights: Base UNet (or its state dict) to initialize from. Not modified. A freshly initialized base
                         is used if None.
    @return: CeUnetModel
    """
    base = UnetModel(spec.base)
    if base_weights is not None:
        state_dict = base_weights.state_dict() if isinstance(base_weights, nn.Module) else base_weights
        try:
            base.load_state_dict(state_dict, strict=True)
        except RuntimeError as ex:
            raise ModelException(f'Base weights are incompatible with spec: {ex}') from None

    model = CeUnetModel(spec, base)
    logger.debug('Built CE-UNet, LoRA on %d base modules', len(model.lora_modules))

    return model


def ce_forward(model: CeUnetModel, z: torch.Tensor, timesteps: Union[int, torch.Tensor],
               context: torch.Tensor) -> torch.Tensor:
    return model(z, timesteps, context)


def parameter_group(name: str) -> str:
    if name.startswith(('front.', 'back.')):
        return 'replicas'
    if name.startswith(('down_adapter.', 'up_adapter.')):
        return 'adapters'
    if is_lora_param(name):
        return 'lora'
    if name.startswith('base.'):
        return 'base'

    raise ModelException(f'Parameter {name} does not belong to any CE-UNet parameter group')


def parameter_groups(model: CeUnetModel) -> dict[str, dict[str, nn.Parameter]]:
    """
    Partition every parameter of model into the replicas, adapters, lora and base groups.
    @return: {group: {parameter name: parameter}}
    """
    groups = {group: {} for group in PARAMETER_GROUPS}
    for name, param in model.named_parameters():
        groups[parameter_group(name)][name] = param

    return groups


def trainable_parameters(model: CeUnetModel) -> dict[str, dict[str, nn.Parameter]]:
    """ Replicas, adapters and LoRA pairs. Base non-LoRA weights are excluded. """
    groups = parameter_groups(model)
    return {group: groups[group] for group in TRAINABLE_GROUPS}
