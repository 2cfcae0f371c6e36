"""
 TVT-SR - Transfer VAE Training toolset for one-step super-resolution

 tvt_sr.base.models_base
 This module implements base classes and helpers shared by the model layer
"""
import hashlib
import json
import math
import re
from os import environ
from pathlib import Path
from typing import Any
from collections.abc import Iterable
import torch
from torch import nn
from pydantic import BaseModel, ConfigDict

# Top-level directory for local data store
TVT_ROOT_DIR = Path(environ.get('TVT_ROOT_DIR', Path.cwd()))
DATA_DIR = str(Path(TVT_ROOT_DIR, 'data'))


class SpecModel(BaseModel):
    """
    Base class for declarative specs and configs. Unknown fields are rejected so that a typo in a config file is
    reported with the offending field name instead of being silently ignored.
    """
    model_config = ConfigDict(extra='forbid', frozen=True)

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode='json'), sort_keys=True, separators=(',', ':'))

    def spec_hash(self) -> str:
        """
        @return: sha256 hex digest of the canonical JSON dump of this spec
        """
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def to_signed(image: torch.Tensor) -> torch.Tensor:
    """ Map a unit-range [0, 1] image to model space [-1, 1] """
    return image * 2.0 - 1.0


def to_unit(image: torch.Tensor) -> torch.Tensor:
    """ Map a model-space [-1, 1] image back to [0, 1], clamping overshoots """
    return ((image + 1.0) / 2.0).clamp(0.0, 1.0)


def check_image(image: torch.Tensor, factor: int = 1, channels: int = 3) -> None:
    """
    Validate an NCHW image batch against a spatial divisibility factor.
    @param image: Tensor with shape (N, C, H, W)
    @param factor: H and W must be divisible by factor
    @param channels: Expected channel count
    """
    if image.dim() != 4:
        raise ShapeException(f'Expected an NCHW tensor, got shape {tuple(image.shape)}')
    if image.shape[1] != channels:
        raise ShapeException(f'Expected {channels} channels, got {image.shape[1]}')
    height, width = image.shape[-2:]
    if height % factor or width % factor:
        raise ShapeException(f'Spatial dims {height}x{width} are not divisible by {factor}')


def freeze(module: nn.Module) -> nn.Module:
    module.requires_grad_(False)
    return module


def seeded_reset(module: nn.Module, generator: torch.Generator) -> nn.Module:
    """
    Re-initialize every conv and linear layer of module from generator, using the torch default bounds
    (uniform within 1/sqrt(fan_in) for both weight and bias).
    @param module: Module to re-initialize in place
    @param generator: Seeded torch.Generator
    @return: The same module
    """
    with torch.no_grad():
        for layer in module.modules():
            if not isinstance(layer, (nn.Conv2d, nn.Linear)):
                continue
            bound = 1.0 / math.sqrt(layer.weight[0].numel())
            layer.weight.uniform_(-bound, bound, generator=generator)
            if layer.bias is not None:
                layer.bias.uniform_(-bound, bound, generator=generator)

    return module


def parameter_digest(*modules: nn.Module) -> str:
    """
    Compute a digest over the raw bytes of every parameter and buffer of the provided modules. Used to assert that a
    frozen component is bitwise unchanged across training.
    @return: sha256 hex digest
    """
    digest = hashlib.sha256()
    for module in modules:
        for name, tensor in module.state_dict().items():
            digest.update(name.encode())
            digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())

    return digest.hexdigest()


def count_module_params(modules: Iterable[nn.Module]) -> int:
    return sum(param.numel() for module in modules for param in module.parameters())


def filename_safe(name: str, lower: bool = False) -> str:
    """
    Perform the necessary replacements in <name> to make it filename safe.
    Any char that is not a-z, A-Z, 0-9, '_', ' ', or '-' is replaced with '_'. Convert to lowercase, if lower=True.
    @param name: name string to be converted
    @param lower: If True, apply str.lower() to result.
    @return: string containing the filename-save version of name
    """
    cleaned = re.sub(r'[^\w\s-]', '_', name, flags=re.ASCII)
    return cleaned.lower() if lower else cleaned


def json_dumps(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(',', ':'))


class ModelException(Exception):
    """ Exception for model architecture errors """
    pass


class ShapeException(ModelException):
    """ Exception for tensor shape contract violations """
    pass
