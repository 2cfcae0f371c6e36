"""
 TVT-SR - Transfer VAE Training toolset for one-step super-resolution

 tvt_sr.base.lora
 This module implements low-rank adapters on linear layers and their injection into a model
"""
import math
from typing import Optional
from collections.abc import Iterator
import torch
import torch.nn.functional as F
from torch import nn
from .models_base import ModelException
from .specs import LoraConfig

LORA_PARAM_NAMES = ('lora_A', 'lora_B')


def lora_apply(base_linear: nn.Linear, lora_pair: tuple[torch.Tensor, torch.Tensor], x: torch.Tensor,
               alpha: Optional[float] = None) -> torch.Tensor:
    """
    Evaluate y = W·x + b + (alpha/r)·B·(A·x)
    @param base_linear: The frozen linear map (W, b)
    @param lora_pair: (A, B) with A of shape (r, in_features) and B of shape (out_features, r)
    @param x: Input with in_features as last dimension
    @param alpha: LoRA alpha. Scaling is alpha/r, or 1.0 if alpha is None.
    @return: Output with out_features as last dimension
    """
    lora_a, lora_b = lora_pair
    rank = lora_a.shape[0]
    if lora_b.shape[1] != rank:
        raise ModelException(f'LoRA rank mismatch: A has rank {rank}, B has rank {lora_b.shape[1]}')
    if lora_a.shape[1] != base_linear.in_features or lora_b.shape[0] != base_linear.out_features:
        raise ModelException(f'LoRA pair {tuple(lora_a.shape)}/{tuple(lora_b.shape)} does not conform to linear '
                             f'{base_linear.in_features}->{base_linear.out_features}')

    scaling = 1.0 if alpha is None else alpha / rank
    return base_linear(x) + scaling * F.linear(F.linear(x, lora_a), lora_b)


class LoraLinear(nn.Module):
    """
    Linear layer wrapped with a trainable low-rank pair. B starts at zero so the wrapped layer initially computes
    exactly the same output as the base linear.
    """
    def __init__(self, base: nn.Linear, rank: int, alpha: float, generator: Optional[torch.Generator] = None) -> None:
        super().__init__()
        if rank < 1:
            raise ModelException(f'LoRA rank must be >= 1, got {rank}')

        self.base = base
        self.rank = rank
        self.alpha = alpha
        self.lora_A = nn.Parameter(torch.empty(rank, base.in_features, dtype=base.weight.dtype))
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, rank, dtype=base.weight.dtype))
        # Kaiming-uniform bound for a=sqrt(5), same as nn.Linear's default init
        bound = 1.0 / math.sqrt(base.in_features)
        with torch.no_grad():
            self.lora_A.uniform_(-bound, bound, generator=generator)

    @property
    def in_features(self) -> int:
        return self.base.in_features

    @property
    def out_features(self) -> int:
        return self.base.out_features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return lora_apply(self.base, (self.lora_A, self.lora_B), x, self.alpha)


def get_parent_module(model: nn.Module, full_name: str) -> nn.Module:
    parent = model
    for name in full_name.split('.')[:-1]:
        parent = getattr(parent, name)
    return parent


def inject_lora(model: nn.Module, config: LoraConfig, generator: Optional[torch.Generator] = None) -> list[str]:
    """
    Replace every nn.Linear whose attribute name matches one of config.targets with a LoraLinear wrapper.
    @param model: Model to patch in place
    @param config: LoraConfig
    @param generator: Optional generator for the A matrices initialization
    @return: Names of the patched modules
    """
    matched = [
        name for name, module in model.named_modules()
        if isinstance(module, nn.Linear) and name.split('.')[-1] in config.targets
    ]
    for name in matched:
        parent = get_parent_module(model, name)
        attr_name = name.split('.')[-1]
        setattr(parent, attr_name, LoraLinear(getattr(parent, attr_name), config.rank, config.alpha, generator))

    return matched


def is_lora_param(name: str) -> bool:
    return name.split('.')[-1] in LORA_PARAM_NAMES


def lora_parameters(model: nn.Module) -> Iterator[tuple[str, nn.Parameter]]:
    return ((name, param) for name, param in model.named_parameters() if is_lora_param(name))


def zero_lora(model: nn.Module) -> None:
    """ Zero every B matrix, making all adapters exact no-ops """
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, LoraLinear):
                module.lora_B.zero_()
