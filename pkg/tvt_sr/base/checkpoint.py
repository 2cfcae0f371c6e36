"""
 TVT-SR - Transfer VAE Training toolset for one-step super-resolution

 tvt_sr.base.checkpoint
 This module implements safetensors checkpoints with a JSON manifest, per-tensor digests and namespaced model, LoRA
 and optimizer state
"""
import hashlib
import logging
from pathlib import Path
from typing import Any, Optional, Union
from collections.abc import Mapping
import torch
from torch import nn
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from safetensors import SafetensorError, safe_open
from safetensors.torch import save_file, load_file
from .lora import is_lora_param

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
METADATA_KEY = 'manifest'
MODEL_NS = 'model'
LORA_NS = 'lora'
OPTIM_NS = 'optim'
NAMESPACES = (MODEL_NS, LORA_NS, OPTIM_NS)


class CheckpointException(Exception):
    """ Exception for checkpoint read/write errors """
    pass


class IntegrityException(CheckpointException):
    """ Exception for checkpoints whose content does not match their manifest """
    pass


class SpecMismatchException(CheckpointException):
    """ Exception for checkpoints loaded against a different spec """
    pass


class CheckpointManifest(BaseModel):
    model_config = ConfigDict(extra='forbid')

    format: int = CHECKPOINT_FORMAT
    kind: str
    phase: str
    spec_hash: str
    step: int = Field(ge=0)
    metrics: dict[str, float] = {}
    parent_id: Optional[str] = None
    # Optimizer state that is not a tensor: {component: {'param_groups': [...], 'scalars': {...}}}
    optim: dict[str, Any] = {}
    digests: dict[str, str] = {}

    @property
    def checkpoint_id(self) -> str:
        return checkpoint_id(self.digests)


def tensor_digest(tensor: torch.Tensor) -> str:
    """
    sha256 over dtype, shape and the raw little-endian bytes of tensor
    """
    tensor = tensor.detach().cpu().contiguous()
    digest = hashlib.sha256(f'{tensor.dtype}:{tuple(tensor.shape)}:'.encode())
    digest.update(tensor.reshape(-1).view(torch.uint8).numpy().tobytes())
    return digest.hexdigest()


def checkpoint_id(digests: Mapping[str, str]) -> str:
    digest = hashlib.sha256()
    for name in sorted(digests):
        digest.update(f'{name}={digests[name]};'.encode())
    return digest.hexdigest()


def tensor_name(namespace: str, component: str, key: str) -> str:
    return f'{namespace}/{component}/{key}'


def split_name(name: str) -> tuple[str, str, str]:
    namespace, component, key = name.split('/', 2)
    return namespace, component, key


def module_tensors(component: str, module: nn.Module) -> dict[str, torch.Tensor]:
    """ State dict of module, with LoRA pairs placed in their own namespace """
    return {
        tensor_name(LORA_NS if is_lora_param(key) else MODEL_NS, component, key): value
        for key, value in module.state_dict().items()
    }


def optimizer_tensors(component: str, optimizer: torch.optim.Optimizer) -> tuple[dict[str, torch.Tensor], dict]:
    """
    Flatten an optimizer state dict into tensors plus a JSON-serializable remainder.
    @return: (tensors, {'param_groups': [...], 'scalars': {'<index>/<key>': value}})
    """
    state_dict = optimizer.state_dict()
    tensors, scalars = {}, {}
    for index, param_state in state_dict['state'].items():
        for key, value in param_state.items():
            if isinstance(value, torch.Tensor):
                tensors[tensor_name(OPTIM_NS, component, f'{index}/{key}')] = value
            else:
                scalars[f'{index}/{key}'] = value

    return tensors, {'param_groups': state_dict['param_groups'], 'scalars': scalars}


class Checkpoint:
    """
    In-memory checkpoint: a manifest and a flat {namespace/component/key: tensor} mapping
    """
    def __init__(self, manifest: CheckpointManifest, tensors: Mapping[str, torch.Tensor]) -> None:
        self.manifest = manifest
        self.tensors = dict(tensors)

    @property
    def checkpoint_id(self) -> str:
        return self.manifest.checkpoint_id

    @property
    def step(self) -> int:
        return self.manifest.step

    @property
    def components(self) -> set[str]:
        return {split_name(name)[1] for name in self.tensors if split_name(name)[0] != OPTIM_NS}

    def select(self, namespace: str, component: str) -> dict[str, torch.Tensor]:
        prefix = f'{namespace}/{component}/'
        return {name[len(prefix):]: tensor for name, tensor in self.tensors.items() if name.startswith(prefix)}

    def state_dict(self, component: str) -> dict[str, torch.Tensor]:
        """ Full state dict of component, LoRA pairs included """
        return {**self.select(MODEL_NS, component), **self.select(LORA_NS, component)}

    def restore(self, component: str, module: nn.Module) -> nn.Module:
        """
        Load model and LoRA tensors of component into module, which must match exactly
        """
        state_dict = self.state_dict(component)
        if not state_dict:
            raise SpecMismatchException(f'Checkpoint has no component "{component}"')
        try:
            module.load_state_dict(state_dict, strict=True)
        except RuntimeError as ex:
            raise SpecMismatchException(f'Component "{component}" does not match its module: {ex}') from None

        return module

    def restore_lora(self, component: str, module: nn.Module) -> nn.Module:
        """
        Load only the LoRA pairs of component into module. Base weights of module are left untouched.
        """
        lora_state = self.select(LORA_NS, component)
        module_lora = {key for key in module.state_dict() if is_lora_param(key)}
        if set(lora_state) != module_lora:
            raise SpecMismatchException(f'LoRA tensors of "{component}" do not match the module adapters')
        try:
            module.load_state_dict(lora_state, strict=False)
        except RuntimeError as ex:
            raise SpecMismatchException(f'LoRA tensors of "{component}" do not match: {ex}') from None

        return module

    def restore_optimizer(self, component: str, optimizer: torch.optim.Optimizer) -> torch.optim.Optimizer:
        extra = self.manifest.optim.get(component)
        if extra is None:
            raise CheckpointException(f'Checkpoint has no optimizer state for "{component}"')

        state: dict[int, dict[str, Any]] = {}
        for key, tensor in self.select(OPTIM_NS, component).items():
            index, name = key.split('/', 1)
            state.setdefault(int(index), {})[name] = tensor.clone()
        for key, value in extra['scalars'].items():
            index, name = key.split('/', 1)
            state.setdefault(int(index), {})[name] = value

        try:
            optimizer.load_state_dict({'state': state, 'param_groups': extra['param_groups']})
        except (ValueError, KeyError) as ex:
            raise SpecMismatchException(f'Optimizer state of "{component}" does not match: {ex}') from None

        return optimizer

    def save(self, path: Union[str, Path]) -> Path:
        return write_checkpoint(path, self.manifest, self.tensors)


def write_checkpoint(path: Union[str, Path], manifest: CheckpointManifest,
                     tensors: Mapping[str, torch.Tensor]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blobs = {name: tensor.detach().cpu().contiguous().clone() for name, tensor in tensors.items()}
    manifest = manifest.model_copy(update={'digests': {name: tensor_digest(blobs[name]) for name in sorted(blobs)}})
    # A single metadata entry keeps the safetensors header byte-stable
    save_file(blobs, str(path), metadata={METADATA_KEY: manifest.model_dump_json()})
    logger.debug('Saved checkpoint %s (%d tensors, id %s)', path, len(blobs), manifest.checkpoint_id[:12])

    return path


def save_checkpoint(path: Union[str, Path], modules: Mapping[str, nn.Module], *, kind: str, phase: str,
                    spec_hash: str, step: int, metrics: Optional[Mapping[str, float]] = None,
                    parent_id: Optional[str] = None,
                    optimizers: Optional[Mapping[str, torch.optim.Optimizer]] = None) -> Checkpoint:
    """
    Save modules and optimizer states to a single safetensors file.
    @param path: Destination file
    @param modules: {component name: module}. LoRA pairs are stored under the lora namespace.
    @param kind: Kind of checkpoint, e.g. 'vae', 'unet', 'sr'
    @param phase: Phase that produced the checkpoint
    @param spec_hash: Hash of the spec/config the modules were built from
    @param step: Training step
    @param metrics: Optional metric snapshot
    @param parent_id: Checkpoint id this one was derived from
    @param optimizers: {component name: optimizer}
    @return: Checkpoint
    """
    tensors, optim = {}, {}
    for component, module in modules.items():
        if '/' in component:
            raise CheckpointException(f'Invalid component name: {component}')
        tensors.update(module_tensors(component, module))
    for component, optimizer in (optimizers or {}).items():
        optim_tensors, optim[component] = optimizer_tensors(component, optimizer)
        tensors.update(optim_tensors)

    manifest = CheckpointManifest(kind=kind, phase=phase, spec_hash=spec_hash, step=step,
                                  metrics=dict(metrics or {}), parent_id=parent_id, optim=optim)
    write_checkpoint(path, manifest, tensors)

    return load_checkpoint(path)


def load_checkpoint(path: Union[str, Path], spec_hash: Optional[str] = None) -> Checkpoint:
    """
    Load and verify a checkpoint.
    @param path: safetensors checkpoint file
    @param spec_hash: If provided, the checkpoint spec hash must match
    @return: Checkpoint
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f'Checkpoint not found: {path}')

    try:
        tensors = load_file(str(path))
        with safe_open(str(path), framework='pt') as checkpoint_file:
            metadata = checkpoint_file.metadata() or {}
    except (SafetensorError, OSError, ValueError) as ex:
        raise IntegrityException(f'Unreadable checkpoint {path}: {ex}') from None

    if METADATA_KEY not in metadata:
        raise IntegrityException(f'Checkpoint {path} has no manifest')
    try:
        manifest = CheckpointManifest.model_validate_json(metadata[METADATA_KEY])
    except ValidationError as ex:
        raise IntegrityException(f'Invalid checkpoint manifest in {path}: {ex}') from None

    if set(tensors) != set(manifest.digests):
        missing = sorted(set(manifest.digests) - set(tensors))
        unexpected = sorted(set(tensors) - set(manifest.digests))
        raise IntegrityException(f'Checkpoint {path} tensor names do not match manifest. '
                                 f'Missing: {missing}, unexpected: {unexpected}')
    for name, tensor in tensors.items():
        if split_name(name)[0] not in NAMESPACES:
            raise IntegrityException(f'Checkpoint {path} has tensor outside known namespaces: {name}')
        if tensor_digest(tensor) != manifest.digests[name]:
            raise IntegrityException(f'Checkpoint {path} tensor {name} failed digest check')

    if spec_hash is not None and manifest.spec_hash != spec_hash:
        raise SpecMismatchException(f'Checkpoint {path} was saved for spec {manifest.spec_hash[:12]}, '
                                    f'expected {spec_hash[:12]}')

    return Checkpoint(manifest, tensors)
