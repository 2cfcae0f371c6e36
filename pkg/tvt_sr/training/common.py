"""
 TVT-SR - Transfer VAE Training toolset for one-step super-resolution

 tvt_sr.training.common
 This module implements supporting classes and functions for training phases
"""
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Optional, Union
from collections.abc import Callable, Iterable, Iterator, Mapping
import torch
from torch import nn
from pydantic import NonNegativeFloat, PositiveFloat, PositiveInt, field_validator
from ..base.models_base import SpecModel
from ..base.losses import LossReport
from ..base.lora import is_lora_param
from ..base.checkpoint import Checkpoint, save_checkpoint

logger = logging.getLogger(__name__)


class TrainingException(Exception):
    """ Exception for training errors """
    pass


class FrozenParameterException(TrainingException):
    """ Exception indicating that a component expected to be frozen can be or was updated """
    pass


class NonFiniteLossException(TrainingException):
    """ Exception indicating a NaN or infinite loss, carries the last good checkpoint """
    def __init__(self, message: str, last_checkpoint: Optional[Path] = None) -> None:
        super().__init__(message)
        self.last_checkpoint = last_checkpoint

    def __str__(self) -> str:
        resume_info = f'. Last good checkpoint: {self.last_checkpoint}' if self.last_checkpoint else ''
        return f'{super().__str__()}{resume_info}'


def step_generator(seed: int, phase: str, step: int) -> torch.Generator:
    """
    Generator for everything random in one training step (batch indices, latent samples, timesteps, noise).
    Depends only on (seed, phase, step), so a resumed run replays the same draws.
    """
    digest = hashlib.sha256(f'{seed}:{phase}:{step}'.encode()).digest()
    return torch.Generator().manual_seed(int.from_bytes(digest[:8], 'little') & (2 ** 63 - 1))


class OptimizerConfig(SpecModel):
    lr: PositiveFloat = 5e-5
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: NonNegativeFloat = 0.01
    eps: PositiveFloat = 1e-8

    @field_validator('betas')
    @classmethod
    def valid_betas(cls, betas: tuple[float, float]) -> tuple[float, float]:
        if not all(0.0 <= beta < 1.0 for beta in betas):
            raise ValueError('betas must be within [0, 1)')
        return betas


class LoopConfig(SpecModel):
    batch_size: PositiveInt = 16
    total_steps: PositiveInt = 2000
    checkpoint_every: Optional[PositiveInt] = None


def build_optimizer(params: Iterable[nn.Parameter], config: OptimizerConfig) -> torch.optim.AdamW:
    params = list(params)
    if not params:
        raise TrainingException('No trainable parameters')
    return torch.optim.AdamW(params, lr=config.lr, betas=config.betas, weight_decay=config.weight_decay,
                             eps=config.eps)


def check_frozen(*modules: nn.Module) -> None:
    """ Raise if any non-LoRA parameter of modules has requires_grad set """
    for module in modules:
        for name, param in module.named_parameters():
            if param.requires_grad and not is_lora_param(name):
                raise FrozenParameterException(f'Parameter {name} of frozen {type(module).__name__} requires grad')


def frozen_digest(*modules: nn.Module) -> str:
    """
    sha256 over the raw bytes of every non-LoRA parameter and buffer of modules
    """
    digest = hashlib.sha256()
    for module in modules:
        for name, tensor in module.state_dict().items():
            if is_lora_param(name):
                continue
            digest.update(name.encode())
            digest.update(tensor.detach().cpu().contiguous().reshape(-1).view(torch.uint8).numpy().tobytes())

    return digest.hexdigest()


class FreezeGuard:
    """
    Records the digest of frozen modules and verifies they are bitwise unchanged

    guard = FreezeGuard(encoder)
    ...
    guard.verify()
    """
    def __init__(self, *modules: nn.Module, label: str = 'frozen components') -> None:
        check_frozen(*modules)
        self.modules = modules
        self.label = label
        self.digest = frozen_digest(*modules)

    def verify(self) -> None:
        if frozen_digest(*self.modules) != self.digest:
            raise FrozenParameterException(f'{self.label} changed during training')


def check_finite(loss: torch.Tensor, what: str = 'loss') -> torch.Tensor:
    if not bool(torch.isfinite(loss).all()):
        raise NonFiniteLossException(f'Non-finite {what}: {loss.detach().cpu().tolist()}')
    return loss


class TrainingLog:
    """
    Append-only line-delimited JSON log of per-step loss records
    """
    def __init__(self, path: Optional[Union[str, Path]] = None) -> None:
        self.path = Path(path) if path is not None else None
        self.records: list[dict[str, Any]] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if self.path.exists():
                self.records = list(self.read(self.path))

    @staticmethod
    def read(path: Union[str, Path]) -> Iterator[dict[str, Any]]:
        with open(path) as read_f:
            for line in read_f:
                if line.strip():
                    yield json.loads(line)

    def append(self, phase: str, step: int, report: LossReport, lr: float) -> dict[str, Any]:
        record = {'phase': phase, 'step': step, **report.model_dump(), 'lr': lr}
        self.records.append(record)
        if self.path is not None:
            with open(self.path, 'a') as write_f:
                write_f.write(json.dumps(record, sort_keys=True) + '\n')
        return record

    def rewind(self, phase: str, step: int) -> None:
        """
        Drop the records of phase from step onwards, and every record logged after them
        """
        cut = next(
            (index for index, record in enumerate(self.records) if record['phase'] == phase and record['step'] >= step),
            len(self.records)
        )
        self.records = self.records[:cut]
        if self.path is not None:
            with open(self.path, 'w') as write_f:
                write_f.writelines(json.dumps(record, sort_keys=True) + '\n' for record in self.records)

    def phase_records(self, phase: str) -> list[dict[str, Any]]:
        return [record for record in self.records if record['phase'] == phase]


class Checkpointer:
    """
    Writes <directory>/<phase>-<step:08d>.safetensors checkpoints chained by parent id
    """
    def __init__(self, directory: Union[str, Path], phase: str, kind: str, spec_hash: str,
                 parent_id: Optional[str] = None) -> None:
        self.directory = Path(directory)
        self.phase = phase
        self.kind = kind
        self.spec_hash = spec_hash
        self.parent_id = parent_id
        self.last_path: Optional[Path] = None
        self.saved: list[tuple[Path, str]] = []

    def path(self, step: int) -> Path:
        return Path(self.directory, f'{self.phase}-{step:08d}.safetensors')

    def save(self, step: int, modules: Mapping[str, nn.Module],
             optimizers: Optional[Mapping[str, torch.optim.Optimizer]] = None,
             metrics: Optional[Mapping[str, float]] = None) -> Checkpoint:
        path = self.path(step)
        checkpoint = save_checkpoint(path, modules, kind=self.kind, phase=self.phase, spec_hash=self.spec_hash,
                                     step=step, metrics=metrics, parent_id=self.parent_id, optimizers=optimizers)
        self.parent_id = checkpoint.checkpoint_id
        self.last_path = path
        self.saved.append((path, checkpoint.checkpoint_id))
        logger.info('Checkpoint %s saved at step %d', path.name, step)

        return checkpoint


# (step, generator) -> LossReport
StepFn = Callable[[int, torch.Generator], LossReport]
# () -> ({component: module}, {component: optimizer})
StateFn = Callable[[], tuple[Mapping[str, nn.Module], Mapping[str, torch.optim.Optimizer]]]


class PhaseRunner:
    """
    Runs the steps of one training phase, logging every step and checkpointing every checkpoint_every steps and at
    the end of the phase. Checkpoint step numbers count completed steps, resuming from a checkpoint of step k
    continues with step k.
    """
    def __init__(self, phase: str, seed: int, loop: LoopConfig, lr: float, log: Optional[TrainingLog] = None,
                 checkpointer: Optional[Checkpointer] = None) -> None:
        self.phase = phase
        self.seed = seed
        self.loop = loop
        self.lr = lr
        self.log = log if log is not None else TrainingLog()
        self.checkpointer = checkpointer

    def run(self, step_fn: StepFn, state_fn: StateFn, start_step: int = 0,
            on_checkpoint: Optional[Callable[[int], None]] = None) -> list[LossReport]:
        """
        @param step_fn: Performs one optimization step
        @param state_fn: Returns the modules and optimizers to checkpoint
        @param start_step: First step to run
        @param on_checkpoint: Called with the completed step count before each checkpoint, e.g. for freeze checks
        @return: LossReports of the steps that ran
        """
        total = self.loop.total_steps
        if not 0 <= start_step <= total:
            raise TrainingException(f'Cannot start {self.phase} at step {start_step} of {total}')
        if start_step:
            self.log.rewind(self.phase, start_step)
            logger.info('Resuming %s at step %d', self.phase, start_step)

        reports = []
        for step in range(start_step, total):
            try:
                report = step_fn(step, step_generator(self.seed, self.phase, step))
            except NonFiniteLossException as ex:
                last = self.checkpointer.last_path if self.checkpointer is not None else None
                raise NonFiniteLossException(f'{self.phase} step {step}: {ex.args[0]}', last) from None
            self.log.append(self.phase, step, report, self.lr)
            reports.append(report)

            completed = step + 1
            every = self.loop.checkpoint_every
            if completed == total or (every is not None and completed % every == 0):
                if on_checkpoint is not None:
                    on_checkpoint(completed)
                if self.checkpointer is not None:
                    modules, optimizers = state_fn()
                    self.checkpointer.save(completed, modules, optimizers, metrics=report.model_dump())

        if reports:
            logger.info('%s finished: %d steps, final total loss %.6f', self.phase, len(reports), reports[-1].total)

        return reports
