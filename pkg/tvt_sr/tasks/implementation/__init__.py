"""
 TVT-SR - Transfer VAE Training toolset for one-step super-resolution

 tvt_sr.tasks.implementation
 This module contains the implementation of user-facing tasks
"""
from ._train import (
    TaskTrainVaeReference,
    TaskTrainUnetReference,
    TaskTrainVaeDecoder,
    TaskTrainVaeEncoder,
    TaskTrainSr,
    TrainArgs
)
from ._infer_sr import TaskInferSr, InferSrArgs
from ._eval import TaskEvalRecon, TaskEvalSr, EvalReconArgs, EvalSrArgs
from ._degrade import TaskDegrade, DegradeArgs
from ._audit import TaskAuditFlops, AuditFlopsArgs
from ._run import TaskRun, RunArgs


__all__ = [
    'TaskTrainVaeReference',
    'TaskTrainUnetReference',
    'TaskTrainVaeDecoder',
    'TaskTrainVaeEncoder',
    'TaskTrainSr',
    'TaskInferSr',
    'TaskEvalRecon',
    'TaskEvalSr',
    'TaskDegrade',
    'TaskAuditFlops',
    'TaskRun',
    'TrainArgs',
    'InferSrArgs',
    'EvalReconArgs',
    'EvalSrArgs',
    'DegradeArgs',
    'AuditFlopsArgs',
    'RunArgs'
]
