from .estimators import SGDLinearRegression, SGDSoftmaxClassifier, TrainingDiverged
from .model import Model, aggregate_models
from .tasks import (
    LocalDataset,
    PartitionSpec,
    Task,
    TrainerConfig,
    evaluate,
    local_train,
    make_task,
    make_task_linreg,
    make_task_softmax_blobs,
    partition_indices,
)

__all__ = [
    "LocalDataset", "Model", "PartitionSpec", "SGDLinearRegression", "SGDSoftmaxClassifier",
    "Task", "TrainerConfig", "TrainingDiverged", "aggregate_models", "evaluate", "local_train",
    "make_task", "make_task_linreg", "make_task_softmax_blobs", "partition_indices",
]
