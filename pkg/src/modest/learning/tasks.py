"""Synthetic tasks and how nodes train on them."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .estimators import SGDLinearRegression, SGDSoftmaxClassifier, softmax_loss, squared_loss
from .model import DEFAULT_BYTES_PER_PARAM, Model

TARGET_LOSS_MARGIN = 0.1


@dataclass(frozen=True)
class LocalDataset:
    X: np.ndarray
    y: np.ndarray
    owner: int | None = None

    def __post_init__(self):
        if len(self.X) == 0:
            raise ValueError("a local dataset needs at least one example")
        if len(self.X) != len(self.y):
            raise ValueError("features and targets differ in length")

    def __len__(self):
        return len(self.y)


@dataclass(frozen=True)
class TrainerConfig:
    learning_rate: float = 0.05
    batch_size: int | None = 20
    local_epochs: int = 1
    momentum: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")


@dataclass(frozen=True)
class PartitionSpec:
    scheme: str = "iid"  # "iid" or "dirichlet"
    alpha: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in ("iid", "dirichlet"):
            raise ValueError(f"unknown partition scheme {self.scheme!r}")
        if self.scheme == "dirichlet" and not self.alpha > 0:
            raise ValueError("Dirichlet alpha must be > 0")


@dataclass
class Task:
    name: str
    datasets: list[LocalDataset]
    test: LocalDataset
    target: float
    lower_is_better: bool
    n_classes: int | None = None
    bytes_per_param: int = DEFAULT_BYTES_PER_PARAM
    optimum: np.ndarray | None = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return self.test.X.shape[1]

    @property
    def n_params(self) -> int:
        if self.n_classes is None:
            return self.dim
        return self.n_classes * (self.dim + 1)

    def estimator(self, cfg: TrainerConfig, random_state=None):
        kwargs = dict(learning_rate=cfg.learning_rate, batch_size=cfg.batch_size,
                      epochs=cfg.local_epochs, momentum=cfg.momentum, random_state=random_state)
        if self.n_classes is None:
            return SGDLinearRegression(**kwargs)
        return SGDSoftmaxClassifier(n_classes=self.n_classes, **kwargs)

    def initial_model(self, seed: int = 0, scale: float = 0.0) -> Model:
        rng = np.random.default_rng([seed, 0x1A17])
        return Model(scale * rng.standard_normal(self.n_params), self.bytes_per_param)

    def reached(self, metric: float) -> bool:
        return metric <= self.target if self.lower_is_better else metric >= self.target

    def make_trainer(self, cfg: TrainerConfig) -> Callable[[Model, int, int], Model]:
        """Return ``train(model, node, round)`` running on that node's local data."""

        def train(model: Model, node: int, k: int) -> Model:
            return local_train(model, self.datasets[node], cfg, task=self,
                               random_state=[cfg.seed, node, k])

        return train


def local_train(model: Model, data: LocalDataset, cfg: TrainerConfig, task: Task,
                random_state=None) -> Model:
    """Run ``cfg.local_epochs`` epochs of mini-batch SGD starting from ``model``."""
    est = task.estimator(cfg, random_state=cfg.seed if random_state is None else random_state)
    est.fit(data.X, data.y, params_init=model.params)
    return Model(est.params_, model.bytes_per_param)


def evaluate(model: Model, test: LocalDataset, task: Task) -> tuple[float, float]:
    """(loss, metric) on held-out data; the metric is MSE or accuracy."""
    if task.n_classes is None:
        loss = squared_loss(model.params, test.X, test.y)
        return loss, loss
    loss = softmax_loss(model.params, test.X, test.y, task.n_classes)
    W = model.params.reshape(task.n_classes, test.X.shape[1] + 1)
    pred = np.argmax(test.X @ W[:, :-1].T + W[:, -1], axis=1)
    return loss, float(np.mean(pred == test.y))


# Partitioning -------------------------------------------------------------------

def partition_indices(labels: np.ndarray, n_nodes: int, spec: PartitionSpec,
                      min_size: int = 2) -> list[np.ndarray]:
    """Split example indices across nodes: uniform shuffle or Dirichlet label skew."""
    m = len(labels)
    if m < n_nodes * min_size:
        raise ValueError("not enough examples for the requested number of nodes")
    rng = np.random.default_rng([spec.seed, 0xDA7A])
    if spec.scheme == "iid":
        return [np.sort(part) for part in np.array_split(rng.permutation(m), n_nodes)]

    classes = np.unique(labels)
    for _ in range(100):
        parts: list[list[int]] = [[] for _ in range(n_nodes)]
        for c in classes:
            idx = rng.permutation(np.flatnonzero(labels == c))
            props = rng.dirichlet(np.full(n_nodes, spec.alpha))
            cuts = (np.cumsum(props) * len(idx)).astype(int)[:-1]
            for node, chunk in enumerate(np.split(idx, cuts)):
                parts[node].extend(chunk.tolist())
        if min(len(p) for p in parts) >= min_size:
            return [np.sort(np.asarray(p, dtype=np.int64)) for p in parts]
    # very small alpha: top up starved nodes from the largest ones
    sizes = [len(p) for p in parts]
    for node in range(n_nodes):
        while len(parts[node]) < min_size:
            donor = int(np.argmax(sizes))
            parts[node].append(parts[donor].pop())
            sizes[donor] -= 1
            sizes[node] += 1
    return [np.sort(np.asarray(p, dtype=np.int64)) for p in parts]


def _split(X, y, parts):
    return [LocalDataset(X[idx], y[idx], owner=node) for node, idx in enumerate(parts)]


# Tasks --------------------------------------------------------------------------

def make_task_linreg(dim: int, n_nodes: int, samples_per_node: int, noise: float,
                     partition: PartitionSpec | None = None, seed: int = 0,
                     test_size: int = 2000, bytes_per_param: int = DEFAULT_BYTES_PER_PARAM) -> Task:
    """Planted linear model ``y = w* . x + noise``.

    The target is ``noise**2 * (1 + TARGET_LOSS_MARGIN)`` test MSE.  The
    least-squares optimum of the pooled training data is kept on the task as
    ``optimum`` for use as a reference.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    partition = partition or PartitionSpec(seed=seed)
    rng = np.random.default_rng([seed, 0x11])
    w_star = rng.standard_normal(dim)
    m = n_nodes * samples_per_node
    X = rng.standard_normal((m + test_size, dim))
    y = X @ w_star + noise * rng.standard_normal(m + test_size)
    X_train, y_train, X_test, y_test = X[:m], y[:m], X[m:], y[m:]

    # label proxy for skewed partitions: decile of the target
    bins = np.quantile(y_train, np.linspace(0, 1, 11)[1:-1])
    parts = partition_indices(np.digitize(y_train, bins), n_nodes, partition)
    optimum, *_ = np.linalg.lstsq(X_train, y_train, rcond=None)
    return Task(
        name="linreg",
        datasets=_split(X_train, y_train, parts),
        test=LocalDataset(X_test, y_test),
        target=noise ** 2 * (1 + TARGET_LOSS_MARGIN),
        lower_is_better=True,
        bytes_per_param=bytes_per_param,
        optimum=optimum,
    )


def make_task_softmax_blobs(classes: int, dim: int, n_nodes: int,
                            partition: PartitionSpec | None = None, seed: int = 0,
                            samples_per_node: int = 50, separation: float = 3.0,
                            test_size: int = 2000, calibration: TrainerConfig | None = None,
                            calibration_epochs: int = 20,
                            bytes_per_param: int = DEFAULT_BYTES_PER_PARAM) -> Task:
    """Gaussian class blobs; target accuracy = centralised SGD accuracy - 0.02."""
    if classes < 2:
        raise ValueError("need at least two classes")
    partition = partition or PartitionSpec(seed=seed)
    rng = np.random.default_rng([seed, 0x22])
    centers = rng.standard_normal((classes, dim))
    centers *= separation / np.linalg.norm(centers, axis=1, keepdims=True)
    m = n_nodes * samples_per_node
    labels = rng.integers(0, classes, size=m + test_size)
    X = centers[labels] + rng.standard_normal((m + test_size, dim))
    X_train, y_train = X[:m], labels[:m]
    test = LocalDataset(X[m:], labels[m:])

    parts = partition_indices(y_train, n_nodes, partition)
    task = Task(
        name="softmax_blobs",
        datasets=_split(X_train, y_train, parts),
        test=test,
        target=math.nan,
        lower_is_better=False,
        n_classes=classes,
        bytes_per_param=bytes_per_param,
    )
    cfg = calibration or TrainerConfig(learning_rate=0.05, batch_size=20,
                                       local_epochs=calibration_epochs, seed=seed)
    central = local_train(task.initial_model(), LocalDataset(X_train, y_train), cfg, task)
    task.target = evaluate(central, test, task)[1] - 0.02
    return task


TASKS = {
    "linreg": make_task_linreg,
    "softmax_blobs": make_task_softmax_blobs,
}


def make_task(name: str, **params) -> Task:
    try:
        factory = TASKS[name]
    except KeyError:
        raise ValueError(f"unknown task {name!r}; choose from {sorted(TASKS)}") from None
    return factory(**params)
