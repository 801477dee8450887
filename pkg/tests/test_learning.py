import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from modest.learning import (
    LocalDataset,
    Model,
    PartitionSpec,
    SGDLinearRegression,
    SGDSoftmaxClassifier,
    TrainerConfig,
    TrainingDiverged,
    aggregate_models,
    evaluate,
    local_train,
    make_task,
    make_task_linreg,
    make_task_softmax_blobs,
    partition_indices,
)
from modest.learning.estimators import softmax_loss, softmax_loss_grad, squared_loss, squared_loss_grad


def central_diff(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


def test_model_is_immutable_and_sized():
    m = Model(np.array([1.0, 2.0, 3.0]))
    assert m.byte_size == 12
    with pytest.raises(ValueError):
        m.params[0] = 5
    with pytest.raises(ValueError):
        Model(np.array([np.nan]))
    with pytest.raises(ValueError):
        Model(np.zeros((2, 2)))


def test_aggregate_models():
    out = aggregate_models([Model(np.array([1.0, 3.0])), Model(np.array([3.0, 5.0]))])
    assert out == Model(np.array([2.0, 4.0]))
    with pytest.raises(ValueError):
        aggregate_models([])
    with pytest.raises(ValueError):
        aggregate_models([Model(np.zeros(2)), Model(np.zeros(3))])


def test_squared_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    X, y, w = rng.normal(size=(30, 5)), rng.normal(size=30), rng.normal(size=5)
    assert rel_err(squared_loss_grad(w, X, y), central_diff(lambda p: squared_loss(p, X, y), w)) < 1e-6


def test_softmax_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    X, y = rng.normal(size=(25, 4)), rng.integers(0, 3, size=25)
    w = rng.normal(size=3 * 5)
    numeric = central_diff(lambda p: softmax_loss(p, X, y, 3), w)
    assert rel_err(softmax_loss_grad(w, X, y, 3), numeric) < 1e-6


def test_linear_estimator_api():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(200, 3))
    y = X @ np.array([1.0, -2.0, 0.5])
    est = SGDLinearRegression(learning_rate=0.1, batch_size=10, epochs=30, random_state=0)
    assert clone(est).get_params() == est.get_params()
    with pytest.raises(NotFittedError):
        est.predict(X)
    est.fit(X, y)
    assert est.params_ == pytest.approx([1.0, -2.0, 0.5], abs=1e-3)
    assert est.score(X, y) > 0.999
    with pytest.raises(ValueError):
        est.fit(X, y[:-1])


def test_softmax_estimator_api():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 3, size=300)
    centers = np.array([[3.0, 0], [0, 3.0], [-3.0, -3.0]])
    X = centers[y] + rng.normal(size=(300, 2))
    est = SGDSoftmaxClassifier(n_classes=3, learning_rate=0.1, epochs=10, random_state=0).fit(X, y)
    proba = est.predict_proba(X)
    assert np.allclose(proba.sum(axis=1), 1)
    assert list(est.classes_) == [0, 1, 2]
    assert est.score(X, y) > 0.95
    assert est.get_params()["n_classes"] == 3


def test_params_init_shape_checked():
    X, y = np.ones((4, 2)), np.ones(4)
    with pytest.raises(ValueError):
        SGDLinearRegression().fit(X, y, params_init=np.zeros(3))


def test_bad_hyperparameters():
    X, y = np.ones((4, 2)), np.ones(4)
    for kw in ({"learning_rate": -1}, {"batch_size": 0}, {"epochs": 0}, {"momentum": 1.0}):
        with pytest.raises(ValueError):
            SGDLinearRegression(**kw).fit(X, y)


def test_divergence_is_reported():
    rng = np.random.default_rng(0)
    X, y = 100 * rng.normal(size=(50, 3)), rng.normal(size=50)
    with pytest.raises(TrainingDiverged):
        SGDLinearRegression(learning_rate=10.0, epochs=50, random_state=0).fit(X, y)


def test_zero_learning_rate_is_identity():
    task = make_task_linreg(4, 3, 10, 0.1)
    m = task.initial_model(scale=1.0)
    out = local_train(m, task.datasets[0], TrainerConfig(learning_rate=0.0), task)
    assert out == m


def test_local_train_full_batch_step_is_gradient_step():
    task = make_task_linreg(5, 2, 15, 0.3, seed=4)
    data = task.datasets[0]
    m = task.initial_model(seed=1, scale=1.0)
    out = local_train(m, data, TrainerConfig(learning_rate=0.1, batch_size=None), task)
    expected = m.params - 0.1 * squared_loss_grad(m.params, data.X, data.y)
    assert np.allclose(out.params, expected, rtol=0, atol=1e-12)


def test_trainer_is_deterministic_per_node_and_round():
    task = make_task_linreg(5, 4, 30, 0.3)
    train = task.make_trainer(TrainerConfig(batch_size=5, seed=3))
    m = task.initial_model()
    assert train(m, 1, 2) == train(m, 1, 2)
    assert train(m, 1, 2) != train(m, 1, 3)


def test_evaluate_linreg_and_softmax():
    task = make_task_linreg(3, 4, 200, 0.5)
    loss, metric = evaluate(Model(task.optimum), task.test, task)
    assert loss == metric
    assert loss < task.target
    blobs = make_task_softmax_blobs(3, 4, 5, seed=1)
    assert blobs.n_params == 3 * 5
    _, acc = evaluate(blobs.initial_model(), blobs.test, blobs)
    assert 0 <= acc <= 1
    assert 0.5 < blobs.target < 1


def test_iid_partition_covers_everything_once():
    parts = partition_indices(np.zeros(103), 10, PartitionSpec("iid", seed=1))
    flat = np.concatenate(parts)
    assert sorted(flat) == list(range(103))
    assert {len(p) for p in parts} <= {10, 11}


def test_dirichlet_partition_is_skewed_and_complete():
    labels = np.repeat(np.arange(5), 200)
    parts = partition_indices(labels, 20, PartitionSpec("dirichlet", alpha=0.1, seed=0))
    assert sorted(np.concatenate(parts)) == list(range(1000))
    assert min(len(p) for p in parts) >= 2
    dominant = np.mean([np.bincount(labels[p], minlength=5).max() / len(p) for p in parts])
    iid = partition_indices(labels, 20, PartitionSpec("iid", seed=0))
    dominant_iid = np.mean([np.bincount(labels[p], minlength=5).max() / len(p) for p in iid])
    assert dominant > dominant_iid + 0.2


def test_partition_rejects_bad_input():
    with pytest.raises(ValueError):
        partition_indices(np.zeros(5), 10, PartitionSpec())
    with pytest.raises(ValueError):
        PartitionSpec("pathological")
    with pytest.raises(ValueError):
        PartitionSpec("dirichlet", alpha=0)


def test_task_registry():
    assert make_task("linreg", dim=2, n_nodes=3, samples_per_node=5, noise=0.1).dim == 2
    with pytest.raises(ValueError):
        make_task("resnet")


def test_local_dataset_validation():
    with pytest.raises(ValueError):
        LocalDataset(np.zeros((0, 2)), np.zeros(0))
    with pytest.raises(ValueError):
        LocalDataset(np.zeros((3, 2)), np.zeros(2))
