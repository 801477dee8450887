"""Mini-batch SGD estimators for the synthetic workloads.

Both estimators follow the scikit-learn conventions (constructor stores
hyperparameters only, ``fit`` returns ``self``, learned state ends with an
underscore) so they can be dropped into pipelines and grid searches.  The
flat parameter vector ``params_`` is what nodes exchange.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y


class TrainingDiverged(FloatingPointError):
    pass


def squared_loss(params, X, y):
    residual = X @ params - y
    return float(np.mean(residual ** 2))


def squared_loss_grad(params, X, y):
    residual = X @ params - y
    return (2.0 / X.shape[0]) * (X.T @ residual)


def _with_bias(X):
    return np.hstack([X, np.ones((X.shape[0], 1))])


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def softmax_loss(params, X, y, n_classes):
    W = params.reshape(n_classes, X.shape[1] + 1)
    logits = _with_bias(X) @ W.T
    logits -= logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(logits).sum(axis=1))
    return float(np.mean(log_norm - logits[np.arange(len(y)), y]))


def softmax_loss_grad(params, X, y, n_classes):
    Xb = _with_bias(X)
    W = params.reshape(n_classes, Xb.shape[1])
    P = _softmax(Xb @ W.T)
    P[np.arange(len(y)), y] -= 1.0
    return (P.T @ Xb).ravel() / X.shape[0]


class _MiniBatchSGD(BaseEstimator):
    def __init__(self, learning_rate=0.05, batch_size=20, epochs=1, momentum=0.0,
                 random_state=None):
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.momentum = momentum
        self.random_state = random_state

    def _check_hyperparams(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1 (or None for full batch)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")

    def _run_sgd(self, params, X, y):
        self._check_hyperparams()
        rng = np.random.default_rng(self.random_state)
        m = X.shape[0]
        batch = m if self.batch_size is None else min(self.batch_size, m)
        velocity = np.zeros_like(params)
        with np.errstate(over="ignore", invalid="ignore"):
            params = self._epochs(params, X, y, rng, batch, velocity)
            loss = self._loss(params, X, y)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite training loss (learning_rate={self.learning_rate})")
        return params

    def _epochs(self, params, X, y, rng, batch, velocity):
        m = X.shape[0]
        for _ in range(self.epochs):
            order = rng.permutation(m)
            for start in range(0, m, batch):
                idx = order[start:start + batch]
                grad = self._gradient(params, X[idx], y[idx])
                if not np.all(np.isfinite(grad)):
                    raise TrainingDiverged(
                        f"non-finite gradient (learning_rate={self.learning_rate})")
                if self.momentum:
                    velocity = self.momentum * velocity + grad
                    params = params - self.learning_rate * velocity
                else:
                    params = params - self.learning_rate * grad
        return params

    def fit(self, X, y, params_init=None):
        X, y = self._validate(X, y)
        params = self._init_params(X, y) if params_init is None else np.array(params_init, dtype=float)
        if params.shape != (self._n_params(X.shape[1]),):
            raise ValueError(f"params_init has shape {params.shape}, expected "
                             f"({self._n_params(X.shape[1])},)")
        self.params_ = self._run_sgd(params, X, y)
        self.n_features_in_ = X.shape[1]
        return self

    def loss(self, X, y):
        check_is_fitted(self, "params_")
        X, y = self._validate(X, y)
        return self._loss(self.params_, X, y)


class SGDLinearRegression(RegressorMixin, _MiniBatchSGD):
    """Least-squares linear model without intercept, trained by mini-batch SGD."""

    def _validate(self, X, y):
        return check_X_y(X, y, dtype=np.float64, y_numeric=True)

    def _n_params(self, n_features):
        return n_features

    def _init_params(self, X, y):
        return np.zeros(X.shape[1])

    def _loss(self, params, X, y):
        return squared_loss(params, X, y)

    def _gradient(self, params, X, y):
        return squared_loss_grad(params, X, y)

    def predict(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        return X @ self.params_


class SGDSoftmaxClassifier(ClassifierMixin, _MiniBatchSGD):
    """Multinomial logistic regression over integer labels ``0..n_classes-1``."""

    def __init__(self, n_classes=2, learning_rate=0.05, batch_size=20, epochs=1, momentum=0.0,
                 random_state=None):
        super().__init__(learning_rate=learning_rate, batch_size=batch_size, epochs=epochs,
                         momentum=momentum, random_state=random_state)
        self.n_classes = n_classes

    def _validate(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        y = y.astype(np.int64)
        if y.min() < 0 or y.max() >= self.n_classes:
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        return X, y

    def _n_params(self, n_features):
        return self.n_classes * (n_features + 1)

    def _init_params(self, X, y):
        return np.zeros(self._n_params(X.shape[1]))

    def _loss(self, params, X, y):
        return softmax_loss(params, X, y, self.n_classes)

    def _gradient(self, params, X, y):
        return softmax_loss_grad(params, X, y, self.n_classes)

    @property
    def classes_(self):
        return np.arange(self.n_classes)

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        W = self.params_.reshape(self.n_classes, X.shape[1] + 1)
        return _with_bias(X) @ W.T

    def predict(self, X):
        return np.argmax(self.decision_function(X), axis=1)

    def predict_proba(self, X):
        return _softmax(self.decision_function(X))
