"""scikit-learn style wrappers around the weighting and training routines."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import weighting as wt
from .trainers import (
    LabeledDataset,
    MultiHeadModel,
    TrainConfig,
    finetune_multihead,
    linear_gd,
    pretrain,
    squared_objective,
)


class FlowWeighter(TransformerMixin, BaseEstimator):
    """Map per-sample losses to weights ``exp(-loss / tau)``.

    ``fit`` picks tau from the losses with ``policy``; ``transform`` applies
    that tau to any loss vector. Input is a 1-D loss array or an ``(n, 1)``
    column.
    """

    def __init__(self, policy="median", normalize=False):
        self.policy = policy
        self.normalize = normalize

    def fit(self, X, y=None):
        losses = wt.check_losses(X)
        policy = self.policy if isinstance(self.policy, wt.TemperaturePolicy) else wt.TemperaturePolicy.parse(self.policy)
        tau = wt.select_temperature(losses, policy)
        self.degenerate_ = tau is wt.DEGENERATE_UNIFORM
        self.tau_ = None if self.degenerate_ else float(tau)
        self.n_features_in_ = 1
        return self

    def transform(self, X):
        check_is_fitted(self, "degenerate_")
        losses = wt.check_losses(X)
        tau = wt.DEGENERATE_UNIFORM if self.degenerate_ else self.tau_
        w = wt.compute_weights(losses, tau).values
        return wt.normalize_weights(w) if self.normalize else w


class WeightedLinearRegression(RegressorMixin, BaseEstimator):
    """Least squares by plain gradient descent from ``coef_init``, with optional sample weights."""

    def __init__(self, learning_rate=0.1, n_iter=200, coef_init=None):
        self.learning_rate = learning_rate
        self.n_iter = n_iter
        self.coef_init = coef_init

    def fit(self, X, y, sample_weight=None):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        theta0 = np.zeros(X.shape[1]) if self.coef_init is None else np.asarray(self.coef_init, float)
        if theta0.shape != (X.shape[1],):
            raise ValueError(f"coef_init has shape {theta0.shape}, expected ({X.shape[1]},)")
        traj = linear_gd(X, y, theta0, self.learning_rate, self.n_iter, sample_weight)
        self.coef_ = traj[-1]
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        return check_array(X, dtype=np.float64) @ self.coef_


class FlowLinearRegression(WeightedLinearRegression):
    """Fine-tune a pre-trained linear model with loss-based sample weights.

    Losses are squared errors of ``coef_init`` (the pre-trained parameters,
    required); weights follow ``policy`` and are rescaled to mean 1.
    """

    def __init__(self, learning_rate=0.1, n_iter=200, coef_init=None, policy="median"):
        super().__init__(learning_rate=learning_rate, n_iter=n_iter, coef_init=coef_init)
        self.policy = policy

    def fit(self, X, y, sample_weight=None):
        if self.coef_init is None:
            raise ValueError("coef_init (the pre-trained parameters) is required")
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        losses = (X @ np.asarray(self.coef_init, float) - y) ** 2
        self.weighter_ = FlowWeighter(self.policy).fit(losses)
        w = self.weighter_.transform(losses)
        w = w * (len(w) / w.sum())
        if sample_weight is not None:
            w = w * np.asarray(sample_weight, float)
        self.sample_weight_ = w
        return super().fit(X, y, w)

    def loss(self, X, y):
        check_is_fitted(self, "coef_")
        return squared_objective(self.coef_, check_array(X, dtype=np.float64), np.asarray(y, float))[0]


def _train_config(est, method, **extra):
    return TrainConfig(
        method=method,
        learning_rate=est.learning_rate,
        epochs=est.epochs,
        batch_size=est.batch_size,
        seed=est.seed,
        **extra,
    )


class MultiHeadMLPClassifier(ClassifierMixin, BaseEstimator):
    """One-hidden-layer tanh network trained on a single task (the pre-training stage).

    Labels must be integers ``0..C-1``. The fitted network is ``model_``,
    whose head is stored under ``task``.
    """

    def __init__(self, hidden=32, learning_rate=0.5, epochs=300, batch_size=None, seed=0, task="A"):
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.task = task

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        y = np.asarray(y)
        if not np.issubdtype(y.dtype, np.integer) or y.min() < 0:
            raise ValueError("labels must be non-negative integers")
        self.classes_ = np.arange(int(y.max()) + 1)
        cfg = _train_config(self, "standard")
        self.model_ = pretrain(LabeledDataset(X, y, self.task), self.hidden, cfg, len(self.classes_))
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return self.model_.logits(check_array(X, dtype=np.float64), self.task)

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict(check_array(X, dtype=np.float64), self.task)


class FlowFineTuner(ClassifierMixin, BaseEstimator):
    """Fine-tune a pre-trained multi-head network on a new task.

    ``base`` is a fitted :class:`MultiHeadMLPClassifier` or a
    :class:`~flowlab.trainers.MultiHeadModel`. ``method`` is any trainer
    method; the default ``"flow"`` upweights samples the pre-trained model
    already fits well. After ``fit``, ``predict`` targets the new task and
    ``predict_pretrain_task`` uses the original head on the updated body.
    """

    def __init__(
        self,
        base=None,
        method="flow",
        learning_rate=0.3,
        epochs=30,
        batch_size=32,
        seed=0,
        policy=None,
        l2_lambda=None,
        alpha=None,
        probe_epochs=100,
        probe_learning_rate=0.5,
        pre_task="A",
        task="B",
    ):
        self.base = base
        self.method = method
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.policy = policy
        self.l2_lambda = l2_lambda
        self.alpha = alpha
        self.probe_epochs = probe_epochs
        self.probe_learning_rate = probe_learning_rate
        self.pre_task = pre_task
        self.task = task

    def _base_model(self) -> MultiHeadModel:
        base = self.base
        if isinstance(base, MultiHeadMLPClassifier):
            check_is_fitted(base, "model_")
            base = base.model_
        if not isinstance(base, MultiHeadModel):
            raise ValueError("base must be a fitted MultiHeadMLPClassifier or a MultiHeadModel")
        return base

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        y = np.asarray(y)
        if not np.issubdtype(y.dtype, np.integer) or y.min() < 0:
            raise ValueError("labels must be non-negative integers")
        pre = self._base_model()
        if self.task in pre.heads:
            raise ValueError(f"base already has a head named {self.task!r}")
        self.classes_ = np.arange(int(y.max()) + 1)
        cfg = _train_config(
            self,
            self.method,
            policy=self.policy,
            l2_lambda=self.l2_lambda,
            alpha=self.alpha,
            probe_epochs=self.probe_epochs,
            probe_learning_rate=self.probe_learning_rate,
        )
        self.result_ = finetune_multihead(pre, LabeledDataset(X, y, self.task), cfg, self.pre_task, len(self.classes_))
        self.model_ = self.result_.combined()
        self.sample_weight_ = self.result_.weights
        self.tau_ = self.result_.tau
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict(check_array(X, dtype=np.float64), self.task)

    def predict_pretrain_task(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict(check_array(X, dtype=np.float64), self.pre_task)

    def score_pretrain_task(self, X, y):
        return float(np.mean(self.predict_pretrain_task(X) == np.asarray(y)))
