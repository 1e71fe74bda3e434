"""Fine-tuning engines for the multi-head classifier and for linear regression.

The classifier is a single tanh hidden layer (the shared *body*) feeding one
linear softmax head per task. Every objective returns its loss together with
an analytic gradient; training is plain (mini-batch) gradient descent.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import weighting
from .exceptions import (
    AllZeroWeightsError,
    ArchitectureMismatchError,
    ConfigError,
    DimensionMismatchError,
    MissingHeadError,
    NonFiniteGradientError,
    OutOfRangeError,
)
from .seeding import derive_seed

METHODS = ("standard", "flow", "l2", "linear_probe", "wise_ft", "dro")


# --- data -------------------------------------------------------------------


@dataclass(eq=False)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    task: str = "B"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.features.ndim != 2:
            raise DimensionMismatchError("features must be an (n, d) matrix")
        if len(self.labels) != len(self.features):
            raise DimensionMismatchError("features and labels differ in length")
        if len(self.labels) == 0:
            raise OutOfRangeError("dataset is empty")

    @property
    def n(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.features[idx], self.labels[idx], self.task)


# --- model ------------------------------------------------------------------


@dataclass(eq=False)
class MultiHeadModel:
    """Shared tanh layer ``body = {W: (h, d), b: (h,)}`` plus per-task heads ``{W: (c, h), b: (c,)}``."""

    body: dict
    heads: dict = field(default_factory=dict)

    @classmethod
    def init(cls, d: int, hidden: int, classes: dict, seed: int) -> "MultiHeadModel":
        """Scaled-normal initialisation (std ``1 / sqrt(fan_in)``)."""
        rng = np.random.default_rng(seed)
        body = {"W": rng.standard_normal((hidden, d)) / math.sqrt(d), "b": np.zeros(hidden)}
        heads = {}
        for task in sorted(classes):
            heads[task] = {
                "W": rng.standard_normal((classes[task], hidden)) / math.sqrt(hidden),
                "b": np.zeros(classes[task]),
            }
        return cls(body, heads)

    @property
    def d(self) -> int:
        return self.body["W"].shape[1]

    @property
    def hidden(self) -> int:
        return self.body["W"].shape[0]

    @property
    def classes(self) -> dict:
        return {t: h["W"].shape[0] for t, h in self.heads.items()}

    def copy(self) -> "MultiHeadModel":
        return copy.deepcopy(self)

    def head(self, task) -> dict:
        try:
            return self.heads[task]
        except KeyError:
            raise MissingHeadError(f"model has no head for task {task!r}") from None

    def with_head(self, task, n_classes: int) -> "MultiHeadModel":
        """Copy with a fresh zero-initialised head for ``task``."""
        m = self.copy()
        m.heads[task] = {"W": np.zeros((n_classes, self.hidden)), "b": np.zeros(n_classes)}
        return m

    def features(self, X) -> np.ndarray:
        return np.tanh(np.asarray(X, dtype=np.float64) @ self.body["W"].T + self.body["b"])

    def logits(self, X, task) -> np.ndarray:
        h = self.head(task)
        return self.features(X) @ h["W"].T + h["b"]

    def predict(self, X, task) -> np.ndarray:
        # argmax returns the first maximum, i.e. ties go to the lowest class index
        return np.argmax(self.logits(X, task), axis=1)

    def check(self):
        for task, h in self.heads.items():
            if h["W"].shape[1] != self.hidden:
                raise ArchitectureMismatchError(f"head {task!r} width != hidden width")
        for arr in self._arrays():
            if not np.all(np.isfinite(arr)):
                raise NonFiniteGradientError("model parameters are not finite")

    def _arrays(self):
        yield self.body["W"]
        yield self.body["b"]
        for task in sorted(self.heads):
            yield self.heads[task]["W"]
            yield self.heads[task]["b"]

    def body_hash(self) -> str:
        return _hash_arrays([self.body["W"], self.body["b"]])

    def head_hash(self, task) -> str:
        h = self.head(task)
        return _hash_arrays([h["W"], h["b"]])

    def to_dict(self) -> dict:
        return {
            "dims": {"input": self.d, "hidden": self.hidden, "classes": self.classes},
            "body": _flat(self.body),
            "heads": {t: _flat(self.heads[t]) for t in sorted(self.heads)},
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "MultiHeadModel":
        dims = obj["dims"]
        d, h = int(dims["input"]), int(dims["hidden"])
        body = _unflat(obj["body"], h, d)
        heads = {t: _unflat(obj["heads"][t], int(c), h) for t, c in dims["classes"].items()}
        m = cls(body, heads)
        m.check()
        return m

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_dict(), fh)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "MultiHeadModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _flat(block) -> list:
    # row-major weights followed by biases
    return [float(v) for v in np.concatenate([block["W"].ravel(), block["b"]])]


def _unflat(values, rows, cols) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size != rows * cols + rows:
        raise ArchitectureMismatchError("checkpoint block has the wrong size")
    return {"W": arr[: rows * cols].reshape(rows, cols).copy(), "b": arr[rows * cols :].copy()}


def _hash_arrays(arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
    return h.hexdigest()


# --- objectives ---------------------------------------------------------------


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _check_labels(model, X, y, task):
    c = model.head(task)["W"].shape[0]
    y = np.asarray(y)
    if X.shape[1] != model.d:
        raise DimensionMismatchError(f"expected {model.d} features, got {X.shape[1]}")
    if y.size and (y.min() < 0 or y.max() >= c):
        raise DimensionMismatchError(f"labels outside [0, {c}) for task {task!r}")
    return y.astype(np.int64)


def per_sample_losses(model, data: LabeledDataset, task=None) -> np.ndarray:
    """Losses under frozen parameters.

    ``model`` is a :class:`MultiHeadModel` (cross-entropy on ``task``'s head)
    or a parameter vector of a linear regressor (squared error).
    """
    if isinstance(model, MultiHeadModel):
        task = data.task if task is None else task
        y = _check_labels(model, data.features, data.labels, task)
        logp = _log_softmax(model.logits(data.features, task))
        # clip the -0.0 that a perfectly confident prediction can produce
        return np.maximum(-logp[np.arange(len(y)), y], 0.0)
    theta = np.asarray(model, dtype=np.float64)
    r = data.features @ theta - np.asarray(data.labels, dtype=np.float64)
    return r**2


def mean_one(weights) -> np.ndarray:
    """Rescale non-negative weights to mean 1."""
    w = np.asarray(getattr(weights, "values", weights), dtype=np.float64)
    total = w.sum()
    if not total > 0:
        raise AllZeroWeightsError("all sample weights are zero")
    return w * (len(w) / total)


def ce_objective(model: MultiHeadModel, X, y, task, sample_weight=None, train_body=True):
    """Mean weighted cross-entropy and its gradient.

    Returns ``(loss, grads)`` where ``grads`` has keys ``"head"`` and, when
    ``train_body`` is set, ``"body"``; each maps ``"W"``/``"b"`` to arrays.
    ``sample_weight`` is used as given (no rescaling).
    """
    X = np.asarray(X, dtype=np.float64)
    y = _check_labels(model, X, y, task)
    n = len(y)
    w = np.ones(n) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    head = model.head(task)
    a = model.features(X)
    logp = _log_softmax(a @ head["W"].T + head["b"])
    loss = -float(np.dot(w, logp[np.arange(n), y])) / n
    dz = np.exp(logp)
    dz[np.arange(n), y] -= 1.0
    dz *= (w / n)[:, None]
    grads = {"head": {"W": dz.T @ a, "b": dz.sum(axis=0)}}
    if train_body:
        da = (dz @ head["W"]) * (1.0 - a**2)
        grads["body"] = {"W": da.T @ X, "b": da.sum(axis=0)}
    return loss, grads


def l2_penalty(params: dict, anchor: dict, lam: float):
    """``lam * |params - anchor|^2`` over matching arrays, and its gradient ``2 lam (params - anchor)``."""
    value = 0.0
    grad = {}
    for k in params:
        diff = params[k] - anchor[k]
        value += float(np.sum(diff**2))
        grad[k] = 2.0 * lam * diff
    return lam * value, grad


def squared_objective(theta, X, y, sample_weight=None):
    """Mean weighted squared error ``(1/n) sum w_i (y_i - <theta, x_i>)^2`` and gradient."""
    X = np.asarray(X, dtype=np.float64)
    r = X @ theta - y
    w = np.ones(len(y)) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    n = len(y)
    return float(np.dot(w, r**2)) / n, 2.0 * X.T @ (w * r) / n


def logistic_objective(theta, X, y, sample_weight=None):
    """Mean weighted binary log-loss for labels in {0, 1} and its gradient."""
    X = np.asarray(X, dtype=np.float64)
    z = X @ theta
    y = np.asarray(y, dtype=np.float64)
    w = np.ones(len(y)) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    n = len(y)
    # log(1 + exp(z)) - y z, computed without overflow
    loss = np.logaddexp(0.0, z) - y * z
    p = 0.5 * (1.0 + np.tanh(0.5 * z))
    return float(np.dot(w, loss)) / n, X.T @ (w * (p - y)) / n


# --- configuration ------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    """Hyper-parameters for one fine-tuning method.

    ``batch_size=None`` means full-batch GD. ``l2_lambda`` is required by
    ``"l2"``, ``alpha`` by ``"wise_ft"`` and ``policy`` is accepted only by
    ``"flow"`` and ``"dro"`` (defaulting to the median).
    """

    method: str = "standard"
    learning_rate: float = 0.3
    epochs: int = 30
    batch_size: int | None = 32
    seed: int = 0
    l2_lambda: float | None = None
    alpha: float | None = None
    policy: weighting.TemperaturePolicy | None = None
    probe_epochs: int | None = 100
    probe_learning_rate: float | None = 0.5
    name: str | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method: unknown method {self.method!r}; expected one of {METHODS}")
        if not (isinstance(self.learning_rate, (int, float)) and self.learning_rate > 0):
            raise ConfigError(f"learning_rate: must be > 0, got {self.learning_rate!r}")
        if not (isinstance(self.epochs, int) and self.epochs >= 1):
            raise ConfigError(f"epochs: must be an integer >= 1, got {self.epochs!r}")
        if self.batch_size is not None and not (isinstance(self.batch_size, int) and self.batch_size >= 1):
            raise ConfigError(f"batch_size: must be null or an integer >= 1, got {self.batch_size!r}")
        if self.probe_epochs is not None and not (isinstance(self.probe_epochs, int) and self.probe_epochs >= 1):
            raise ConfigError(f"probe_epochs: must be an integer >= 1, got {self.probe_epochs!r}")
        if self.probe_learning_rate is not None and not self.probe_learning_rate > 0:
            raise ConfigError(f"probe_learning_rate: must be > 0, got {self.probe_learning_rate!r}")
        if self.method == "l2":
            if self.l2_lambda is None or not self.l2_lambda >= 0:
                raise ConfigError(f"l2_lambda: must be >= 0 for method l2, got {self.l2_lambda!r}")
        elif self.l2_lambda is not None:
            raise ConfigError(f"l2_lambda: only valid for method l2, not {self.method!r}")
        if self.method == "wise_ft":
            if self.alpha is None or not 0.0 <= self.alpha <= 1.0:
                raise ConfigError(f"alpha: must lie in [0, 1] for method wise_ft, got {self.alpha!r}")
        elif self.alpha is not None:
            raise ConfigError(f"alpha: only valid for method wise_ft, not {self.method!r}")
        if self.policy is not None:
            if self.method not in ("flow", "dro"):
                raise ConfigError(f"policy: only valid for flow/dro, not {self.method!r}")
            if isinstance(self.policy, str):
                try:
                    object.__setattr__(self, "policy", weighting.TemperaturePolicy.parse(self.policy))
                except ValueError as exc:
                    raise ConfigError(f"policy: {exc}") from None

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if self.method == "l2":
            return f"l2({self.l2_lambda:g})"
        if self.method == "wise_ft":
            return f"wise_ft({self.alpha:g})"
        if self.method in ("flow", "dro") and self.policy is not None and self.policy.kind != "median":
            return f"{self.method}({self.policy})"
        return self.method

    @property
    def temperature_policy(self) -> weighting.TemperaturePolicy:
        return self.policy or weighting.TemperaturePolicy("median")

    def probe_config(self) -> "TrainConfig":
        """Full-batch settings for the head-only probing steps."""
        return TrainConfig(
            method="standard",
            learning_rate=self.probe_learning_rate or self.learning_rate,
            epochs=self.probe_epochs or self.epochs,
            batch_size=None,
            seed=self.seed,
            probe_epochs=None,
            probe_learning_rate=None,
        )

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown key in method config")
        return cls(**obj)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["policy"] = None if self.policy is None else str(self.policy)
        # None is meaningful for batch_size (full batch) and the probe fields
        optional = ("l2_lambda", "alpha", "policy", "name")
        return {k: v for k, v in out.items() if v is not None or k not in optional}


# --- training loops -----------------------------------------------------------


def _batches(n, batch_size, rng):
    if batch_size is None or batch_size >= n:
        yield np.arange(n)
        return
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def _train(model, data, task, sample_weight, cfg, train_body=True, l2_lambda=0.0):
    """GD on the mean weighted CE, optionally with a proximal l2 pull to the start point."""
    model = model.copy()
    X, y = data.features, data.labels
    rng = np.random.default_rng(derive_seed(cfg.seed, "shuffle"))
    lr = cfg.learning_rate
    anchor = model.copy() if l2_lambda > 0 else None
    shrink = 1.0 + 2.0 * lr * l2_lambda
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(cfg.epochs):
            for idx in _batches(data.n, cfg.batch_size, rng):
                _step(model, X[idx], y[idx], task, sample_weight[idx], train_body, lr, l2_lambda, anchor, shrink)
    return model


def _step(model, X, y, task, w, train_body, lr, l2_lambda, anchor, shrink):
    _, grads = ce_objective(model, X, y, task, w, train_body)
    blocks = [(model.heads[task], grads["head"], anchor.heads[task] if anchor else None)]
    if train_body:
        blocks.append((model.body, grads["body"], anchor.body if anchor else None))
    for params, g, ref in blocks:
        for k in params:
            if not np.all(np.isfinite(g[k])):
                raise NonFiniteGradientError("non-finite gradient during training")
            if ref is None:
                new = params[k] - lr * g[k]
            else:
                # implicit step on the penalty: stable for any lambda
                new = (params[k] - lr * g[k] + 2.0 * lr * l2_lambda * ref[k]) / shrink
            if not np.all(np.isfinite(new)):
                raise NonFiniteGradientError("parameters overflowed during training")
            params[k] = new


def weighted_fit(model: MultiHeadModel, data: LabeledDataset, weights, cfg: TrainConfig, task=None, train_body=True) -> MultiHeadModel:
    """Fine-tune on the weighted mean loss; weights are rescaled to mean 1 first."""
    task = data.task if task is None else task
    w = np.asarray(getattr(weights, "values", weights), dtype=np.float64)
    if w.shape != (data.n,):
        raise DimensionMismatchError(f"expected {data.n} weights, got {w.shape}")
    return _train(model, data, task, mean_one(w), cfg, train_body=train_body)


def standard_fit(model, data, cfg, task=None) -> MultiHeadModel:
    return weighted_fit(model, data, np.ones(data.n), cfg, task)


def l2_fit(model: MultiHeadModel, data: LabeledDataset, lam: float, cfg: TrainConfig, task=None) -> MultiHeadModel:
    """Standard fine-tuning plus ``lam * |theta - theta_start|^2`` on all trained parameters."""
    if not lam >= 0:
        raise OutOfRangeError(f"lambda must be >= 0, got {lam}")
    task = data.task if task is None else task
    return _train(model, data, task, np.ones(data.n), cfg, l2_lambda=float(lam))


def linear_probe(model: MultiHeadModel, data: LabeledDataset, task, cfg: TrainConfig) -> MultiHeadModel:
    """Train only ``task``'s head; the body is left bit-identical."""
    model.head(task)
    return _train(model, data, task, np.ones(data.n), cfg, train_body=False)


def wise_ft_average(pre: MultiHeadModel, fine: MultiHeadModel, alpha: float) -> MultiHeadModel:
    """Body ``alpha * pre + (1 - alpha) * fine``; heads are not averaged.

    Heads present in ``pre`` are taken from ``pre``, the rest from ``fine``.
    """
    if not 0.0 <= alpha <= 1.0:
        raise OutOfRangeError(f"alpha must lie in [0, 1], got {alpha}")
    if pre.body["W"].shape != fine.body["W"].shape:
        raise ArchitectureMismatchError("bodies have different shapes")
    heads = {t: copy.deepcopy(h) for t, h in fine.heads.items()}
    heads.update({t: copy.deepcopy(h) for t, h in pre.heads.items()})
    if alpha == 1.0:
        body = copy.deepcopy(pre.body)
    elif alpha == 0.0:
        body = copy.deepcopy(fine.body)
    else:
        body = {k: alpha * pre.body[k] + (1.0 - alpha) * fine.body[k] for k in pre.body}
    return MultiHeadModel(body, heads)


def pretrain(data: LabeledDataset, hidden: int, cfg: TrainConfig, n_classes: int | None = None) -> MultiHeadModel:
    if n_classes is None:
        n_classes = int(np.max(data.labels)) + 1
    model = MultiHeadModel.init(data.features.shape[1], hidden, {data.task: n_classes}, derive_seed(cfg.seed, "init"))
    return standard_fit(model, data, cfg)


# --- multi-head FLOW and baselines ------------------------------------------


@dataclass(eq=False)
class FineTuneResult:
    """Models for both tasks after fine-tuning, plus diagnostics."""

    model_pre_task: MultiHeadModel
    model_new_task: MultiHeadModel
    weights: np.ndarray | None = None
    tau: float | None = None
    probe_losses: np.ndarray | None = None

    def combined(self) -> MultiHeadModel:
        """One model holding the shared body and both task heads."""
        m = self.model_new_task.copy()
        m.heads.update(copy.deepcopy(self.model_pre_task.heads))
        return m


def _split(body_model, pre, pre_task, new_task, new_head_model=None):
    src = new_head_model or body_model
    m1 = MultiHeadModel(copy.deepcopy(body_model.body), {pre_task: copy.deepcopy(pre.head(pre_task))})
    m2 = MultiHeadModel(copy.deepcopy(body_model.body), {new_task: copy.deepcopy(src.head(new_task))})
    return m1, m2


def probe_new_head(pre: MultiHeadModel, data: LabeledDataset, cfg: TrainConfig, n_classes=None) -> MultiHeadModel:
    """Attach a zero-initialised head for ``data.task`` and train it on the frozen body."""
    if n_classes is None:
        n_classes = int(np.max(data.labels)) + 1
    fresh = pre.with_head(data.task, n_classes)
    return linear_probe(fresh, data, data.task, cfg.probe_config())


def _sample_weights(cfg: TrainConfig, losses):
    if cfg.method == "flow":
        tau = weighting.select_temperature(losses, cfg.temperature_policy)
        wv = weighting.compute_weights(losses, tau)
        return wv.values, wv.tau
    if cfg.method == "dro":
        tau = weighting.select_temperature(losses, cfg.temperature_policy)
        if tau is weighting.DEGENERATE_UNIFORM:
            return np.ones(len(losses)), None
        return weighting.dro_weights(losses, tau), tau
    return np.ones(len(losses)), None


def finetune_multihead(pre: MultiHeadModel, data: LabeledDataset, cfg: TrainConfig, pre_task="A", n_classes=None, probed=None) -> FineTuneResult:
    """Fine-tune ``pre`` on ``data`` with the method named in ``cfg``.

    Every full fine-tune follows the same four steps: probe a new head on
    the frozen body, weight samples by their loss under that probe
    (uniform unless the method is flow/dro), fine-tune body and head on the
    weighted loss, then re-probe the head on the new body. The original
    task keeps its pre-trained head. ``wise_ft`` averages the pre-trained
    body with the standard fine-tuned one.
    """
    new_task = data.task
    pre.head(pre_task)
    if probed is None:
        probed = probe_new_head(pre, data, cfg, n_classes)
    if cfg.method == "linear_probe":
        m1, m2 = _split(probed, pre, pre_task, new_task)
        return FineTuneResult(m1, m2)
    if cfg.method == "wise_ft":
        std = finetune_multihead(pre, data, replace(cfg, method="standard", alpha=None), pre_task, n_classes, probed)
        avg = wise_ft_average(pre, std.combined(), cfg.alpha)
        m1, m2 = _split(avg, pre, pre_task, new_task, std.model_new_task)
        return FineTuneResult(m1, m2)
    losses = per_sample_losses(probed, data, new_task)
    weights, tau = _sample_weights(cfg, losses)
    if cfg.method == "l2":
        tuned = l2_fit(probed, data, cfg.l2_lambda, cfg)
    else:
        tuned = weighted_fit(probed, data, weights, cfg)
    reprobed = linear_probe(tuned, data, new_task, cfg.probe_config())
    m1, m2 = _split(reprobed, pre, pre_task, new_task)
    return FineTuneResult(m1, m2, weights=weights, tau=tau, probe_losses=losses)


def flow_multihead(pre: MultiHeadModel, data: LabeledDataset, cfg: TrainConfig, pre_task="A", n_classes=None):
    """Multi-head FLOW; returns ``(model_for_pretrain_task, model_for_new_task)``."""
    if cfg.method != "flow":
        cfg = replace(cfg, method="flow", l2_lambda=None, alpha=None)
    res = finetune_multihead(pre, data, cfg, pre_task, n_classes)
    return res.model_pre_task, res.model_new_task


# --- finite-sample linear regression -------------------------------------


def linear_gd(X, y, theta0, eta: float, K: int, sample_weight=None) -> np.ndarray:
    """GD on the mean weighted squared error; returns iterates ``(K+1, d)``."""
    theta = np.asarray(theta0, dtype=np.float64).copy()
    out = [theta.copy()]
    for _ in range(K):
        _, g = squared_objective(theta, X, y, sample_weight)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError("non-finite gradient during linear GD")
        theta = theta - eta * g
        out.append(theta.copy())
    return np.array(out)


def empirical_flow_linear(spec, n: int, tau: float, eta: float | None, K: int, seed: int):
    """Finite-sample weighted least squares started at the pre-trained parameters.

    Inputs come from :func:`~flowlab.linear_theory.basis_sampler` with
    noise-free labels. The weights ``exp(-(y - <theta_pre, x>)^2 / tau)``
    are used raw, so the population limit of the gradient is exactly
    ``2 Sigma' (theta - theta_ft)``. ``eta=None`` picks ``1 / (2 mu)``.
    """
    from . import linear_theory as lt

    if n < spec.d:
        raise OutOfRangeError(f"need n >= d, got n={n}, d={spec.d}")
    X = lt.basis_sampler(spec, n, seed)
    y = X @ spec.theta_ft
    if math.isinf(tau):
        w = np.ones(n)
    else:
        w = np.exp(-((y - X @ spec.theta_pre) ** 2) / tau)
    if eta is None:
        eta = 1.0 / (2.0 * lt.mu_from_tau(tau, spec.gap_norm)) if math.isfinite(tau) else 0.5
    thetas = linear_gd(X, y, spec.theta_pre, eta, K, w)
    traj = lt.trajectory_from_thetas(spec, "flow_empirical", eta, thetas, tau=tau)
    traj.extra["weights"] = w
    return traj
