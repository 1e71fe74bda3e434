"""Two-task synthetic forgetting benchmark and method comparison reports."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import weighting
from .exceptions import ConfigError, DimensionMismatchError, OutOfRangeError
from .seeding import derive_seed
from .trainers import (
    FineTuneResult,
    LabeledDataset,
    MultiHeadModel,
    TrainConfig,
    finetune_multihead,
    per_sample_losses,
    pretrain,
    probe_new_head,
    wise_ft_average,
)

REPORT_COLUMNS = ["method", "pretrain_acc", "target_acc", "average", "delta_pre", "delta_target", "hard_acc"]


@dataclass(frozen=True)
class BenchmarkSpec:
    """Gaussian class blobs for task A; task B rotates and shifts the class means.

    ``separation`` is the pairwise distance between class means (in units of
    the input space); ``noise`` is the per-coordinate standard deviation.
    """

    d: int = 16
    n_classes: int = 4
    n_train: int = 2000
    n_test: int = 2000
    rotation: float = math.pi / 4
    shift: float = 1.5
    noise: float = 1.0
    separation: float = 4.0
    hidden: int = 32
    hard_fraction: float = 0.1
    seed: int = 0
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=0.5, epochs=300, batch_size=None))

    def __post_init__(self):
        for name in ("d", "n_classes", "n_train", "n_test", "hidden"):
            v = getattr(self, name)
            if not (isinstance(v, int) and v >= 1):
                raise ConfigError(f"{name}: must be an integer >= 1, got {v!r}")
        if self.d < 2:
            raise ConfigError("d: must be >= 2 for a rotation")
        if not 0.0 <= self.rotation <= math.pi:
            raise ConfigError(f"rotation: must lie in [0, pi], got {self.rotation!r}")
        if not self.noise > 0:
            raise ConfigError(f"noise: must be > 0, got {self.noise!r}")
        if not self.separation >= 0 or not self.shift >= 0:
            raise ConfigError("separation/shift: must be >= 0")
        if not 0.0 < self.hard_fraction <= 1.0:
            raise ConfigError(f"hard_fraction: must lie in (0, 1], got {self.hard_fraction!r}")
        if isinstance(self.pretrain, dict):
            object.__setattr__(self, "pretrain", TrainConfig.from_dict(self.pretrain))

    @classmethod
    def from_dict(cls, obj: dict) -> "BenchmarkSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ConfigError(f"benchmark.{unknown[0]}: unknown key")
        try:
            return cls(**obj)
        except ConfigError as exc:
            raise ConfigError(f"benchmark.{exc}") from None

    def to_dict(self) -> dict:
        out = asdict(self)
        out["pretrain"] = self.pretrain.to_dict()
        return out

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass(eq=False)
class TwoTaskData:
    train_a: LabeledDataset
    test_a: LabeledDataset
    train_b: LabeledDataset
    test_b: LabeledDataset
    means_a: np.ndarray
    means_b: np.ndarray


def _rotation(d, angle):
    """Rotate every coordinate pair (0,1), (2,3), ... by ``angle``."""
    R = np.eye(d)
    c, s = math.cos(angle), math.sin(angle)
    for i in range(0, d - 1, 2):
        R[i : i + 2, i : i + 2] = [[c, -s], [s, c]]
    return R


def _draw(rng, means, n, noise, task):
    c, d = means.shape
    labels = np.arange(n) % c
    rng.shuffle(labels)
    X = means[labels] + noise * rng.standard_normal((n, d))
    return LabeledDataset(X, labels, task)


def gen_two_task_benchmark(spec: BenchmarkSpec) -> TwoTaskData:
    rng = np.random.default_rng(derive_seed(spec.seed, "task"))
    d, c = spec.d, spec.n_classes
    # orthonormal directions scaled so every pair of means is `separation` apart
    q, _ = np.linalg.qr(rng.standard_normal((d, max(c, 1))))
    means_a = (spec.separation / math.sqrt(2)) * q[:, :c].T if c <= d else rng.standard_normal((c, d)) * spec.separation / 2
    u = rng.standard_normal(d)
    u /= np.linalg.norm(u)
    means_b = means_a @ _rotation(d, spec.rotation).T + spec.shift * u
    data_rng = np.random.default_rng(derive_seed(spec.seed, "data"))
    return TwoTaskData(
        train_a=_draw(data_rng, means_a, spec.n_train, spec.noise, "A"),
        test_a=_draw(data_rng, means_a, spec.n_test, spec.noise, "A"),
        train_b=_draw(data_rng, means_b, spec.n_train, spec.noise, "B"),
        test_b=_draw(data_rng, means_b, spec.n_test, spec.noise, "B"),
        means_a=means_a,
        means_b=means_b,
    )


# --- evaluation -------------------------------------------------------------


def evaluate(model: MultiHeadModel, data: LabeledDataset, task=None) -> float:
    """Top-1 accuracy; ties go to the lowest class index."""
    task = data.task if task is None else task
    pred = model.predict(data.features, task)
    return float(np.mean(pred == data.labels))


def hardest_indices(losses, fraction: float) -> np.ndarray:
    """Indices of the ``ceil(fraction * n)`` largest losses; ties favour lower indices."""
    losses = np.asarray(losses, dtype=np.float64)
    if not 0.0 < fraction <= 1.0:
        raise OutOfRangeError(f"fraction must lie in (0, 1], got {fraction}")
    k = math.ceil(fraction * len(losses) - 1e-9)
    order = np.lexsort((np.arange(len(losses)), -losses))
    return np.sort(order[:k])


def hard_sample_accuracy(model: MultiHeadModel, data: LabeledDataset, losses, fraction: float = 0.1, task=None) -> float:
    losses = np.asarray(losses)
    if losses.shape != (data.n,):
        raise DimensionMismatchError(f"expected {data.n} losses, got {losses.shape}")
    return evaluate(model, data.subset(hardest_indices(losses, fraction)), task)


# --- reports ----------------------------------------------------------------


@dataclass
class MethodRow:
    method: str
    pretrain_acc: float
    target_acc: float
    hard_acc: float
    delta_pre: float = 0.0
    delta_target: float = 0.0

    @property
    def average(self) -> float:
        return (self.pretrain_acc + self.target_acc) / 2

    def as_dict(self) -> dict:
        return {
            "method": self.method,
            "pretrain_acc": self.pretrain_acc,
            "target_acc": self.target_acc,
            "average": self.average,
            "delta_pre": self.delta_pre,
            "delta_target": self.delta_target,
            "hard_acc": self.hard_acc,
        }


@dataclass
class EvalReport:
    """Per-method accuracies keyed by method label.

    ``delta_pre`` is measured against the pre-trained model's task-A
    accuracy and ``delta_target`` against standard fine-tuning's target
    accuracy (zero when no standard run is present).
    """

    rows: dict
    reference_pretrain_acc: float
    reference_target_acc: float | None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.refresh_deltas()

    def refresh_deltas(self):
        for row in self.rows.values():
            row.delta_pre = row.pretrain_acc - self.reference_pretrain_acc
            ref = self.reference_target_acc
            row.delta_target = 0.0 if ref is None else row.target_acc - ref

    def __getitem__(self, method) -> MethodRow:
        return self.rows[method]

    def ordered(self):
        return [self.rows[k] for k in self.metadata.get("order", sorted(self.rows))]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for row in self.ordered():
            d = row.as_dict()
            w.writerow([d["method"]] + [repr(float(d[c])) for c in REPORT_COLUMNS[1:]])
        return buf.getvalue()

    def to_json(self) -> str:
        obj = {
            "rows": [r.as_dict() for r in self.ordered()],
            "reference": {"pretrain_acc": self.reference_pretrain_acc, "target_acc": self.reference_target_acc},
            "metadata": self.metadata,
        }
        return json.dumps(obj, indent=2, sort_keys=True) + "\n"


@dataclass(eq=False)
class ComparisonRun:
    """Everything produced by :func:`run_comparison`, kept for sweeps."""

    report: EvalReport
    pretrained: MultiHeadModel
    data: TwoTaskData
    results: dict
    test_losses: np.ndarray


def _row(label, res: FineTuneResult, data: TwoTaskData, test_losses, fraction) -> MethodRow:
    return MethodRow(
        method=label,
        pretrain_acc=evaluate(res.model_pre_task, data.test_a, "A"),
        target_acc=evaluate(res.model_new_task, data.test_b, "B"),
        hard_acc=hard_sample_accuracy(res.model_new_task, data.test_b, test_losses, fraction, "B"),
    )


def _pretrained(bench: BenchmarkSpec, data: TwoTaskData) -> MultiHeadModel:
    cfg = replace(bench.pretrain, seed=derive_seed(bench.seed, "pretrain") % (2**31))
    return pretrain(data.train_a, bench.hidden, cfg, bench.n_classes)


def run_comparison(bench: BenchmarkSpec, methods, *, keep=False):
    """Pre-train on task A, fine-tune on task B with every method, evaluate both tasks.

    Task-A accuracy always uses the pre-trained task-A head on the method's
    (possibly updated) body. Hard-sample accuracy is measured on the task-B
    test samples with the highest loss under the pre-trained body plus a
    probed task-B head. Returns an :class:`EvalReport`, or a
    :class:`ComparisonRun` when ``keep`` is set.
    """
    methods = list(methods)
    if not methods:
        raise ConfigError("methods: at least one method is required")
    labels = [m.label for m in methods]
    if len(set(labels)) != len(labels):
        raise ConfigError(f"methods: duplicate method labels {labels}")
    data = gen_two_task_benchmark(bench)
    pre = _pretrained(bench, data)
    ref_pre = evaluate(pre, data.test_a, "A")

    probe_cfg = methods[0].probe_config()
    probed = probe_new_head(pre, data.train_b, probe_cfg, bench.n_classes)
    test_losses = per_sample_losses(probed, data.test_b, "B")

    rows, results = {}, {}
    for cfg in methods:
        reuse = probed if cfg.probe_config() == probe_cfg else None
        res = finetune_multihead(pre, data.train_b, cfg, "A", bench.n_classes, probed=reuse)
        results[cfg.label] = res
        rows[cfg.label] = _row(cfg.label, res, data, test_losses, bench.hard_fraction)
    ref_target = rows["standard"].target_acc if "standard" in rows else None
    report = EvalReport(
        rows,
        ref_pre,
        ref_target,
        metadata={
            "order": labels,
            "benchmark": bench.to_dict(),
            "spec_hash": bench.digest(),
            "methods": [m.to_dict() for m in methods],
            "seed": bench.seed,
        },
    )
    if keep:
        return ComparisonRun(report, pre, data, results, test_losses)
    return report


def averaging_sweep(pre: MultiHeadModel, fine: MultiHeadModel, alphas, data: TwoTaskData, test_losses=None, fraction=0.1):
    """Evaluate ``wise_ft_average(pre, fine, alpha)`` for each alpha.

    ``fine`` must carry the task-B head; the task-A head always comes from
    ``pre``. ``alpha = 1`` reproduces the pre-trained body and ``alpha = 0``
    the fine-tuned one.
    """
    alphas = [float(a) for a in alphas]
    for a in alphas:
        if not 0.0 <= a <= 1.0:
            raise OutOfRangeError(f"alpha must lie in [0, 1], got {a}")
    if test_losses is None:
        test_losses = np.zeros(data.test_b.n)
    out = []
    for a in alphas:
        m = wise_ft_average(pre, fine, a)
        row = MethodRow(
            method=f"alpha={a:g}",
            pretrain_acc=evaluate(m, data.test_a, "A"),
            target_acc=evaluate(m, data.test_b, "B"),
            hard_acc=hard_sample_accuracy(m, data.test_b, test_losses, fraction, "B"),
        )
        out.append((a, row))
    return out


def tau_ablation(bench: BenchmarkSpec, percentiles, base: TrainConfig | None = None):
    """Run FLOW with ``Percentile(p)`` temperatures; returns an :class:`EvalReport`.

    Rows are labelled ``p=<p>``; ``p=50`` uses the same temperature as the
    median policy.
    """
    percentiles = [float(p) for p in percentiles]
    for p in percentiles:
        if not 0.0 < p < 100.0:
            raise OutOfRangeError(f"percentile must lie in (0, 100), got {p}")
    base = base or TrainConfig(method="flow")
    methods = [
        replace(base, method="flow", policy=weighting.TemperaturePolicy("percentile", p), name=f"p={p:g}", l2_lambda=None, alpha=None)
        for p in percentiles
    ]
    return run_comparison(bench, methods)
