"""Loss-oriented sample weights.

Weights are ``exp(-loss / tau)`` computed once from the frozen pre-trained
model's per-sample losses. Normalised onto the simplex they are the exact
minimiser of the entropy-regularised objective ``entropic_objective``; the
distributionally robust inner maximiser (``dro_weights``) is the mirror image
and is kept for contrast experiments.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .exceptions import (
    AllZeroWeightsError,
    DimensionMismatchError,
    EmptyInputError,
    NonFiniteLossError,
    NonPositiveTemperatureError,
    OutOfRangeError,
)

__all__ = [
    "DEGENERATE_UNIFORM",
    "TemperaturePolicy",
    "WeightVector",
    "check_losses",
    "select_temperature",
    "compute_weights",
    "normalize_weights",
    "entropic_objective",
    "dro_weights",
    "flow_weights",
    "read_losses_csv",
    "write_losses_csv",
    "write_weights",
    "read_weights",
]


class _DegenerateUniform:
    """Sentinel: every loss is zero, so every sample gets weight one."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "DEGENERATE_UNIFORM"

    def __reduce__(self):
        return (_DegenerateUniform, ())


DEGENERATE_UNIFORM = _DegenerateUniform()

Temperature = Union[float, _DegenerateUniform]


@dataclass(frozen=True)
class TemperaturePolicy:
    """How to pick ``tau`` from a loss vector.

    ``kind`` is ``"median"``, ``"percentile"`` or ``"fixed"``; ``value`` holds
    the percentile in (0, 100) or the fixed temperature.
    """

    kind: str = "median"
    value: float | None = None

    def __post_init__(self):
        if self.kind == "median":
            if self.value is not None:
                raise OutOfRangeError("median policy takes no value")
        elif self.kind == "percentile":
            if self.value is None or not 0.0 < float(self.value) < 100.0:
                raise OutOfRangeError(
                    f"percentile must lie strictly in (0, 100), got {self.value!r}"
                )
        elif self.kind == "fixed":
            if self.value is None or not float(self.value) > 0.0 or not math.isfinite(self.value):
                raise NonPositiveTemperatureError(
                    f"fixed temperature must be finite and > 0, got {self.value!r}"
                )
        else:
            raise OutOfRangeError(f"unknown temperature policy {self.kind!r}")

    @classmethod
    def parse(cls, text: str) -> "TemperaturePolicy":
        """Parse ``median``, ``percentile:<p>`` or ``fixed:<tau>``."""
        text = text.strip().lower()
        if text == "median":
            return cls("median")
        kind, sep, arg = text.partition(":")
        if not sep or kind not in ("percentile", "fixed"):
            raise OutOfRangeError(f"cannot parse temperature policy {text!r}")
        try:
            value = float(arg)
        except ValueError:
            raise OutOfRangeError(f"cannot parse temperature policy {text!r}") from None
        return cls(kind, value)

    def __str__(self):
        if self.kind == "median":
            return "median"
        return f"{self.kind}:{self.value:g}"


@dataclass(frozen=True)
class WeightVector:
    values: np.ndarray
    tau: float | None  # None when the degenerate all-zero-loss rule fired

    def __len__(self):
        return len(self.values)


def check_losses(losses) -> np.ndarray:
    """Validate a loss vector and return it as a float64 array."""
    arr = np.asarray(losses, dtype=np.float64)
    if arr.ndim == 2 and arr.shape[1] == 1:
        arr = arr[:, 0]
    if arr.ndim != 1:
        raise DimensionMismatchError(f"losses must be 1-D, got shape {arr.shape}")
    if arr.size == 0:
        raise EmptyInputError("loss vector is empty")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteLossError("loss vector contains NaN or inf")
    if np.any(arr < 0):
        raise NonFiniteLossError("losses must be non-negative")
    return arr


def select_temperature(losses, policy: TemperaturePolicy | str = "median") -> Temperature:
    """Pick the temperature for ``losses`` under ``policy``.

    Percentiles use linear interpolation between order statistics, so the
    median of an even-length vector is the mean of the two middle values.
    A zero result falls back to the mean loss; if that is zero as well the
    ``DEGENERATE_UNIFORM`` sentinel is returned.
    """
    if isinstance(policy, str):
        policy = TemperaturePolicy.parse(policy)
    arr = check_losses(losses)
    if policy.kind == "fixed":
        return float(policy.value)
    q = 50.0 if policy.kind == "median" else float(policy.value)
    tau = float(np.percentile(arr, q, method="linear"))
    if tau > 0.0:
        return tau
    tau = float(arr.mean())
    if tau > 0.0:
        return tau
    return DEGENERATE_UNIFORM


def compute_weights(losses, tau: Temperature) -> WeightVector:
    """Per-sample weights ``exp(-loss / tau)``.

    Very large ``loss / tau`` underflows to an exact 0, which is kept.
    """
    arr = check_losses(losses)
    if tau is DEGENERATE_UNIFORM:
        return WeightVector(np.ones_like(arr), None)
    tau = float(tau)
    if not tau > 0.0 or math.isnan(tau):
        raise NonPositiveTemperatureError(f"temperature must be > 0, got {tau}")
    # losses >= 0 so the exponent is <= 0: no overflow is possible
    with np.errstate(over="ignore"):
        return WeightVector(np.exp(-arr / tau), tau)


def flow_weights(losses, policy: TemperaturePolicy | str = "median") -> WeightVector:
    """Shortcut for ``compute_weights(losses, select_temperature(losses, policy))``."""
    return compute_weights(losses, select_temperature(losses, policy))


def normalize_weights(weights) -> np.ndarray:
    w = np.asarray(getattr(weights, "values", weights), dtype=np.float64)
    total = w.sum()
    if not total > 0.0:
        raise AllZeroWeightsError("all weights are zero; increase the temperature")
    return w / total


def entropic_objective(pi, losses, tau: float) -> float:
    """Evaluate ``sum(pi * losses) + tau * sum(pi * log(pi))`` with 0 log 0 = 0."""
    pi = np.asarray(pi, dtype=np.float64)
    arr = np.asarray(losses, dtype=np.float64)
    if pi.shape != arr.shape:
        raise DimensionMismatchError(f"pi has shape {pi.shape}, losses {arr.shape}")
    pos = pi > 0
    entropy = float(np.sum(pi[pos] * np.log(pi[pos])))
    return float(np.dot(pi, arr)) + tau * entropy


def dro_weights(losses, tau: float) -> np.ndarray:
    """Inner maximiser of the entropic DRO objective: ``pi_i ~ exp(+loss_i / tau)``."""
    arr = check_losses(losses)
    tau = float(tau)
    if not tau > 0.0:
        raise NonPositiveTemperatureError(f"temperature must be > 0, got {tau}")
    z = np.exp((arr - arr.max()) / tau)
    return z / z.sum()


# --- file formats -----------------------------------------------------------


def read_losses_csv(path) -> np.ndarray:
    """Read a single-column ``loss`` CSV. Errors name the 1-based file line."""
    values = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["loss"]:
            raise ValueError(f"line 1: expected header 'loss', got {header!r}")
        for row in reader:
            lineno = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 1:
                raise ValueError(f"line {lineno}: expected 1 column, got {len(row)}")
            try:
                v = float(row[0])
            except ValueError:
                raise ValueError(f"line {lineno}: not a number: {row[0]!r}") from None
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"line {lineno}: loss must be finite and >= 0, got {row[0]!r}")
            values.append(v)
    return check_losses(values)


def write_losses_csv(path, losses) -> None:
    arr = check_losses(losses)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("loss\n")
        for v in arr:
            fh.write(f"{float(v)!r}\n")


def write_weights(path, weights: WeightVector, policy: TemperaturePolicy | str) -> Path:
    """Write ``index,weight`` CSV plus a JSON sidecar; returns the sidecar path."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("index,weight\n")
        for i, v in enumerate(weights.values):
            fh.write(f"{i},{float(v)!r}\n")
    sidecar = path.with_name(path.name + ".json")
    with open(sidecar, "w", encoding="utf-8", newline="\n") as fh:
        json.dump({"tau": weights.tau, "policy": str(policy)}, fh, sort_keys=True)
        fh.write("\n")
    return sidecar


def read_weights(path) -> tuple[WeightVector, str]:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        rows = [(int(r["index"]), float(r["weight"])) for r in reader]
    rows.sort()
    with open(path.with_name(path.name + ".json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    return WeightVector(np.array([w for _, w in rows]), meta["tau"]), meta["policy"]
