"""Experiment configuration files and run manifests."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .bench import BenchmarkSpec
from .exceptions import ConfigError
from .trainers import TrainConfig

CONFIG_VERSION = "flowlab/1"

THEORY_DEFAULTS = {
    "d": 4,
    "rho": 0.5,
    "gap_norm": 2.0,
    "beta": 0.25,
    "K": 50,
    "task_seed": 0,
    "sigma_pre_diag": None,
    "beta_grid": [round(0.1 * i, 10) for i in range(1, 11)],
    "rho_grid": [round(0.1 * i, 10) for i in range(0, 10)],
    "cov_rhos": [0.0, 0.3, 0.6, 0.9],
    "cov_alphas": [0.5, 1.0, 4.0],
    "cov_dims": [2, 8],
    "mc_samples": 2_000_000,
    "mc_tol": 5e-3,
    "K_max": 200,
    "omega_grid": 10_001,
}

TOP_LEVEL_KEYS = {"version", "seed", "output_dir", "benchmark", "methods", "theory", "sweep", "ablation"}


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(obj) -> str:
    """Hash of the canonical serialisation; insensitive to key order."""
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


@dataclass
class ExperimentConfig:
    version: str = CONFIG_VERSION
    seed: int = 0
    output_dir: str = "out"
    benchmark: BenchmarkSpec = field(default_factory=BenchmarkSpec)
    methods: list = field(default_factory=list)
    theory: dict = field(default_factory=lambda: dict(THEORY_DEFAULTS))
    sweep: dict | None = None
    ablation: dict | None = None
    raw: dict = field(default_factory=dict)

    @property
    def digest(self) -> str:
        return config_hash(self.raw)


def default_methods() -> list:
    return [
        TrainConfig(method="standard"),
        TrainConfig(method="flow"),
        TrainConfig(method="l2", l2_lambda=0.01),
        TrainConfig(method="linear_probe"),
        TrainConfig(method="wise_ft", alpha=0.5),
    ]


def default_config_dict() -> dict:
    return {
        "version": CONFIG_VERSION,
        "seed": 0,
        "output_dir": "out",
        "benchmark": BenchmarkSpec().to_dict() | {"seed": 0},
        "methods": [m.to_dict() for m in default_methods()],
        "theory": dict(THEORY_DEFAULTS),
    }


def _check_int(v, name, lo=0):
    if isinstance(v, bool) or not isinstance(v, int) or v < lo:
        raise ConfigError(f"{name}: must be an integer >= {lo}, got {v!r}")
    return v


def _as_int(v):
    # JSON has no int/float distinction for whole numbers written as 1e5
    if isinstance(v, float) and v.is_integer():
        return int(v)
    return v


def parse_config(obj: dict, seed_override: int | None = None) -> ExperimentConfig:
    """Validate a decoded config. Unknown keys are errors; messages start with the field path."""
    if not isinstance(obj, dict):
        raise ConfigError("config: top level must be a JSON object")
    unknown = sorted(set(obj) - TOP_LEVEL_KEYS)
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown key")
    if obj.get("version") != CONFIG_VERSION:
        raise ConfigError(f"version: expected {CONFIG_VERSION!r}, got {obj.get('version')!r}")
    seed = _check_int(obj.get("seed", 0), "seed")
    if seed_override is not None:
        seed = _check_int(seed_override, "--seed")
    out_dir = obj.get("output_dir", "out")
    if not isinstance(out_dir, str):
        raise ConfigError("output_dir: must be a string")

    bench_obj = dict(obj.get("benchmark", {}))
    if not isinstance(bench_obj, dict):
        raise ConfigError("benchmark: must be an object")
    if seed_override is not None or "seed" not in bench_obj:
        bench_obj["seed"] = seed
    for k in ("d", "n_classes", "n_train", "n_test", "hidden", "seed"):
        if k in bench_obj:
            bench_obj[k] = _as_int(bench_obj[k])
    bench = BenchmarkSpec.from_dict(bench_obj)

    methods = []
    raw_methods = obj.get("methods", [m.to_dict() for m in default_methods()])
    if not isinstance(raw_methods, list) or not raw_methods:
        raise ConfigError("methods: must be a non-empty list")
    for i, m in enumerate(raw_methods):
        if not isinstance(m, dict):
            raise ConfigError(f"methods[{i}]: must be an object")
        m = dict(m)
        for k in ("epochs", "batch_size", "probe_epochs", "seed"):
            if k in m:
                m[k] = _as_int(m[k])
        m.setdefault("seed", seed)
        try:
            methods.append(TrainConfig.from_dict(m))
        except (ConfigError, TypeError) as exc:
            raise ConfigError(f"methods[{i}].{exc}") from None
    labels = [m.label for m in methods]
    if len(set(labels)) != len(labels):
        raise ConfigError(f"methods: duplicate method labels {labels}")

    theory = dict(THEORY_DEFAULTS)
    t_obj = obj.get("theory", {})
    if not isinstance(t_obj, dict):
        raise ConfigError("theory: must be an object")
    t_unknown = sorted(set(t_obj) - set(THEORY_DEFAULTS))
    if t_unknown:
        raise ConfigError(f"theory.{t_unknown[0]}: unknown key")
    theory.update(t_obj)
    for k in ("d", "K", "task_seed", "mc_samples", "K_max", "omega_grid"):
        theory[k] = _check_int(_as_int(theory[k]), f"theory.{k}", 1 if k != "task_seed" else 0)
    if not 0.0 <= theory["rho"] < 1.0:
        raise ConfigError(f"theory.rho: must lie in [0, 1), got {theory['rho']!r}")
    if not 0.0 < theory["beta"] <= 1.0:
        raise ConfigError(f"theory.beta: must lie in (0, 1], got {theory['beta']!r}")
    if not (isinstance(theory["gap_norm"], (int, float)) and theory["gap_norm"] > 0):
        raise ConfigError("theory.gap_norm: must be > 0")
    for k in ("beta_grid", "rho_grid", "cov_rhos", "cov_alphas", "cov_dims"):
        if not isinstance(theory[k], list) or not theory[k]:
            raise ConfigError(f"theory.{k}: must be a non-empty list")
    if any(not 0 < b <= 1 for b in theory["beta_grid"]):
        raise ConfigError("theory.beta_grid: entries must lie in (0, 1]")
    if any(not 0 <= r < 1 for r in theory["rho_grid"] + theory["cov_rhos"]):
        raise ConfigError("theory.rho_grid/cov_rhos: entries must lie in [0, 1)")
    if any(not a > 0 for a in theory["cov_alphas"]):
        raise ConfigError("theory.cov_alphas: entries must be > 0")
    theory["cov_dims"] = [_check_int(_as_int(v), "theory.cov_dims[]", 2) for v in theory["cov_dims"]]

    sweep = obj.get("sweep")
    if sweep is not None:
        if not isinstance(sweep, dict) or set(sweep) - {"alphas", "methods"}:
            raise ConfigError("sweep: expected an object with keys alphas, methods")
        for a in sweep.get("alphas", []):
            if not (isinstance(a, (int, float)) and 0 <= a <= 1):
                raise ConfigError(f"sweep.alphas: entries must lie in [0, 1], got {a!r}")
    ablation = obj.get("ablation")
    if ablation is not None:
        if not isinstance(ablation, dict) or set(ablation) - {"percentiles"}:
            raise ConfigError("ablation: expected an object with key percentiles")
        for p in ablation.get("percentiles", []):
            if not (isinstance(p, (int, float)) and 0 < p < 100 and math.isfinite(p)):
                raise ConfigError(f"ablation.percentiles: entries must lie in (0, 100), got {p!r}")

    raw = dict(obj)
    raw["seed"] = seed
    return ExperimentConfig(
        version=CONFIG_VERSION,
        seed=seed,
        output_dir=out_dir,
        benchmark=bench,
        methods=methods,
        theory=theory,
        sweep=sweep,
        ablation=ablation,
        raw=raw,
    )


def load_config(path, seed_override=None) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config: file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return parse_config(obj, seed_override)


def write_manifest(out_dir, *, command, config: ExperimentConfig | None, outputs, seeds, started, finished) -> Path:
    from . import __version__

    path = Path(out_dir) / "manifest.json"
    manifest = {
        "command": command,
        "config_hash": None if config is None else config.digest,
        "library_version": __version__,
        "started": started,
        "finished": finished,
        "outputs": sorted(str(p) for p in outputs),
        "seeds": seeds,
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path
