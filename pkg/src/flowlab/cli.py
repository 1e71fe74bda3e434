"""``flowlab`` command-line entry point.

Exit codes: 0 success, 2 input/config error, 3 degenerate weights,
4 verification failure, 5 divergence.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import os
import sys
from pathlib import Path

import numpy as np

from . import linear_theory as lt
from . import weighting as wt
from .bench import averaging_sweep, run_comparison, tau_ablation
from .config import ExperimentConfig, default_config_dict, load_config, parse_config, write_manifest
from .exceptions import AllZeroWeightsError, ConfigError, DivergenceError, FlowlabError
from .seeding import derive_seed
from .selftest import run_selftest

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_DEGENERATE = 3
EXIT_VERIFY = 4
EXIT_DIVERGED = 5


class _Fail(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return Path(path)


def _threads(args):
    if args.threads is not None:
        return args.threads
    env = os.environ.get("FLOWLAB_THREADS")
    if env is None:
        return None
    try:
        n = int(env)
    except ValueError:
        raise _Fail(EXIT_INPUT, f"FLOWLAB_THREADS: not an integer: {env!r}") from None
    if n < 1:
        raise _Fail(EXIT_INPUT, f"FLOWLAB_THREADS: must be >= 1, got {n}")
    return n


def _config(args) -> ExperimentConfig:
    if args.config is None:
        return parse_config(default_config_dict(), args.seed)
    return load_config(args.config, args.seed)


def _out_dir(args, cfg: ExperimentConfig | None) -> Path:
    out = Path(args.out if args.out is not None else (cfg.output_dir if cfg else "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _task(cfg: ExperimentConfig) -> lt.LinearTaskSpec:
    t = cfg.theory
    sigma = None if t["sigma_pre_diag"] is None else np.diag(np.asarray(t["sigma_pre_diag"], float))
    seed = derive_seed(cfg.seed, f"task:{t['task_seed']}") % (2**32)
    return lt.make_task(t["d"], t["rho"], t["gap_norm"], seed, sigma_pre=sigma)


# --- subcommands ----------------------------------------------------------------


def cmd_weights(args):
    if args.losses is None:
        raise _Fail(EXIT_INPUT, "weights: --losses <csv> is required")
    try:
        losses = wt.read_losses_csv(args.losses)
    except FileNotFoundError:
        raise _Fail(EXIT_INPUT, f"{args.losses}: file not found") from None
    except ValueError as exc:
        raise _Fail(EXIT_INPUT, f"{args.losses}: {exc}") from None
    try:
        policy = wt.TemperaturePolicy.parse(args.policy)
    except ValueError as exc:
        raise _Fail(EXIT_INPUT, f"--policy: {exc}") from None
    wv = wt.flow_weights(losses, policy)
    if not np.any(wv.values > 0):
        raise _Fail(EXIT_DEGENERATE, f"all weights underflow to zero (tau={wv.tau})")
    out = _out_dir(args, None)
    path = out / "weights.csv"
    sidecar = wt.write_weights(path, wv, policy)
    print(f"wrote {len(wv)} weights to {path} (tau={wv.tau!r}, policy={policy})")
    return [path, sidecar], {}


def _theory_covariance(cfg, out, threads):
    t = cfg.theory
    rows = []
    worst = 0.0
    seeds = {}
    for d in t["cov_dims"]:
        for rho in t["cov_rhos"]:
            for alpha in t["cov_alphas"]:
                spec = lt.make_task(d, rho, 1.0, seed=0)
                # alpha = tau / e^T Sigma~ e; sigma~ is unit along e_bar
                tau = alpha * float(spec.e @ spec.sigma_tilde @ spec.e)
                closed = lt.weighted_covariance_closed(spec, tau)
                seed = derive_seed(cfg.seed, f"mc:{d}:{rho}:{alpha}")
                seeds[f"mc:{d}:{rho}:{alpha}"] = seed
                mc = lt.weighted_covariance_mc(spec.sigma_tilde, spec.e, tau, t["mc_samples"], seed, threads)
                for i in range(d):
                    for j in range(d):
                        err = abs(mc[i, j] - closed[i, j])
                        worst = max(worst, err)
                        rows.append([rho, alpha, d, i, j, float(closed[i, j]), float(mc[i, j]), float(err)])
    path = _write_csv(out / "covariance_check.csv", ["rho", "alpha", "d", "row", "col", "closed", "mc", "abs_err"], rows)
    ok = worst <= t["mc_tol"]
    print(f"max_abs_err={worst:.6g} tol={t['mc_tol']:g} samples={t['mc_samples']} {'PASS' if ok else 'FAIL'}")
    if not ok:
        raise _Fail(EXIT_VERIFY, f"covariance check failed: max_abs_err={worst:.6g} > {t['mc_tol']:g}")
    return [path], seeds


def _theory_trajectory(cfg, out):
    t = cfg.theory
    spec = _task(cfg)
    flow = lt.flow_trajectory(spec, t["beta"], t["K"])
    vanilla = lt.vanilla_ft_trajectory(spec, 0.5, t["K"])
    p1 = _write_csv(out / "trajectory_flow.csv", lt.TRAJECTORY_HEADER, flow.rows())
    p2 = _write_csv(out / "trajectory_vanilla.csv", lt.TRAJECTORY_HEADER, vanilla.rows())
    print(f"wrote K={t['K']} trajectories (beta={t['beta']:g}, rho={t['rho']:g}, tau={flow.tau:.6g})")
    return [p1, p2], {"task": derive_seed(cfg.seed, f"task:{t['task_seed']}") % (2**32)}


def _theory_eigen(cfg, out):
    t = cfg.theory
    rows = []
    for rho in t["rho_grid"]:
        for beta in t["beta_grid"]:
            sp = lt.q_eigen(beta, rho)
            vals = np.linalg.eigvalsh(lt.q_reduced_matrix(beta, rho))
            num_err = max(abs(vals[1] - sp.lambda1), abs(vals[0] - sp.lambda2))
            rows.append(
                [beta, rho, sp.mu, sp.lambda1, sp.lambda2, sp.v1[0], sp.v1[1], sp.v2[0], sp.v2[1], float(num_err)]
            )
    header = ["beta", "rho", "mu", "lambda1", "lambda2", "v1_e", "v1_eperp", "v2_e", "v2_eperp", "numeric_abs_err"]
    path = _write_csv(out / "eigen.csv", header, rows)
    worst = max(r[-1] for r in rows)
    print(f"wrote {len(rows)} eigen rows, max numeric disagreement {worst:.3g}")
    if worst > 1e-10:
        raise _Fail(EXIT_VERIFY, f"eigen check failed: {worst:.3g} > 1e-10")
    return [path], {}


def _theory_averaging(cfg, out):
    t = cfg.theory
    spec = _task(cfg)
    omegas = np.linspace(0.0, 1.0, t["omega_grid"])
    rows = []
    for w in omegas:
        e1, e2, et = lt.population_errors(lt.model_average(spec, float(w)), spec)
        rows.append([float(w), e1, e2, et])
    p1 = _write_csv(out / "averaging.csv", ["omega", "err1", "err2", "err_tot"], rows)
    rep = lt.flow_beats_averaging_check(spec, t["beta_grid"], t["K_max"])
    grid_min = min(r[3] for r in rows)
    summary = [
        ["omega_star", rep.omega_star],
        ["averaging_err_closed", rep.averaging_err],
        ["averaging_err_grid", grid_min],
        ["flow_min", rep.flow_min],
        ["flow_beta", rep.beta],
        ["flow_K", rep.K],
        ["gap_sq", rep.gap_sq],
    ]
    p2 = _write_csv(out / "averaging_summary.csv", ["quantity", "value"], summary)
    print(
        f"omega*={rep.omega_star:.6g} err*={rep.averaging_err:.6g} grid_min={grid_min:.6g} "
        f"flow_min={rep.flow_min:.6g} (beta={rep.beta:.4g}, K={rep.K}) |e|^2={rep.gap_sq:.6g}"
    )
    ok = rep.passed and abs(grid_min - rep.averaging_err) <= 1e-6 + 1e-12 * t["omega_grid"]
    if not ok:
        raise _Fail(EXIT_VERIFY, "averaging check failed")
    return [p1, p2], {"task": derive_seed(cfg.seed, f"task:{t['task_seed']}") % (2**32)}


def cmd_theory(args):
    cfg = _config(args)
    out = _out_dir(args, cfg)
    threads = _threads(args)
    if args.which == "verify-covariance":
        files, seeds = _theory_covariance(cfg, out, threads)
    elif args.which == "trajectory":
        files, seeds = _theory_trajectory(cfg, out)
    elif args.which == "eigen":
        files, seeds = _theory_eigen(cfg, out)
    else:
        files, seeds = _theory_averaging(cfg, out)
    return files, seeds, cfg, out


def cmd_train(args):
    from .bench import gen_two_task_benchmark, _pretrained
    from .trainers import finetune_multihead

    cfg = _config(args)
    out = _out_dir(args, cfg)
    data = gen_two_task_benchmark(cfg.benchmark)
    pre = _pretrained(cfg.benchmark, data)
    files = [out / "pretrained.json"]
    pre.save(files[0])
    for m in cfg.methods:
        res = finetune_multihead(pre, data.train_b, m, "A", cfg.benchmark.n_classes)
        slug = "".join(c if c.isalnum() or c in "._-" else "_" for c in m.label)
        path = out / f"model_{slug}.json"
        res.combined().save(path)
        files.append(path)
        if m.method in ("flow", "dro"):
            wpath = out / f"weights_{slug}.csv"
            files += [wpath, wt.write_weights(wpath, wt.WeightVector(res.weights, res.tau), m.temperature_policy)]
        print(f"trained {m.label}")
    return files, {"benchmark": cfg.benchmark.seed, "shuffle": cfg.seed}, cfg, out


def cmd_compare(args):
    cfg = _config(args)
    out = _out_dir(args, cfg)
    run = run_comparison(cfg.benchmark, cfg.methods, keep=True)
    files = [out / "report.csv", out / "report.json"]
    files[0].write_text(run.report.to_csv(), encoding="utf-8", newline="\n")
    files[1].write_text(run.report.to_json(), encoding="utf-8", newline="\n")
    for row in run.report.ordered():
        print(f"{row.method:>16}  pre={row.pretrain_acc:.4f} target={row.target_acc:.4f} avg={row.average:.4f}")
    if cfg.sweep:
        alphas = cfg.sweep.get("alphas", [0.0, 0.25, 0.5, 0.75, 1.0])
        rows = []
        for label in cfg.sweep.get("methods", list(run.results)):
            if label not in run.results:
                raise ConfigError(f"sweep.methods: unknown method label {label!r}")
            fine = run.results[label].combined()
            for a, r in averaging_sweep(run.pretrained, fine, alphas, run.data, run.test_losses, cfg.benchmark.hard_fraction):
                rows.append([label, a, r.pretrain_acc, r.target_acc, r.average, r.hard_acc])
        files.append(
            _write_csv(out / "averaging_sweep.csv", ["method", "alpha", "pretrain_acc", "target_acc", "average", "hard_acc"], rows)
        )
    if cfg.ablation:
        rep = tau_ablation(cfg.benchmark, cfg.ablation.get("percentiles", [10, 30, 50, 70, 90]), next(
            (m for m in cfg.methods if m.method == "flow"), None
        ))
        files += [out / "tau_ablation.csv", out / "tau_ablation.json"]
        files[-2].write_text(rep.to_csv(), encoding="utf-8", newline="\n")
        files[-1].write_text(rep.to_json(), encoding="utf-8", newline="\n")
    seeds = {
        "global": cfg.seed,
        "benchmark": cfg.benchmark.seed,
        "data": derive_seed(cfg.benchmark.seed, "data"),
        "pretrain": derive_seed(cfg.benchmark.seed, "pretrain") % (2**31),
    }
    return files, seeds, cfg, out


def cmd_selftest(args):
    if not run_selftest():
        raise _Fail(EXIT_VERIFY, "selftest failed")
    return [], {}


# --- parser -------------------------------------------------------------------


def _positive_int(text):
    try:
        n = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if n < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {n}")
    return n


def _seed(text):
    try:
        n = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= n < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {n}")
    return n


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON experiment config (must carry a 'version' field)")
    common.add_argument("--out", metavar="DIR", help="output directory (default: config output_dir)")
    common.add_argument("--seed", type=_seed, metavar="U64", help="global seed, overrides the config")
    common.add_argument("--threads", type=_positive_int, metavar="N", help="worker threads (fallback: FLOWLAB_THREADS)")

    p = argparse.ArgumentParser(
        prog="flowlab",
        description="Loss-based sample weighting for fine-tuning without forgetting: weights, theory checks, training, comparisons.",
        epilog=(
            "flags for every subcommand: --config PATH, --out DIR, --seed U64, --threads N "
            "(FLOWLAB_THREADS is the fallback for --threads); weights also takes --losses CSV and --policy. "
            "exit codes: 0 ok, 2 input/config error, 3 degenerate weights, 4 verification failure, 5 divergence"
        ),
    )
    sub = p.add_subparsers(dest="command", required=True, metavar="{weights,theory,train,compare,selftest}")

    w = sub.add_parser("weights", parents=[common], help="compute per-sample weights from a loss CSV")
    w.add_argument("--losses", metavar="CSV", help="single-column CSV with header 'loss'")
    w.add_argument("--policy", default="median", help="median | percentile:<p> | fixed:<tau> (default: median)")

    t = sub.add_parser("theory", help="linear-regression theory checks and trajectories")
    tsub = t.add_subparsers(dest="which", required=True, metavar="{verify-covariance,trajectory,eigen,averaging}")
    for name, text in (
        ("verify-covariance", "closed-form weighted covariance vs Monte Carlo over a grid"),
        ("trajectory", "FLOW and vanilla fine-tuning trajectories"),
        ("eigen", "spectral pairs over a (beta, rho) grid vs a numeric eigensolver"),
        ("averaging", "model-averaging sweep and FLOW's best (beta, K)"),
    ):
        tsub.add_parser(name, parents=[common], help=text)

    sub.add_parser("train", parents=[common], help="pre-train and fine-tune every configured method; save checkpoints")
    sub.add_parser("compare", parents=[common], help="run the two-task benchmark and write the report")
    sub.add_parser("selftest", parents=[common], help="fast identity, gradient and small Monte Carlo checks")
    return p


COMMANDS = {"weights": cmd_weights, "theory": cmd_theory, "train": cmd_train, "compare": cmd_compare, "selftest": cmd_selftest}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    started = _now()
    try:
        result = COMMANDS[args.command](args)
    except _Fail as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except AllZeroWeightsError as exc:
        print(f"degenerate weights: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FlowlabError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    if len(result) == 2:
        files, seeds = result
        cfg, out = None, (Path(args.out) if args.out is not None else None)
    else:
        files, seeds, cfg, out = result
    if out is not None and files:
        write_manifest(
            out,
            command=" ".join(["flowlab", args.command] + ([args.which] if args.command == "theory" else [])),
            config=cfg,
            outputs=[Path(f).name for f in files],
            seeds=seeds,
            started=started,
            finished=_now(),
        )
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
