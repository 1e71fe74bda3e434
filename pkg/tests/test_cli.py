import csv
import json

import numpy as np
import pytest

from flowlab import cli
from flowlab import linear_theory as lt
from flowlab.config import CONFIG_VERSION, config_hash, default_config_dict, parse_config
from flowlab.exceptions import ConfigError


def _small_config(tmp_path, **extra):
    cfg = default_config_dict()
    cfg["benchmark"].update(d=6, n_classes=3, n_train=200, n_test=200, hidden=8)
    cfg["benchmark"]["pretrain"].update(epochs=40)
    for m in cfg["methods"]:
        m.update(epochs=2, probe_epochs=10)
    cfg["theory"].update(cov_dims=[2], cov_rhos=[0.5], cov_alphas=[1.0], mc_samples=200_000, mc_tol=2e-2)
    cfg.update(extra)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# --- weights --------------------------------------------------------------------------


def test_weights_median(tmp_path, capsys):
    (tmp_path / "l.csv").write_text("loss\n0.5\n1.5\n3.0\n")
    assert cli.main(["weights", "--losses", str(tmp_path / "l.csv"), "--out", str(tmp_path / "o")]) == 0
    rows = _rows(tmp_path / "o" / "weights.csv")
    assert rows[0] == ["index", "weight"] and len(rows) == 4
    meta = json.loads((tmp_path / "o" / "weights.csv.json").read_text())
    assert meta == {"policy": "median", "tau": 1.5}
    assert float(rows[2][1]) == pytest.approx(np.exp(-1.0))


def test_weights_percentile_sidecar(tmp_path):
    (tmp_path / "l.csv").write_text("loss\n0.5\n1.5\n3.0\n")
    assert cli.main(["weights", "--losses", str(tmp_path / "l.csv"), "--policy", "percentile:80", "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "weights.csv.json").read_text())["policy"] == "percentile:80"


def test_weights_malformed_row_names_line(tmp_path, capsys):
    (tmp_path / "l.csv").write_text("loss\n0.5\n1.5\nabc\n")
    assert cli.main(["weights", "--losses", str(tmp_path / "l.csv"), "--out", str(tmp_path)]) == 2
    assert "line 4" in capsys.readouterr().err


def test_weights_all_zero_exit_3(tmp_path):
    (tmp_path / "l.csv").write_text("loss\n1000\n2000\n")
    assert cli.main(["weights", "--losses", str(tmp_path / "l.csv"), "--policy", "fixed:1e-300", "--out", str(tmp_path)]) == 3


def test_weights_bad_policy_and_missing_file(tmp_path):
    (tmp_path / "l.csv").write_text("loss\n1\n")
    assert cli.main(["weights", "--losses", str(tmp_path / "l.csv"), "--policy", "mode", "--out", str(tmp_path)]) == 2
    assert cli.main(["weights", "--losses", str(tmp_path / "nope.csv"), "--out", str(tmp_path)]) == 2
    assert cli.main(["weights", "--out", str(tmp_path)]) == 2


# --- argument handling ----------------------------------------------------------------


def test_unknown_flag_exits_2():
    assert cli.main(["compare", "--bogus"]) == 2
    assert cli.main(["theory", "nonsense"]) == 2
    assert cli.main([]) == 2


def test_help_lists_subcommands_and_flags(capsys):
    assert cli.main(["--help"]) == 0
    text = capsys.readouterr().out
    for word in ("weights", "theory", "train", "compare", "selftest", "--config", "--out", "--seed", "--threads", "FLOWLAB_THREADS"):
        assert word in text
    assert cli.main(["theory", "--help"]) == 0
    text = capsys.readouterr().out
    for word in ("verify-covariance", "trajectory", "eigen", "averaging"):
        assert word in text


def test_bad_thread_env(tmp_path, monkeypatch):
    monkeypatch.setenv("FLOWLAB_THREADS", "many")
    assert cli.main(["theory", "verify-covariance", "--config", str(_small_config(tmp_path)), "--out", str(tmp_path)]) == 2


# --- theory ---------------------------------------------------------------------------


def test_theory_trajectory(tmp_path):
    out = tmp_path / "t"
    assert cli.main(["theory", "trajectory", "--out", str(out)]) == 0
    rows = _rows(out / "trajectory_flow.csv")
    assert rows[0] == lt.TRAJECTORY_HEADER
    assert len(rows) == 52  # header + K = 0..50
    assert float(rows[1][2]) == 1.0
    assert len(_rows(out / "trajectory_vanilla.csv")) == 52
    man = json.loads((out / "manifest.json").read_text())
    assert set(man["outputs"]) == {"trajectory_flow.csv", "trajectory_vanilla.csv"}


def test_theory_eigen_spot_row(tmp_path):
    assert cli.main(["theory", "eigen", "--out", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "eigen.csv")
    hit = [r for r in rows[1:] if float(r[0]) == 1.0 and float(r[1]) == 0.5]
    assert len(hit) == 1
    assert float(hit[0][3]) == pytest.approx(0.625)
    assert float(hit[0][4]) == 0.0


def test_theory_verify_covariance(tmp_path, capsys):
    cfg = _small_config(tmp_path)
    assert cli.main(["theory", "verify-covariance", "--config", str(cfg), "--out", str(tmp_path), "--threads", "2"]) == 0
    assert "max_abs_err=" in capsys.readouterr().out
    rows = _rows(tmp_path / "covariance_check.csv")
    assert rows[0][-5:] == ["row", "col", "closed", "mc", "abs_err"]
    assert len(rows) == 1 + 4


def test_theory_verify_covariance_failure_exit_4(tmp_path):
    cfg = json.loads(_small_config(tmp_path).read_text())
    cfg["theory"].update(mc_samples=100, mc_tol=1e-9)
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert cli.main(["theory", "verify-covariance", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path)]) == 4


def test_theory_averaging(tmp_path):
    assert cli.main(["theory", "averaging", "--out", str(tmp_path)]) == 0
    summary = dict(_rows(tmp_path / "averaging_summary.csv")[1:])
    assert float(summary["flow_min"]) <= float(summary["averaging_err_closed"]) + 1e-6


def test_theory_outputs_are_idempotent(tmp_path):
    for d in ("a", "b"):
        assert cli.main(["theory", "trajectory", "--out", str(tmp_path / d), "--seed", "17"]) == 0
    assert (tmp_path / "a" / "trajectory_flow.csv").read_bytes() == (tmp_path / "b" / "trajectory_flow.csv").read_bytes()


# --- compare / train ------------------------------------------------------------------


def test_compare_writes_report_and_replays_identically(tmp_path):
    cfg = _small_config(tmp_path, sweep={"alphas": [0.0, 0.5], "methods": ["flow"]}, ablation={"percentiles": [30, 70]})
    for d in ("a", "b"):
        assert cli.main(["compare", "--config", str(cfg), "--out", str(tmp_path / d)]) == 0
    for name in ("report.csv", "report.json", "averaging_sweep.csv", "tau_ablation.csv", "tau_ablation.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = _rows(tmp_path / "a" / "report.csv")
    assert rows[0] == ["method", "pretrain_acc", "target_acc", "average", "delta_pre", "delta_target", "hard_acc"]
    assert [r[0] for r in rows[1:]] == ["standard", "flow", "l2(0.01)", "linear_probe", "wise_ft(0.5)"]
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["config_hash"] == json.loads((tmp_path / "b" / "manifest.json").read_text())["config_hash"]
    assert "started" in man and "report.csv" in man["outputs"]


def test_compare_seed_flag_changes_results(tmp_path):
    cfg = _small_config(tmp_path)
    assert cli.main(["compare", "--config", str(cfg), "--out", str(tmp_path / "a"), "--seed", "1"]) == 0
    assert cli.main(["compare", "--config", str(cfg), "--out", str(tmp_path / "b"), "--seed", "2"]) == 0
    assert (tmp_path / "a" / "report.csv").read_bytes() != (tmp_path / "b" / "report.csv").read_bytes()


def test_compare_rejects_bad_alpha(tmp_path, capsys):
    cfg = json.loads(_small_config(tmp_path).read_text())
    cfg["methods"][4]["alpha"] = 1.5
    (tmp_path / "bad.json").write_text(json.dumps(cfg))
    assert cli.main(["compare", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path)]) == 2
    assert "methods[4].alpha" in capsys.readouterr().err


def test_compare_divergence_exit_5(tmp_path):
    cfg = json.loads(_small_config(tmp_path).read_text())
    cfg["methods"] = [{"method": "standard", "learning_rate": 1e308, "epochs": 2}]
    (tmp_path / "div.json").write_text(json.dumps(cfg))
    assert cli.main(["compare", "--config", str(tmp_path / "div.json"), "--out", str(tmp_path)]) == 5


def test_train_saves_checkpoints(tmp_path):
    cfg = _small_config(tmp_path)
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "m")]) == 0
    from flowlab.trainers import MultiHeadModel

    m = MultiHeadModel.load(tmp_path / "m" / "model_flow.json")
    assert set(m.heads) == {"A", "B"}
    assert (tmp_path / "m" / "weights_flow.csv.json").exists()


# --- config -----------------------------------------------------------------------------


def test_config_hash_ignores_key_order():
    a = {"version": CONFIG_VERSION, "seed": 1, "theory": {"d": 3, "rho": 0.2}}
    b = {"theory": {"rho": 0.2, "d": 3}, "seed": 1, "version": CONFIG_VERSION}
    assert config_hash(a) == config_hash(b)
    assert parse_config(a).digest == parse_config(b).digest


@pytest.mark.parametrize(
    "patch, field",
    [
        ({"version": "flowlab/0"}, "version"),
        ({"colour": 1}, "colour"),
        ({"theory": {"rho": 1.0}}, "theory.rho"),
        ({"theory": {"gamma": 1}}, "theory.gamma"),
        ({"benchmark": {"noise": -1}}, "benchmark.noise"),
        ({"methods": [{"method": "flow", "lr": 1}]}, "methods[0].lr"),
        ({"methods": []}, "methods"),
        ({"seed": -3}, "seed"),
        ({"ablation": {"percentiles": [0]}}, "ablation.percentiles"),
    ],
)
def test_config_errors_name_the_field(patch, field):
    cfg = default_config_dict()
    cfg.update(patch)
    with pytest.raises(ConfigError, match=rf"^{__import__('re').escape(field)}"):
        parse_config(cfg)


def test_missing_version_rejected(tmp_path):
    cfg = default_config_dict()
    del cfg["version"]
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert cli.main(["compare", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path)]) == 2
    (tmp_path / "broken.json").write_text("{")
    assert cli.main(["compare", "--config", str(tmp_path / "broken.json"), "--out", str(tmp_path)]) == 2


# --- selftest ----------------------------------------------------------------------------


def test_selftest_passes_quickly(capsys):
    import time

    t0 = time.perf_counter()
    assert cli.main(["selftest"]) == 0
    assert time.perf_counter() - t0 < 60
    lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith(("PASS", "FAIL"))]
    assert len(lines) >= 10
    assert all(l.startswith("PASS") for l in lines)


def test_selftest_catches_corrupted_eigenvalue(monkeypatch, capsys):
    real = lt.q_eigen

    def corrupted(beta, rho):
        sp = real(beta, rho)
        object.__setattr__(sp, "lambda2", rho**2 * (1 + beta) / (1 - beta * rho**2))
        return sp

    monkeypatch.setattr(lt, "q_eigen", corrupted)
    assert cli.main(["selftest"]) == 4
    assert "FAIL eigen_vs_numeric" in capsys.readouterr().out


def test_shipped_config_parses():
    from pathlib import Path

    from flowlab.config import load_config

    cfg = load_config(Path(__file__).parent.parent / "configs" / "default.json")
    assert [m.label for m in cfg.methods] == ["standard", "flow", "l2(0.01)", "linear_probe", "wise_ft(0.5)"]
