"""Unit tests for configuration loading, experiment runners, and the CLI."""

import csv
import json

import numpy as np
import pytest

from mmaccel import ConfigError, load_config
from mmaccel.cli import main
from mmaccel.config import resolve
from mmaccel.experiments import (ou_em_moments, ou_exact_moments,
                                 run_acceleration_experiment,
                                 run_convergence_study, run_snapshot_matching)


def _write(tmp_path, payload, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return str(path)


def _read_csv(path):
    with open(path) as fh:
        header = [line for line in fh if line.startswith("#")]
    with open(path) as fh:
        rows = list(csv.reader(line for line in fh if not line.startswith("#")))
    return header, rows[0], rows[1:]


# ---------------------------------------------------------------- config ----


def test_defaults_applied(tmp_path):
    spec = load_config(_write(tmp_path, {"kind": "full-acceleration"}))
    r = spec.resolved
    assert r["dt_micro"] == pytest.approx(2e-4)
    assert r["matching"]["tolerance"] == pytest.approx(1e-9)
    assert r["step_down"] == pytest.approx(0.5)
    assert r["step_up"] == pytest.approx(1.2)


def test_unknown_kind_rejected(tmp_path):
    with pytest.raises(ConfigError, match="kind"):
        load_config(_write(tmp_path, {"kind": "bogus"}))


def test_burst_exceeding_macro_step_rejected(tmp_path):
    cfg = {"kind": "full-acceleration", "dt_micro": 0.01,
           "micro_steps_per_burst": 2, "dt_macro_max": 0.015}
    with pytest.raises(ConfigError, match="dt_macro_max"):
        load_config(_write(tmp_path, cfg))


def test_parse_error_reports_location(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"kind": "full-acceleration",\n  broken}')
    with pytest.raises(ConfigError, match="line 2"):
        load_config(str(path))


def test_l2d_requires_explicit_degeneracy_threshold():
    with pytest.raises(ConfigError, match="degeneracy_threshold"):
        resolve({"kind": "full-acceleration", "matching": {"operator": "L2D"}})
    resolve({"kind": "full-acceleration", "matching": {"operator": "L2D"},
             "degeneracy_threshold": 0.5})


# ----------------------------------------------------------- experiments ----


def _small_snapshot_spec(**overrides):
    cfg = {"kind": "snapshot-matching", "particles": 400, "replicates": 2,
           "seed": 5,
           "snapshot": {"prior_time": 0.01, "dt_grid": [0.0, 1e-3],
                        "moment_counts": [2], "operators": ["KLD"],
                        "max_moment_order": 5}}
    cfg.update(overrides)
    return resolve(cfg)


def test_snapshot_self_match_has_zero_errors(tmp_path):
    spec = _small_snapshot_spec()
    agg = run_snapshot_matching(spec, str(tmp_path))
    cell = agg[("KLD", 2, 0.0)]
    assert cell["failed"] == 0
    assert cell["stress_err_mean"] == pytest.approx(0.0, abs=1e-12)
    assert np.max(cell["moment_err_mean"]) == pytest.approx(0.0, abs=1e-12)


def test_snapshot_csv_schema_and_header(tmp_path):
    spec = _small_snapshot_spec()
    run_snapshot_matching(spec, str(tmp_path))
    header, cols, rows = _read_csv(tmp_path / "moment_errors.csv")
    assert header[0].startswith("# config:")
    assert header[1].startswith("# seed: 5")
    assert cols[:5] == ["operator", "moment_count", "dt_macro",
                        "converged", "failed"]
    assert len(cols) == 5 + 2 * 5
    assert all(len(r) == len(cols) for r in rows)


def test_snapshot_threads_do_not_change_results(tmp_path):
    a = run_snapshot_matching(_small_snapshot_spec(), str(tmp_path / "a"),
                              threads=1)
    b = run_snapshot_matching(_small_snapshot_spec(), str(tmp_path / "b"),
                              threads=2)
    ka = a[("KLD", 2, 1e-3)]
    kb = b[("KLD", 2, 1e-3)]
    assert np.array_equal(ka["moment_err_mean"], kb["moment_err_mean"])


def test_acceleration_degenerate_has_zero_error(tmp_path):
    spec = resolve({"kind": "full-acceleration", "particles": 300,
                    "replicates": 1, "horizon": 0.01, "dt_macro_max": 2e-4})
    agg = run_acceleration_experiment(spec, str(tmp_path))
    assert agg["summary"]["aborted_replicates"] == 0
    assert np.max(agg["err_mean"]) == 0.0


def test_convergence_orders_near_one(tmp_path):
    spec = resolve({"kind": "convergence-study", "model": {"type": "ou"},
                    "horizon": 1.0, "replicates": 1})
    res = run_convergence_study(spec, str(tmp_path))
    assert res["order_micro"][0] == pytest.approx(1.0, abs=0.2)
    assert res["order_macro"][0] == pytest.approx(1.0, abs=0.2)
    # Combined run error stays near the sum of the isolated contributions.
    total = res["micro_errors"][-1][0] + res["macro_errors"][-1][0]
    assert res["combined_error"][0] <= 1.05 * total + 1e-12


def test_ou_moment_helpers():
    m1, m2 = ou_exact_moments(1.0, 2.0, 0.0)
    assert (m1, m2) == (1.0, 2.0)
    m1, m2 = ou_em_moments(1.0, 2.0, 0.1)
    assert m1 == pytest.approx(0.9)
    assert m2 == pytest.approx(0.81 * 2.0 + 0.1)


def test_csv_floats_round_trip(tmp_path):
    spec = resolve({"kind": "convergence-study", "model": {"type": "ou"},
                    "horizon": 1.0, "replicates": 1})
    res = run_convergence_study(spec, str(tmp_path))
    _, cols, rows = _read_csv(tmp_path / "convergence.csv")
    written = float(rows[0][cols.index("error_m1")])
    assert written == res["micro_errors"][0][0]  # 17 digits: exact round trip


# ------------------------------------------------------------------- cli ----


def test_cli_success_exit_code(tmp_path):
    cfg = _write(tmp_path, {"kind": "convergence-study",
                            "model": {"type": "ou"}, "horizon": 1.0})
    assert main(["converge", "--config", cfg,
                 "--out", str(tmp_path / "out")]) == 0
    assert (tmp_path / "out" / "convergence.csv").exists()


def test_cli_config_error_exit_code(tmp_path, capsys):
    cfg = _write(tmp_path, {"kind": "bogus"})
    assert main(["converge", "--config", cfg, "--out", str(tmp_path)]) == 2
    assert "configuration error" in capsys.readouterr().err


def test_cli_missing_file_exit_code(tmp_path):
    assert main(["converge", "--config", str(tmp_path / "none.json"),
                 "--out", str(tmp_path)]) == 2


def test_cli_kind_subcommand_mismatch(tmp_path):
    cfg = _write(tmp_path, {"kind": "convergence-study",
                            "model": {"type": "ou"}})
    assert main(["accelerate", "--config", cfg, "--out", str(tmp_path)]) == 2


def test_cli_seed_and_replicates_overrides(tmp_path):
    cfg = _write(tmp_path, {"kind": "snapshot-matching", "particles": 200,
                            "replicates": 5, "seed": 1,
                            "snapshot": {"prior_time": 0.002,
                                         "dt_grid": [0.0],
                                         "moment_counts": [2],
                                         "operators": ["KLD"],
                                         "max_moment_order": 3}})
    out = tmp_path / "out"
    assert main(["snapshot", "--config", cfg, "--seed", "99",
                 "--replicates", "1", "--out", str(out)]) == 0
    header, cols, rows = _read_csv(out / "stress_errors.csv")
    assert header[1].strip() == "# seed: 99"
    assert rows[0][cols.index("converged")] == "1"


def test_cli_numerical_failure_exit_code(tmp_path, capsys):
    # Unreachable matching tolerance fails at the macro-step floor.
    cfg = _write(tmp_path, {"kind": "full-acceleration", "particles": 777,
                            "replicates": 1, "horizon": 0.01,
                            "dt_macro_max": 2e-4,
                            "matching": {"tolerance": 1e-30}})
    assert main(["accelerate", "--config", cfg,
                 "--out", str(tmp_path / "out")]) == 3
    assert "numerical failure" in capsys.readouterr().err
