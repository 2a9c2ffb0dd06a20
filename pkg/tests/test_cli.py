import csv
import json

from fredmc.cli import main, validate_and_echo

TS_PROBLEM = {"name": "separable-poly", "a": [0.0, 1.0], "b": [0.0, 1.0],
              "forcing": {"kind": "poly", "coeffs": [0.0, 1.0]}}
CONST_PROBLEM = {"name": "constant", "gamma": 0.5,
                 "forcing": {"kind": "const", "value": 1.0}}


def _write_config(tmp_path, name="cfg.json", **overrides):
    cfg = {"problem": TS_PROBLEM, "epsilon": 0.01, "budget": 5000, "grid": 11,
           "seed": 3, "mode": "solve", "out_dir": str(tmp_path / "default_out")}
    cfg.update(overrides)
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def test_validate_fills_defaults(tmp_path, capsys):
    path = _write_config(tmp_path)
    assert main(["validate", "--config", str(path)]) == 0
    echoed = json.loads(capsys.readouterr().out)
    assert echoed["delta"] == 0.05
    assert echoed["grid"] == 11
    assert echoed["replications"] == 1


def test_validate_unknown_registry_name(tmp_path, capsys):
    path = _write_config(tmp_path, problem={"name": "mystery-kernel"})
    assert main(["validate", "--config", str(path)]) == 2
    assert "mystery-kernel" in capsys.readouterr().err


def test_validate_epsilon_range(tmp_path, capsys):
    path = _write_config(tmp_path, epsilon=0.7)
    assert main(["validate", "--config", str(path)]) == 2
    assert "epsilon must lie in (0, 0.5)" in capsys.readouterr().err


def test_validate_unknown_field(tmp_path, capsys):
    path = _write_config(tmp_path, typo_field=1)
    assert main(["validate", "--config", str(path)]) == 2
    assert "typo_field" in capsys.readouterr().err


def test_malformed_json(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{"problem": ')
    assert main(["validate", "--config", str(path)]) == 2


def test_allocate_only_artifacts(tmp_path):
    path = _write_config(tmp_path, out_dir=str(tmp_path / "out"))
    assert main(["allocate", "--config", str(path)]) == 0
    alloc = json.loads((tmp_path / "out" / "allocation.json").read_text())
    assert alloc["N"] == 4
    assert alloc["cost_B"] >= alloc["n_total"]
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["config"]["mode"] == "allocate-only"
    # the manifest config re-validates: enough to re-run the experiment
    validate_and_echo(manifest["config"], echo=False)


def test_solve_constant_fixture_exact_csv(tmp_path):
    path = _write_config(tmp_path, problem=CONST_PROBLEM, out_dir=str(tmp_path / "out"))
    assert main(["solve", "--config", str(path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "out" / "estimate.csv")))
    assert len(rows) == 11
    assert all(r["value"] == "1.9921875" for r in rows)  # 2 - 2^-7, exact
    assert all(r["var"] == "0.0" for r in rows)
    assert all(r["mode"] == "solution" for r in rows)


def test_solve_byte_identical_across_workers(tmp_path):
    path = _write_config(tmp_path, out_dir=str(tmp_path / "a"))
    assert main(["solve", "--config", str(path), "--workers", "1"]) == 0
    assert main(["solve", "--config", str(path), "--workers", "4",
                 "--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "estimate.csv").read_bytes()
    b = (tmp_path / "b" / "estimate.csv").read_bytes()
    assert a == b


def test_rate_study_byte_identical_across_workers(tmp_path):
    path = _write_config(tmp_path, mode="rate-study", replications=3,
                         budgets=[500, 2000], epsilon=0.01, out_dir=str(tmp_path / "r1"))
    assert main(["rate-study", "--config", str(path), "--workers", "1"]) == 0
    assert main(["rate-study", "--config", str(path), "--workers", "4",
                 "--out", str(tmp_path / "r2")]) == 0
    assert (tmp_path / "r1" / "rates.csv").read_bytes() == (tmp_path / "r2" / "rates.csv").read_bytes()
    rows = list(csv.DictReader(open(tmp_path / "r1" / "rates.csv")))
    assert {r["method"] for r in rows} == {"solve", "geometric"}
    assert len(rows) == 2 * 2 * 3


def test_coverage_study_artifacts(tmp_path):
    path = _write_config(tmp_path, mode="coverage-study", replications=4,
                         budget=20_000, epsilon=0.001, out_dir=str(tmp_path / "cov"))
    assert main(["coverage-study", "--config", str(path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "cov" / "coverage.csv")))
    assert [r["replication"] for r in rows] == ["0", "1", "2", "3"]
    assert all(r["covered"] in ("0", "1") for r in rows)
    manifest = json.loads((tmp_path / "cov" / "manifest.json").read_text())
    assert 0.0 <= manifest["summary"]["coverage"] <= 1.0


def test_geometric_mode_writes_estimate(tmp_path):
    path = _write_config(tmp_path, mode="geometric", budget=2000,
                         out_dir=str(tmp_path / "geo"))
    assert main(["geometric", "--config", str(path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "geo" / "estimate.csv")))
    assert all(r["mode"] == "geometric" for r in rows)


def test_integrate_mode(tmp_path):
    path = _write_config(tmp_path, mode="integrate", budget=20_000,
                         out_dir=str(tmp_path / "int"))
    assert main(["integrate", "--config", str(path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "int" / "estimate.csv")))
    # I(t) = S[f](t) = t/3 for this fixture
    mid = rows[5]
    assert float(mid["t_1"]) == 0.5
    assert abs(float(mid["value"]) - 0.5 / 3) < 0.01


def test_derivative_mode(tmp_path):
    path = _write_config(tmp_path, mode="derivative", budget=20_000,
                         out_dir=str(tmp_path / "der"))
    assert main(["derivative", "--config", str(path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "der" / "estimate.csv")))
    assert all(abs(float(r["value"]) - 1.5) < 0.05 for r in rows)


def test_band_json_schema(tmp_path):
    path = _write_config(tmp_path, band_method="both", budget=5000,
                         out_dir=str(tmp_path / "bd"))
    assert main(["solve", "--config", str(path)]) == 0
    bands = json.loads((tmp_path / "bd" / "band.json").read_text())
    assert {b["method"] for b in bands} == {"gauss-sim", "nonasymptotic-psi"}
    for b in bands:
        assert b["delta"] == 0.05
        assert b["half_width"] >= 0
        assert b["n"] == 5000


def test_exit_code_contractivity(tmp_path, capsys):
    path = _write_config(tmp_path, problem={"name": "constant", "gamma": 1.2,
                                            "forcing": {"kind": "const", "value": 1.0}})
    assert main(["solve", "--config", str(path)]) == 3
    assert "contractivity" in capsys.readouterr().err


def test_exit_code_budget(tmp_path, capsys):
    path = _write_config(tmp_path, budget=3)
    assert main(["solve", "--config", str(path)]) == 4
    assert "budget" in capsys.readouterr().err


def test_exit_code_band_too_wide(tmp_path, capsys):
    # a miss probability far below what the moment tail can certify
    path = _write_config(tmp_path, band_method="nonasymptotic-psi", delta=1e-60)
    assert main(["solve", "--config", str(path)]) == 5
    assert "numerical" in capsys.readouterr().err


def test_per_term_export(tmp_path):
    path = _write_config(tmp_path, export_per_term=True, out_dir=str(tmp_path / "pt"))
    assert main(["solve", "--config", str(path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "pt" / "per_term.csv")))
    assert {r["m"] for r in rows} == {"1", "2", "3", "4"}


def test_covariance_export(tmp_path):
    path = _write_config(tmp_path, export_covariance=True, out_dir=str(tmp_path / "cv"))
    assert main(["solve", "--config", str(path)]) == 0
    lines = (tmp_path / "cv" / "covariance.csv").read_text().splitlines()
    assert len(lines) == 1 + 11  # grid header plus an 11x11 matrix
    assert len(lines[1].split(",")) == 11


def test_tail_report_in_band_json(tmp_path):
    path = _write_config(tmp_path, tail_report=True, n_sim=100_000,
                         out_dir=str(tmp_path / "tr"))
    assert main(["solve", "--config", str(path)]) == 0
    band = json.loads((tmp_path / "tr" / "band.json").read_text())
    assert "kappa_fit" in band and "C_fit" in band
    assert band["C_fit"] > 0


def test_tail_report_needs_enough_sims(tmp_path, capsys):
    path = _write_config(tmp_path, tail_report=True, n_sim=10_000)
    assert main(["validate", "--config", str(path)]) == 2
    assert "n_sim" in capsys.readouterr().err


def test_seed_override_changes_estimates(tmp_path):
    path = _write_config(tmp_path, out_dir=str(tmp_path / "s1"))
    assert main(["solve", "--config", str(path)]) == 0
    assert main(["solve", "--config", str(path), "--seed", "99",
                 "--out", str(tmp_path / "s2")]) == 0
    a = (tmp_path / "s1" / "estimate.csv").read_text()
    b = (tmp_path / "s2" / "estimate.csv").read_text()
    assert a != b
