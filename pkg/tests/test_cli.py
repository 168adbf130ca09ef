import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from smallscat.cli import config_hash, main
from smallscat.io import read_csv, read_field
from smallscat.shapes import ShapeSummary, effective_capacitance


def run_cli(capsys, *argv):
    status = main(list(argv))
    out, err = capsys.readouterr()
    path = Path(out.strip().splitlines()[-1]) if out.strip() else None
    return status, path, err


def snapshot(path: Path) -> dict:
    return {p.name: p.read_bytes() for p in sorted(path.iterdir()) if p.name != "timings.txt"}


def test_capacitance(capsys, fixtures, tmp_path):
    status, path, _ = run_cli(capsys, "capacitance", "--config", str(fixtures / "capacitance_sphere.json"),
                              "--out", str(tmp_path))
    assert status == 0
    shape = json.loads((path / "shape.json").read_text())
    assert shape["C"] == pytest.approx(4 * np.pi, rel=0.02)
    manifest = json.loads((path / "manifest.json").read_text())
    assert manifest["outputs"] == ["manifest.json", "shape.json", "timings.txt"]


def test_single_sphere_charge_and_amplitude(capsys, fixtures, tmp_path):
    status, path, _ = run_cli(capsys, "solve-discrete", "--config", str(fixtures / "single_sphere.json"),
                              "--out", str(tmp_path))
    assert status == 0
    s = ShapeSummary.sphere(0.01)
    ct = effective_capacitance(s.capacitance_C, s.area, 100.0)
    (row,) = read_csv(path / "charges.csv")
    Q = float(row["re_Q"]) + 1j * float(row["im_Q"])
    assert Q == pytest.approx(-ct, rel=1e-12)  # U_e = 1 at the origin
    for r in read_csv(path / "amplitude.csv"):
        A = float(r["re_A"]) + 1j * float(r["im_A"])
        assert A == pytest.approx(-ct / (4 * np.pi), rel=1e-12)
        assert float(r["abs_A2"]) == pytest.approx(abs(A) ** 2)


def test_rerun_is_byte_identical(capsys, fixtures, tmp_path):
    cfg = str(fixtures / "poisson_cloud.json")
    _, a, _ = run_cli(capsys, "solve-discrete", "--config", cfg, "--out", str(tmp_path / "a"))
    _, b, _ = run_cli(capsys, "solve-discrete", "--config", cfg, "--out", str(tmp_path / "b"))
    assert a.name.split("-", 1)[1] == b.name.split("-", 1)[1]
    assert snapshot(a) == snapshot(b)
    assert {"particles.csv", "charges.csv", "amplitude.csv", "field.csv"} <= set(snapshot(a))


def test_manifest_replay_and_seed_override(capsys, fixtures, tmp_path):
    _, a, _ = run_cli(capsys, "solve-discrete", "--config", str(fixtures / "poisson_cloud.json"),
                      "--out", str(tmp_path / "a"))
    _, b, _ = run_cli(capsys, "solve-discrete", "--config", str(a / "manifest.json"), "--out", str(tmp_path / "b"))
    assert snapshot(a) == snapshot(b)
    _, c, _ = run_cli(capsys, "solve-discrete", "--config", str(fixtures / "poisson_cloud.json"),
                      "--seed", "8", "--out", str(tmp_path / "c"))
    assert (a / "particles.csv").read_bytes() != (c / "particles.csv").read_bytes()
    assert json.loads((c / "manifest.json").read_text())["seed"] == 8


def test_config_hash_depends_on_seed_and_command():
    cfg = {"schema_version": 1}
    assert config_hash("design", cfg, 0) != config_hash("design", cfg, 1)
    assert config_hash("design", cfg, 0) != config_hash("validate", cfg, 0)


def test_iterative_lattice_writes_trace(capsys, fixtures, tmp_path):
    status, path, _ = run_cli(capsys, "solve-discrete", "--config", str(fixtures / "lattice_free.json"),
                              "--out", str(tmp_path))
    assert status == 0
    manifest = json.loads((path / "manifest.json").read_text())
    assert manifest["M"] == 27 and manifest["solver"] == "iterative"
    steps = [float(r["update_max_norm"]) for r in read_csv(path / "iteration.csv")]
    assert steps[-1] <= 1e-12 and len(steps) == manifest["iterations"]


def test_continuum_outputs(capsys, fixtures, tmp_path):
    status, path, _ = run_cli(capsys, "solve-continuum", "--config", str(fixtures / "continuum.json"),
                              "--out", str(tmp_path))
    assert status == 0
    header, values = read_field(path / "effective_field.json")
    assert header["field"] == "U_e" and values.shape == (8, 8, 8)
    manifest = json.loads((path / "manifest.json").read_text())
    assert manifest["residuals"]["effective_field"] <= 1e-10


def test_design_passes(capsys, fixtures, tmp_path):
    status, path, _ = run_cli(capsys, "design", "--config", str(fixtures / "design_uniform.json"),
                              "--out", str(tmp_path))
    assert status == 0
    report = json.loads((path / "validation.json").read_text())
    assert report["max_rel_ctilde_error"] <= 1e-10
    _, N = read_field(path / "N.json")
    assert np.all(N.real > 0)


def test_validate_and_oracle(capsys, fixtures, tmp_path):
    status, path, _ = run_cli(capsys, "validate", "--config", str(fixtures / "validate.json"), "--out", str(tmp_path))
    report = json.loads((path / "validation.json").read_text())
    assert status == (0 if report["passed"] else 3)
    assert report["checks"]["particle_impedance"]["passed"]
    status, path, _ = run_cli(capsys, "oracle-compare", "--config", str(fixtures / "oracle.json"),
                              "--out", str(tmp_path))
    assert status == 0
    assert max(float(r["rel_err"]) for r in read_csv(path / "oracle_compare.csv")) <= 0.05


def test_convergence_small(capsys, fixtures, tmp_path):
    status, path, _ = run_cli(capsys, "convergence-study", "--config", str(fixtures / "convergence_small.json"),
                              "--out", str(tmp_path))
    rows = read_csv(path / "convergence.csv")
    assert [int(r["n"]) for r in rows] == [3, 6]
    assert status in (0, 3)


def test_schema_error_has_pointer(capsys, fixtures, tmp_path):
    cfg = json.loads((fixtures / "validate.json").read_text())
    cfg["particles"]["h"][1] = {"re": 1}
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(cfg))
    status, _, err = run_cli(capsys, "validate", "--config", str(p), "--out", str(tmp_path))
    assert status == 2
    assert "/particles/h/1" in err


def test_unknown_key_rejected(capsys, fixtures, tmp_path):
    cfg = json.loads((fixtures / "single_sphere.json").read_text())
    cfg["typo"] = 1
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(cfg))
    assert run_cli(capsys, "solve-discrete", "--config", str(p), "--out", str(tmp_path))[0] == 2


def test_numerical_error_exit_and_manifest(capsys, fixtures, tmp_path):
    cfg = json.loads((fixtures / "single_sphere.json").read_text())
    cfg["particles"]["centers"] = [[0, 0, 0], [0.005, 0, 0]]  # overlapping spheres
    p = tmp_path / "overlap.json"
    p.write_text(json.dumps(cfg))
    status, _, err = run_cli(capsys, "solve-discrete", "--config", str(p), "--out", str(tmp_path / "runs"))
    assert status == 1 and "Error" in err
    (run_dir,) = (tmp_path / "runs").iterdir()
    assert "error" in json.loads((run_dir / "manifest.json").read_text())


def test_relative_paths_resolve_against_config(capsys, fixtures, tmp_path):
    shutil.copy(fixtures / "single_sphere.json", tmp_path / "cfg.json")
    cfg = json.loads((tmp_path / "cfg.json").read_text())
    cfg["particles"]["h"] = {"path": "h.json"}
    header = {"format": "smallscat-grid", "version": 1, "field": "h", "lower": [-1, -1, -1],
              "spacing": 2.0, "shape": [1, 1, 1], "k": 0.1, "values": [[100.0, 0.0]]}
    (tmp_path / "h.json").write_text(json.dumps(header))
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    status, path, _ = run_cli(capsys, "solve-discrete", "--config", str(tmp_path / "cfg.json"),
                              "--out", str(tmp_path / "runs"))
    assert status == 0
    assert float(read_csv(path / "particles.csv")[0]["re_h"]) == 100.0
