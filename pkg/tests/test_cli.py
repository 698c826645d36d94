import csv
import io
import json
import math
import subprocess
import sys

import pytest

from randprod.cli import main


def run_cli(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_run_pure_rotation(tmp_path, capsys):
    csv_path, json_path = tmp_path / "t.csv", tmp_path / "t.json"
    code, _, _ = run_cli(capsys, "run", "--builtin", "pure_rotation", "--theta", "1.0",
                         "--steps", "200", "--track", "1,0", "--out-csv", str(csv_path),
                         "--out-json", str(json_path))
    assert code == 0
    rows = list(csv.DictReader(csv_path.open()))
    assert len(rows) == 200 and rows[-1]["n"] == "200"
    assert float(rows[-1]["psi_0"]) / 200 == pytest.approx(math.cos(1.0), abs=1e-12)
    summary = json.loads(json_path.read_text())
    assert summary["final"][0]["tracked"][0]["phi_over_n"] == pytest.approx(1.0, abs=1e-12)
    assert summary["diagnostics"][0]["verdict"] == "diverged(0.001)"


def test_run_record_every_and_replicas(tmp_path, capsys):
    path = tmp_path / "t.csv"
    code, out, _ = run_cli(capsys, "run", "--builtin", "scalar_iid", "--steps", "25",
                           "--record-every", "10", "--replicas", "2", "--out-csv", str(path))
    assert code == 0
    rows = list(csv.DictReader(path.open()))
    assert [(r["replica"], r["n"]) for r in rows] == [
        ("0", "10"), ("0", "20"), ("0", "25"), ("1", "10"), ("1", "20"), ("1", "25")]
    assert json.loads(out)["replicas"] == 2


def test_run_is_deterministic(tmp_path, capsys):
    paths = [tmp_path / "a.csv", tmp_path / "b.csv"]
    for p in paths:
        assert run_cli(capsys, "run", "--builtin", "positive_bernoulli", "--steps", "300",
                       "--seed", "5", "--out-csv", str(p))[0] == 0
    assert paths[0].read_bytes() == paths[1].read_bytes()


@pytest.mark.parametrize("argv", [
    ["run", "--builtin", "scalar_iid", "--steps", "0"],
    ["run", "--builtin", "nope"],
    ["run"],
    ["run", "--builtin", "scalar_iid", "--seed", "-1"],
    ["estimate", "--builtin", "scalar_iid", "--method", "bogus"],
    ["verify", "--suite", "nope"],
    ["run", "--builtin", "scalar_iid", "--param", "oops"],
    ["run", "--builtin", "signed_pair", "--dim", "3"],
])
def test_usage_errors_exit_2(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        code = main(argv)
        raise SystemExit(code)
    assert exc.value.code == 2


def test_bad_probabilities_name_the_atom(tmp_path, capsys):
    cfg = tmp_path / "e.yaml"
    cfg.write_text("dim: 1\natoms:\n  - {prob: 0.5, A: 2, B: 1}\n  - {prob: 0.2, A: 2, B: 3}\n")
    code, _, err = run_cli(capsys, "run", "--config", str(cfg), "--steps", "10")
    assert code == 2 and "prob" in err


def test_numerical_abort_exit_3(capsys):
    code, _, err = run_cli(capsys, "run", "--builtin", "diag_rotation", "--steps", "2000", "--track", "0,1")
    assert code == 3 and "numerical abort" in err and "step 513" in err


def test_config_merging(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("ensemble:\n  builtin: scalar_iid\nsteps: 50\nseed: 3\nrecord_every: 10\n")
    code, out, _ = run_cli(capsys, "run", "--config", str(cfg), "--steps", "40")
    assert code == 0
    s = json.loads(out)
    assert s["steps"] == 40 and s["seed"] == 3 and s["record_every"] == 10


@pytest.mark.parametrize("method", ["psi", "phi", "orbit", "lyapunov"])
def test_estimate_methods(method, tmp_path, capsys):
    path = tmp_path / "r.csv"
    code, out, _ = run_cli(capsys, "estimate", "--builtin", "scalar_iid", "--method", method,
                           "--steps", "500", "--replicas", "8", "--tail", "10", "--out-csv", str(path))
    assert code == 0
    report = json.loads(out)
    assert report["method"].startswith(method)
    rows = list(csv.reader(io.StringIO(path.read_text())))
    assert rows[0] == ["replica", "value"] and len(rows) == 9


def test_estimate_integral_and_gamma_eps(capsys):
    code, out, _ = run_cli(capsys, "estimate", "--builtin", "scalar_iid", "--method", "integral",
                           "--samples", "5000")
    assert code == 0
    r = json.loads(out)
    assert abs(r["value"] - 1.0) <= 4 * r["std_err"]
    code, out, _ = run_cli(capsys, "estimate", "--builtin", "scalar_iid", "--method", "gamma-eps",
                           "--eps", "1e-3", "--eps=-1e-3", "--steps", "500", "--replicas", "4")
    assert code == 0
    assert [row["eps"] for row in json.loads(out)["ratios"]] == [1e-3, -1e-3]


def test_estimate_default_replicas(capsys):
    code, out, _ = run_cli(capsys, "estimate", "--builtin", "scalar_iid", "--method", "psi",
                           "--steps", "100")
    assert code == 0 and json.loads(out)["replicas"] == 64


def test_verify_oracles_suite(tmp_path, capsys):
    j, c = tmp_path / "v.json", tmp_path / "v.csv"
    code, out, _ = run_cli(capsys, "verify", "--suite", "oracles", "--seed", "1",
                           "--out-json", str(j), "--out-csv", str(c))
    assert code == 0
    assert out.splitlines()[-1] == "3/3 passed"
    report = json.loads(j.read_text())
    assert report["passed"] and [k["key"] for k in report["checks"]] == [
        "oracle_equivalence", "trace_cocycle", "linear_trick"]
    assert c.read_text().startswith("check,passed,quantity,value\n")


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "randprod", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "verify" in proc.stdout
