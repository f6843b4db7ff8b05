import csv
import io
import json
import subprocess
import sys

import pytest

from ftwist import cli


def write(tmp_path, data, name="cfg.json"):
    p = tmp_path / name
    p.write_text(data if isinstance(data, str) else json.dumps(data))
    return str(p)


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = cli.run(list(argv), out, err)
    return code, out.getvalue(), err.getvalue()


def test_verify_passes_with_schema(tmp_path):
    cfg = write(tmp_path, {"entry": "trivial", "samples": 4, "verify": {"curvature_samples": 2}})
    code, out, _ = run("verify", "--config", cfg)
    assert code == cli.EXIT_OK
    rep = json.loads(out)
    assert rep["schema_version"] == cli.SCHEMA_VERSION
    assert rep["command"] == "verify" and rep["result"]["passed"]
    assert rep["config"]["entry"] == "trivial" and rep["exit_code"] == 0
    assert "timing" not in rep


def test_json_is_byte_identical_across_runs(tmp_path):
    cfg = write(tmp_path, {"entry": "randers-riem", "samples": 4,
                           "verify": {"curvature_samples": 2}})
    assert run("verify", "--config", cfg)[1] == run("verify", "--config", cfg)[1]


def test_fault_injection_exits_one(tmp_path):
    cfg = write(tmp_path, {"entry": "trivial", "samples": 4,
                           "verify": {"curvature_samples": 2,
                                      "fault_injection": {"spray": 1e-3}}})
    code, out, _ = run("verify", "--config", cfg)
    assert code == cli.EXIT_FAIL
    rows = {r["name"]: r for r in json.loads(out)["result"]["identities"]}
    assert rows["spray"]["flag"] == "paper-errata candidate"


def test_seed_and_tol_flags_override_config(tmp_path):
    cfg = write(tmp_path, {"entry": "trivial", "samples": 2, "seed": 1,
                           "verify": {"curvature_samples": 1}})
    code, out, _ = run("verify", "--config", cfg, "--seed", "7", "--tol", "1e-30", "--timing")
    rep = json.loads(out)
    assert rep["config"]["seed"] == 7 and rep["result"]["seed"] == 7
    assert rep["config"]["tol"] == 1e-30
    assert rep["timing"]["seconds"] > 0
    assert code in (cli.EXIT_OK, cli.EXIT_FAIL)


@pytest.mark.parametrize("data, fragment", [
    ("{not json", "not valid JSON"),
    ({"entry": "nope"}, "unknown catalog entry"),
    ({"entry": "trivial", "bogus": 1}, "unknown config keys"),
    ({"entry": "trivial", "samples": 0}, "samples"),
    ({"m1": "euclid-2d"}, "missing"),
    ({"m1": {"id": "r", "kind": "randers", "dim": 2, "b": ["2", "0"]},
      "m2": "euclid-1d"}, "randers bound"),
    ({"entry": "trivial", "format": "xml"}, "format"),
])
def test_malformed_config_exits_two(tmp_path, data, fragment):
    code, out, err = run("verify", "--config", write(tmp_path, data))
    assert code == cli.EXIT_CONFIG and out == ""
    assert fragment in err


def test_missing_config_file_exits_two(tmp_path):
    code, _, err = run("verify", "--config", str(tmp_path / "absent.json"))
    assert code == cli.EXIT_CONFIG and "cannot read config" in err


def test_bad_command_exits_two(tmp_path, capsys):
    assert run("frobnicate", "--config", "x")[0] == cli.EXIT_CONFIG


def test_unknown_predicate_exits_two(tmp_path):
    cfg = write(tmp_path, {"entry": "trivial", "classify": {"predicates": ["flat"]}})
    assert run("classify", "--config", cfg)[0] == cli.EXIT_CONFIG


def test_inspect_point_outside_domain_exits_three(tmp_path):
    cfg = write(tmp_path, {"entry": "riem-riem-const",
                           "inspect": {"point": [0.0, 0.0, 0.0, 0.0, 1, 0, 1, 0]}})
    code, _, err = run("inspect", "--config", cfg)
    assert code == cli.EXIT_DOMAIN and "domain error" in err


def test_inspect_trivial_curvature_vanishes(tmp_path):
    cfg = write(tmp_path, {"entry": "trivial"})
    code, out, _ = run("inspect", "--config", cfg)
    assert code == cli.EXIT_OK
    blocks = json.loads(out)["result"]["blocks"]
    curv = [b for b in blocks if b["tensor"] in ("curvature", "nonlinear_curvature")]
    assert curv and all(b["max_abs"] < 1e-8 for b in curv)
    assert {"metric", "spray", "connection", "cartan", "berwald", "mean_berwald"} <= \
        {b["tensor"] for b in blocks}
    assert "warped_relation" in json.loads(out)["result"]


def test_inspect_warped_reports_relation(tmp_path):
    cfg = write(tmp_path, {"entry": "flat-cone"})
    code, out, _ = run("inspect", "--config", cfg)
    rel = json.loads(out)["result"]["warped_relation"]
    assert code == cli.EXIT_OK and rel["residual"] < 1e-4 and rel["grad_f_norm2"] > 0


def test_inspect_labels_blocks(tmp_path):
    cfg = write(tmp_path, {"entry": "randers-riem"})
    blocks = json.loads(run("inspect", "--config", cfg)[1])["result"]["blocks"]
    labels = {b["label"] for b in blocks}
    assert {"g_ij", "g_αβ", "B^i_jkl", "B^α_βγλ"} <= labels


def test_inspect_csv_and_text(tmp_path):
    cfg = write(tmp_path, {"entry": "trivial"})
    code, out, _ = run("inspect", "--config", cfg, "--format", "csv")
    rows = list(csv.reader(io.StringIO(out)))
    assert rows[0] == ["tensor", "pattern", "label", "index", "value"] and len(rows) > 10
    code, out, _ = run("inspect", "--config", cfg, "--format", "text")
    assert out.startswith("inspect trivial at")


def test_classify_json_and_text(tmp_path):
    cfg = write(tmp_path, {"entry": "riem-riem-const", "samples": 8,
                           "classify": {"predicates": ["riemannian", "berwald"]}})
    code, out, _ = run("classify", "--config", cfg)
    body = json.loads(out)["result"]
    assert code == cli.EXIT_OK and body["inconsistent"] == []
    assert [r["verdict"] for r in body["reports"]] == ["holds", "holds"]
    code, out, _ = run("classify", "--config", cfg, "--format", "text")
    assert "riemannian" in out and "holds" in out


def test_classify_csv_default_battery(tmp_path):
    cfg = write(tmp_path, {"entry": "randers-euclid", "samples": 6, "format": "csv"})
    code, out, _ = run("classify", "--config", cfg)
    rows = list(csv.reader(io.StringIO(out)))
    assert code == cli.EXIT_OK
    assert rows[0] == ["predicate", "verdict", "max_residual", "tolerance"]
    assert len(rows) == 1 + len(cli.classify.PREDICATES)


def test_consistency_scan_sees_nested_failures():
    assert cli._consistent({"a": {"iff_consistent": True}, "theorem_witnessed": True})
    assert not cli._consistent({"blocks": {"twist_on_first_factor": {"iff_consistent": False}}})


GEO = {"entry": "riem-riem-const",
       "geodesic": {"x0": [1.5, 0.5, 0.5, 0.5], "y0": [0.1, 0.2, 0.3, 0.1],
                    "t_end": 0.2, "dt": 0.01}}


def test_geodesic_csv_columns_and_drift(tmp_path):
    code, out, _ = run("geodesic", "--config", write(tmp_path, GEO))
    assert code == cli.EXIT_OK
    lines = out.splitlines()
    assert lines[-1].startswith("# drift=") and "truncated=false" in lines[-1]
    rows = list(csv.reader(io.StringIO("\n".join(lines[:-1]))))
    assert rows[0] == ["t", "x1", "x2", "x3", "x4", "xdot1", "xdot2", "xdot3", "xdot4", "F"]
    assert len(rows) == 22
    drift = float(lines[-1].split("=")[1].split()[0])
    assert drift < 1e-8


def test_geodesic_truncation_exits_four(tmp_path):
    cfg = dict(GEO, geodesic={"x0": [1.05, 0, 0, 0], "y0": [-3, 0, 0.1, 0],
                              "t_end": 1.0, "dt": 0.01})
    code, out, _ = run("geodesic", "--config", write(tmp_path, cfg), "--format", "json")
    res = json.loads(out)["result"]
    assert code == cli.EXIT_TRUNCATED and res["truncated"] and res["reason"]
    assert res["t"][-1] < 1.0


def test_geodesic_missing_option_exits_two(tmp_path):
    cfg = {"entry": "trivial", "geodesic": {"x0": [0, 0, 0, 0]}}
    code, _, err = run("geodesic", "--config", write(tmp_path, cfg))
    assert code == cli.EXIT_CONFIG and "y0" in err


def test_out_file(tmp_path):
    cfg = write(tmp_path, {"entry": "trivial", "samples": 2, "verify": {"curvature_samples": 1}})
    target = tmp_path / "rep.json"
    code, out, _ = run("verify", "--config", cfg, "--out", str(target))
    assert code == 0 and out == "" and json.loads(target.read_text())["result"]["passed"]


def test_module_entry_point(tmp_path):
    cfg = write(tmp_path, {"entry": "trivial", "samples": 2, "verify": {"curvature_samples": 1},
                           "format": "text"})
    proc = subprocess.run([sys.executable, "-m", "ftwist", "verify", "--config", cfg],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "PASS" in proc.stdout.splitlines()[0]
