import hashlib
import json

import pytest

from brwlab.cli import main
from brwlab.parallel import resolve_workers

SMALL = {
    "schema_version": 1, "seed": 11,
    "simulate": {"replicas": 600, "n_max": 5},
    "min_tail": {"x_grid": [2, 3, 4, 5], "replicas": 1200, "ess_floor": 100},
    "w_tail": {"replicas": 3000},
    "conditional": {"replicas": 1000, "x": 4, "ess_floor": 100},
    "renewal": {"replicas": 1500, "horizon": 500, "exp_sum_x": [3, 5]},
}


def write_cfg(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def manifest_files(out):
    m = json.loads((out / "manifest.json").read_text())
    return {k: v["files"] for k, v in m["runs"].items()}


def test_validate_builtin(tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["validate", "--out", str(out)]) == 0
    doc = json.loads((out / "validate.json").read_text())
    assert abs(doc["log_laplace"]["kappa"] - 2.0) < 1e-9
    assert "kappa=2" in capsys.readouterr().out


def test_validate_lattice_model_fails(tmp_path):
    cfg = {"schema_version": 1, "model": {"family": "fixed_count_iid", "params": {
        "n_children": 2,
        "displacement": {"kind": "two_point", "a": 0.2876820724517809,
                         "b": 1.3862943611198906, "p": 0.5}}}}
    out = tmp_path / "o"
    assert main(["validate", "--config", write_cfg(tmp_path, cfg), "--out", str(out)]) == 1
    doc = json.loads((out / "validate.json").read_text())
    verdicts = {e["condition"]: e["verdict"] for e in doc["conditions"]}
    assert verdicts["1.3"] == "fail" and verdicts["1.1"] == "pass"


def test_malformed_json(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text('{"schema_version": 1,')
    assert main(["validate", "--config", str(p), "--out", str(tmp_path)]) == 2
    assert "malformed JSON" in capsys.readouterr().err


def test_schema_violations(tmp_path):
    for cfg in ({"schema_version": 2}, {"schema_version": 1, "bogus": 1},
                {"schema_version": 1, "model": {"family": "binary_gaussian"}}):
        assert main(["validate", "--config", write_cfg(tmp_path, cfg),
                     "--out", str(tmp_path)]) == 2


def test_usage_errors():
    assert main(["frobnicate"]) == 2
    assert main([]) == 2


def test_empty_experiment(tmp_path, capsys):
    assert main(["simulate", "--replicas", "0", "--out", str(tmp_path)]) == 2
    assert "EmptyExperiment" in capsys.readouterr().err


def test_simulate_outputs(tmp_path):
    out = tmp_path / "o"
    # the verdict on 600 heavy-tailed replicas may go either way; the format may not
    assert main(["simulate", "--config", write_cfg(tmp_path, SMALL), "--out", str(out)]) in (0, 1)
    lines = (out / "simulate.csv").read_bytes().split(b"\n")
    assert lines[0] == (b"seed,replica,n,W_n(1.0),W_n(2.0),D_n,M_n,M,ustar_gen,certified,"
                        b"prune_budget")
    assert len(lines) == 1 + 600 * 6 + 1 and lines[-1] == b""
    files = manifest_files(out)["simulate"]
    for name, digest in files.items():
        assert hashlib.sha256((out / name).read_bytes()).hexdigest() == digest


def test_min_tail_outputs(tmp_path):
    out = tmp_path / "o"
    assert main(["min-tail", "--config", write_cfg(tmp_path, SMALL), "--out", str(out)]) in (0, 1)
    doc = json.loads((out / "min_tail.json").read_text())
    assert doc["envelope_ok"]
    assert doc["fit"]["kind"] == "exp_in_x"
    header = (out / "min_tail.csv").read_text().splitlines()[0]
    assert header == "x,p_hat,se,ess,prune_budget"


@pytest.mark.parametrize("command", ["simulate", "min-tail", "w-tail", "conditional",
                                     "renewal"])
def test_worker_count_does_not_change_artifacts(tmp_path, command):
    cfg = write_cfg(tmp_path, SMALL)
    hashes = []
    for w in (1, 8):
        out = tmp_path / f"w{w}"
        main([command, "--config", cfg, "--out", str(out), "--workers", str(w)])
        hashes.append(manifest_files(out)[command])
    assert hashes[0] == hashes[1] and hashes[0]


def test_seed_flag_overrides_config(tmp_path):
    cfg = write_cfg(tmp_path, SMALL)
    main(["simulate", "--config", cfg, "--out", str(tmp_path / "a")])
    main(["simulate", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "12"])
    a = manifest_files(tmp_path / "a")["simulate"]["simulate.csv"]
    b = manifest_files(tmp_path / "b")["simulate"]["simulate.csv"]
    assert a != b


def test_workers_env_fallback(monkeypatch):
    monkeypatch.setenv("BRWLAB_WORKERS", "3")
    assert resolve_workers(None) == 3
    assert resolve_workers(2) == 2


def test_report_partial_and_empty(tmp_path, capsys):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["report", "--out", str(empty)]) == 3
    assert "MissingArtifact" in capsys.readouterr().err
    out = tmp_path / "o"
    main(["validate", "--out", str(out)])
    main(["simulate", "--config", write_cfg(tmp_path, SMALL), "--out", str(out)])
    assert main(["report", "--out", str(out)]) == 0
    rows = json.loads((out / "report.json").read_text())["rows"]
    assert [r["criterion"] for r in rows] == list(range(1, 16))
    status = {r["criterion"]: r["status"] for r in rows}
    assert status[1] == "pass"
    assert status[6] == "not run" and status[13] == "not run"
    assert set(manifest_files(out)) == {"validate", "simulate", "report"}
