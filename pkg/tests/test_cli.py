import json

import pytest

from tdnnas.cli import main, report_rows
from tdnnas.config import Config
from tdnnas.formats import (
    artifact_config_hash,
    load_checkpoint,
    load_metrics,
    load_run_record,
    load_spec_file,
    spec_from_dict,
)
from tdnnas.tdnnf import model_param_count

SMALL = {
    "task": {"lag": 1, "n_seq": 40, "T_seq": 30, "test_n_seq": 10, "F": 3},
    "model": {"layers": 2, "d_max": 1, "hidden_dim": 8, "bottleneck": 4},
    "search": {"epochs_search": 1, "epochs_arch": 1, "epochs_retrain": 1, "lr": 0.03},
}


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({**SMALL, "out": str(tmp_path / "runs")}))
    return path


def run(*argv):
    return main([str(a) for a in argv])


def test_gen_data_is_deterministic(cfg_path, tmp_path):
    assert run("gen-data", "--config", cfg_path, "--out", tmp_path / "a") == 0
    assert run("gen-data", "--config", cfg_path, "--out", tmp_path / "b") == 0
    for name in ("train.ds", "test.ds"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_search_writes_hashed_artifacts(cfg_path, tmp_path):
    assert run("search", "--config", cfg_path, "--method", "pipe-gumbel", "--eta", "0.03") == 0
    out = tmp_path / "runs" / "pipe-gumbel-eta0.03-seed0"
    cfg = Config.from_dict(json.loads(cfg_path.read_text()))
    cfg.search.method, cfg.search.eta = "pipe-gumbel", 0.03
    digest = cfg.digest()
    for name in ("supernet.ck", "stage1.ck", "derived.spec", "trajectory.trj", "run.json"):
        assert artifact_config_hash(out / name) == digest, name
    record = load_run_record(out / "run.json")
    assert record["eta"] == 0.03 and record["trajectory"] == "trajectory.trj"
    tensors, _ = load_checkpoint(out / "supernet.ck")
    assert any(k.startswith("arch.") for k in tensors) and any(k.startswith("model.") for k in tensors)


def test_search_is_byte_reproducible(cfg_path, tmp_path):
    for d in ("a", "b"):
        assert run("search", "--config", cfg_path, "--seed", 5, "--out", tmp_path / d) == 0
    a, b = tmp_path / "a" / "pipe-gumbel-eta0-seed5", tmp_path / "b" / "pipe-gumbel-eta0-seed5"
    for name in ("supernet.ck", "stage1.ck", "derived.spec", "trajectory.trj"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    ra, rb = load_run_record(a / "run.json"), load_run_record(b / "run.json")
    ra.pop("wall_time"), rb.pop("wall_time")
    assert ra == rb


def test_derive_train_eval_round_trip(cfg_path, tmp_path):
    assert run("search", "--config", cfg_path) == 0
    out = tmp_path / "runs" / "pipe-gumbel-eta0-seed0"
    spec_path = tmp_path / "again.spec"
    assert run("derive", "--config", cfg_path, "--checkpoint", out / "supernet.ck", "--spec-out", spec_path) == 0
    assert load_spec_file(spec_path) == load_spec_file(out / "derived.spec")
    assert run("train", "--config", cfg_path, "--spec", spec_path, "--system-id", "retrained") == 0
    trained = tmp_path / "runs" / "retrained"
    metrics = load_metrics(trained / "metrics.json")
    assert 0 <= metrics["test"]["accuracy"] <= 1
    assert load_spec_file(trained / "model.spec") == load_spec_file(spec_path)
    assert run("eval", "--config", cfg_path, "--checkpoint", trained / "model.ck", "--spec", trained / "model.spec",
               "--metrics-out", tmp_path / "m.json") == 0
    assert load_metrics(tmp_path / "m.json")["test"] == metrics["test"]


def test_enumerate_refuses_full_size_space(tmp_path, capsys):
    path = tmp_path / "big.json"
    path.write_text(json.dumps({"model": {"layers": 14, "d_max": 6}}))
    assert run("enumerate", "--config", path) == 1
    err = capsys.readouterr().err
    assert str(7**28) in err and "exceeds enumeration cap 256" in err


def test_enumerate_and_random_search(cfg_path, tmp_path):
    assert run("enumerate", "--config", cfg_path) == 0
    lines = (tmp_path / "runs" / "oracle-seed0" / "oracle.csv").read_text().splitlines()
    assert lines[0].startswith("rank,index,arch") and len(lines) == 1 + 16
    assert run("random-search", "--config", cfg_path, "--samples", 2) == 0
    assert (tmp_path / "runs" / "random-seed0" / "model.ck").exists()


def test_report_orders_and_counts(cfg_path, tmp_path, capsys):
    for seed in (0, 1):
        assert run("search", "--config", cfg_path, "--seed", seed) == 0
    assert run("random-search", "--config", cfg_path, "--samples", 1) == 0
    assert run("report", tmp_path / "runs", "--out", tmp_path / "rep") == 0
    csv_lines = (tmp_path / "rep" / "report.csv").read_text().splitlines()
    assert csv_lines[0] == "system_id,method,eta,arch,heldout_accuracy,test_accuracy,params,wall_time"
    assert len(csv_lines) == 4
    md = (tmp_path / "rep" / "report.md").read_text()
    assert md.startswith("| System |") and md.count("\n") == 5
    records = [load_run_record(p) for p in sorted((tmp_path / "runs").rglob("run.json"))]
    for r in records:
        assert r["param_count"] == model_param_count(spec_from_dict(r["spec"]))
    rows = report_rows(records)
    accs = [r["test_accuracy"] for r in rows]
    assert accs == sorted(accs, reverse=True)


def test_report_tie_order_is_by_system_id():
    base = {"method": "m", "eta": 0.0, "arch": "{1}:{0}", "heldout": {"accuracy": 0.5}, "param_count": 3, "wall_time": 0}
    recs = [dict(base, system_id=s, test={"accuracy": a}) for s, a in (("b", 0.7), ("c", 0.9), ("a", 0.7))]
    assert [r["system_id"] for r in report_rows(recs)] == ["c", "a", "b"]
    assert len(report_rows(recs[:1])) == 1


def test_usage_errors_exit_two(capsys):
    with pytest.raises(SystemExit) as info:
        main(["no-such-command"])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        main(["search", "--bogus"])
    assert info.value.code == 2


def test_validation_errors_exit_one(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"search": {"colour": "red"}}))
    assert run("search", "--config", bad) == 1
    assert "unknown key(s) in search: colour" in capsys.readouterr().err
    assert run("search", "--method", "random", "--config", bad) == 1
    assert run("derive", "--checkpoint", tmp_path / "missing.ck") == 1
    bad.write_text("{not json")
    assert run("gen-data", "--config", bad) == 1
