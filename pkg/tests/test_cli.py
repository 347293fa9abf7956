import json
from pathlib import Path

import numpy as np
import pytest

from fwreco.classifier import MAP_DIM, Model, Standardizer, load_model, save_model
from fwreco.cli import main
from fwreco.features import N_FEATURES
from fwreco.flow_model import FLOW_COLUMNS

SIM = {"seed": 3, "n_orgs": 4, "vms_per_org": 5, "endpoints_per_vm": 2, "n_benign_clients": 4000,
       "n_scanners": 8, "days": 2, "configured_fraction": 0.3}
WINDOW = ["--window-start", "1704067200", "--window-end", str(1704067200 + 2 * 86400)]


def run(*argv) -> int:
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "sim.json").write_text(json.dumps(SIM))
    assert run("simulate", "--config", root / "sim.json", "--out", root / "sim") == 0
    assert run("featurize", "--flows", root / "sim/flows.csv", "--configs", root / "sim/configs.jsonl",
               *WINDOW, "--out", root / "feat") == 0
    assert run("train", "--features", root / "feat/features.csv", "--lambda-grid", "0.001",
               "--epochs", "5", "--seed", "1", "--model-out", root / "model.json",
               "--report-out", root / "report") == 0
    return root


def constant_model(path: Path, bias: float) -> Path:
    w = np.zeros(MAP_DIM)
    w[0] = bias
    save_model(Model(Standardizer(np.zeros(N_FEATURES), np.ones(N_FEATURES)), w, 1.0), path)
    return path


def toy_flows(path: Path, ips=(0b011, 0b101, 0b110, 0b111)) -> Path:
    rows = [f"{1704067200 + 60 * i},vmT,orgT,22,{ip},5000,inbound,tcp,syn,3" for i, ip in enumerate(ips)]
    path.write_text(",".join(FLOW_COLUMNS) + "\n" + "\n".join(rows) + "\n")
    return path


def read_jsonl(path):
    return [json.loads(line) for line in Path(path).read_text().splitlines()]


def test_simulate_outputs(pipeline):
    sim = pipeline / "sim"
    assert {p.name for p in sim.iterdir()} == {"flows.csv", "configs.jsonl", "truth.jsonl", "manifest.json"}
    manifest = json.loads((sim / "manifest.json").read_text())
    assert manifest["command"] == "simulate" and manifest["seeds"] == {"seed": 3}
    assert manifest["argv"][0] == "simulate"


def test_simulate_missing_config(tmp_path, capsys):
    code = run("simulate", "--config", tmp_path / "nope.json", "--out", tmp_path / "o")
    assert code == 1
    assert "nope.json" in capsys.readouterr().err


def test_simulate_unknown_key(tmp_path, capsys):
    (tmp_path / "c.json").write_text('{"seeed": 1}')
    assert run("simulate", "--config", tmp_path / "c.json", "--out", tmp_path / "o") == 1
    assert "unknown" in capsys.readouterr().err


def test_featurize_outputs(pipeline):
    feat = pipeline / "feat"
    header = (feat / "features.csv").read_text().splitlines()[0].split(",")
    assert header[:3] == ["vm_id", "endpoint_port", "remote_ip"]
    order = (feat / "feature_order.csv").read_text().splitlines()
    assert len(order) == N_FEATURES + 1


def test_featurize_bad_window(pipeline, tmp_path):
    code = run("featurize", "--flows", pipeline / "sim/flows.csv", "--configs", pipeline / "sim/configs.jsonl",
               "--window-start", "10", "--window-end", "5", "--out", tmp_path / "f")
    assert code == 1


def test_train_report(pipeline):
    rep = pipeline / "report"
    summary = json.loads((rep / "summary.json").read_text())
    for key in ("auc_svm", "auc_baseline", "lambda", "validation_auc", "n_allow", "n_deny", "n_holdout"):
        assert key in summary
    assert summary["lambda"] == 0.001
    assert 0.0 <= summary["auc_svm"] <= 1.0
    assert summary["auc_baseline"] == 0.5
    for name in ("roc.csv", "roc_baseline.csv", "histogram.csv", "level_importance.csv", "manifest.json"):
        assert (rep / name).is_file()
    assert load_model(pipeline / "model.json").regularization == 0.001


def test_train_missing_features(tmp_path, capsys):
    code = run("train", "--features", tmp_path / "missing.csv", "--model-out", tmp_path / "m.json",
               "--report-out", tmp_path / "r")
    assert code == 1 and "missing.csv" in capsys.readouterr().err


def test_recommend_for_default_endpoints(pipeline):
    out = pipeline / "rules.jsonl"
    assert run("recommend", "--model", pipeline / "model.json", "--flows", pipeline / "sim/flows.csv",
               "--configs", pipeline / "sim/configs.jsonl", "--all-default-endpoints", "--out", out) == 0
    lines = read_jsonl(out)
    configured = {(c["vm_id"], c["endpoint_port"]) for c in read_jsonl(pipeline / "sim/configs.jsonl")
                  if not c["default"]}
    assert lines and all((d["vm_id"], d["endpoint_port"]) not in configured for d in lines)
    for d in lines:
        assert set(d) == {"vm_id", "endpoint_port", "rules", "noise", "L_used"}
        assert d["L_used"] == len(d["rules"]) <= 200
    assert (pipeline / "rules.jsonl.manifest.json").is_file()


def test_recommend_deny_all_model_gives_empty_rules(tmp_path):
    model = constant_model(tmp_path / "deny.json", -1.0)
    flows = toy_flows(tmp_path / "toy.csv")
    out = tmp_path / "r.jsonl"
    assert run("recommend", "--model", model, "--flows", flows, "--endpoint", "vmT:22", "--out", out) == 0
    assert read_jsonl(out) == [{"vm_id": "vmT", "endpoint_port": 22, "rules": [], "noise": 0, "L_used": 0}]


def test_recommend_single_rule_budget(tmp_path):
    model = constant_model(tmp_path / "allow.json", 1.0)
    flows = toy_flows(tmp_path / "toy.csv")
    out = tmp_path / "r.jsonl"
    assert run("recommend", "--model", model, "--flows", flows, "--endpoint", "vmT:22", "--L", "1",
               "--S", "8", "--width", "3", "--out", out) == 0
    (d,) = read_jsonl(out)
    assert d["L_used"] == 1 and d["noise"] == 4


def test_recommend_picks_fewest_rules_at_min_noise(tmp_path):
    model = constant_model(tmp_path / "allow.json", 1.0)
    flows = toy_flows(tmp_path / "toy.csv")
    out = tmp_path / "r.jsonl"
    assert run("recommend", "--model", model, "--flows", flows, "--endpoint", "vmT:22", "--S", "8",
               "--width", "3", "--out", out) == 0
    (d,) = read_jsonl(out)
    assert d["noise"] == 0 and d["L_used"] == 3


def test_recommend_unknown_endpoint(tmp_path, capsys):
    model = constant_model(tmp_path / "allow.json", 1.0)
    flows = toy_flows(tmp_path / "toy.csv")
    code = run("recommend", "--model", model, "--flows", flows, "--endpoint", "vmX:1", "--out", tmp_path / "o")
    assert code == 1 and "vmX" in capsys.readouterr().err


def test_recommend_corrupt_model(tmp_path):
    (tmp_path / "m.json").write_text('{"version": 1, "weights": [')
    flows = toy_flows(tmp_path / "toy.csv")
    assert run("recommend", "--model", tmp_path / "m.json", "--flows", flows, "--endpoint", "vmT:22",
               "--out", tmp_path / "o") == 1


def test_recommend_defaults():
    from fwreco.cli import build_parser

    args = build_parser().parse_args(["recommend", "--model", "m", "--flows", "f", "--all-default-endpoints",
                                      "--out", "o"])
    assert (args.L, args.S, args.width) == (200, 4096, 32)


def test_group_toy(tmp_path):
    (tmp_path / "ips.txt").write_text("011\n101\n110\n111\n")
    out = tmp_path / "g.jsonl"
    assert run("group", "--ips", tmp_path / "ips.txt", "--L", "2", "--S", "8", "--width", "3", "--out", out) == 0
    (d,) = read_jsonl(out)
    assert d["noise"] == 1 and d["L_used"] == 2


def test_group_infeasible_exit_code(tmp_path, capsys):
    (tmp_path / "ips.txt").write_text("011\n101\n110\n111\n")
    code = run("group", "--ips", tmp_path / "ips.txt", "--L", "1", "--S", "2", "--width", "3",
               "--out", tmp_path / "g.jsonl")
    assert code == 2
    assert "impossible constraints" in capsys.readouterr().err


def test_group_single_ip(tmp_path):
    (tmp_path / "ips.txt").write_text("10.1.2.3\n")
    out = tmp_path / "g.jsonl"
    assert run("group", "--ips", tmp_path / "ips.txt", "--out", out) == 0
    assert read_jsonl(out) == [{"rules": ["10.1.2.3/32"], "noise": 0, "L_used": 1}]


def test_group_bad_address(tmp_path, capsys):
    (tmp_path / "ips.txt").write_text("10.1.2.3\nnot-an-ip\n")
    assert run("group", "--ips", tmp_path / "ips.txt", "--out", tmp_path / "g.jsonl") == 1
    assert ":2:" in capsys.readouterr().err


def test_replay_reproduces_output(tmp_path):
    (tmp_path / "ips.txt").write_text("1.2.3.4\n1.2.3.5\n9.9.9.9\n")
    out = tmp_path / "g.jsonl"
    assert run("group", "--ips", tmp_path / "ips.txt", "--L", "2", "--out", out) == 0
    first = out.read_bytes()
    out.unlink()
    assert run("replay", "--manifest", str(out) + ".manifest.json") == 0
    assert out.read_bytes() == first


def test_help_and_bad_arguments(capsys):
    assert run("--help") == 0
    assert "recommend" in capsys.readouterr().out
    assert run("group") == 1
    assert run("frobnicate") == 1
