import csv
import json

import numpy as np
import pytest

from opebench.cli import main
from opebench.core import discounted_returns, load_dataset
from opebench.policies import TabularPolicy, load_json, save_json
from opebench.simulator import load_ground_truth


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """simulate -> cluster -> discretize -> learn -> behavior, shared by the tests below."""
    d = tmp_path_factory.mktemp("cli")
    p = {name: str(d / name) for name in (
        "d.jsonl", "gt.json", "cm.json", "bins.json", "dd.jsonl", "pi.json", "mdp.json", "q.json", "pib.json")}
    assert main(["simulate", "--scenario", "ConfoundedNoTreat", "--n", "400", "--seed", "1",
                 "--out", p["d.jsonl"], "--truth-out", p["gt.json"]]) == 0
    assert main(["cluster", "--k", "6", "--in", p["d.jsonl"], "--out-model", p["cm.json"],
                 "--out-bins", p["bins.json"]]) == 0
    assert main(["discretize", "--in", p["d.jsonl"], "--model", p["cm.json"], "--bins", p["bins.json"],
                 "--out", p["dd.jsonl"]]) == 0
    assert main(["learn", "--in", p["dd.jsonl"], "--out-policy", p["pi.json"], "--out-model", p["mdp.json"],
                 "--out-q", p["q.json"], "--unvisited", "dead"]) == 0
    assert main(["behavior", "--in", p["dd.jsonl"], "--out", p["pib.json"]]) == 0
    p["dir"] = d
    return p


def test_pipeline_outputs(pipeline):
    ds = load_dataset(pipeline["d.jsonl"])
    assert len(ds) == 400
    assert load_ground_truth(pipeline["gt.json"]).config.hidden_covariate
    dd = load_dataset(pipeline["dd.jsonl"])
    assert dd.is_discretized and dd.n_states == 6
    pi = load_json(pipeline["pi.json"])
    assert isinstance(pi, TabularPolicy) and pi.deterministic and pi.n_states == 6
    pib = load_json(pipeline["pib.json"])
    np.testing.assert_allclose(pib.probs.sum(axis=1), 1.0)


def test_simulate_from_config_file(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n_treat_levels": 2, "n_axes": 1}))
    out = tmp_path / "d.jsonl"
    assert main(["simulate", "--scenario", str(cfg), "--n", "20", "--out", str(out)]) == 0
    assert load_dataset(out).action_grid == (2, 1)


def test_evaluate_and_critic(pipeline, capsys):
    crit = str(pipeline["dir"] / "crit.json")
    assert main(["critic", "--model", pipeline["mdp.json"], "--policy", pipeline["pib.json"], "--out", crit]) == 0
    out = str(pipeline["dir"] / "est.json")
    assert main(["evaluate", "--in", pipeline["dd.jsonl"], "--policy", pipeline["pib.json"],
                 "--behavior", pipeline["pib.json"], "--critic", crit, "--model", pipeline["mdp.json"],
                 "--estimators", "is,wis,wdr,mb", "--out", out]) == 0
    res = json.loads(open(out).read())
    assert set(res) == {"is", "wis", "wdr", "mb"}
    # on-policy: the normalized estimate is the plain mean return
    dd = load_dataset(pipeline["dd.jsonl"])
    assert res["wis"]["value"] == pytest.approx(discounted_returns(dd, 0.95).mean(), rel=1e-9)


def test_evaluate_warns_when_all_weights_zero(pipeline, tmp_path, capsys):
    dd = load_dataset(pipeline["dd.jsonl"])
    # a policy that never repeats any first logged action
    never = np.ones((dd.n_states, dd.n_actions))
    for tr in dd:
        never[tr.state_ids[0], tr.actions[0]] = 0.0
    pol = tmp_path / "never.json"
    save_json(TabularPolicy(never / never.sum(axis=1, keepdims=True)), pol)
    # behavior with full support so no step violates it
    pib = tmp_path / "flat.json"
    save_json(TabularPolicy(np.full((dd.n_states, dd.n_actions), 1 / dd.n_actions)), pib)
    capsys.readouterr()
    assert main(["evaluate", "--in", pipeline["dd.jsonl"], "--policy", str(pol), "--behavior", str(pib),
                 "--estimators", "wis"]) == 0
    captured = capsys.readouterr()
    assert json.loads(captured.out)["wis"]["value"] == 0.0
    assert "every importance weight is zero" in captured.err


def test_diagnose_json_and_csv(pipeline):
    js = str(pipeline["dir"] / "diag.json")
    assert main(["diagnose", "--in", pipeline["dd.jsonl"], "--policy", pipeline["pi.json"],
                 "--behavior", pipeline["pib.json"], "--report", js]) == 0
    rep = json.loads(open(js).read())
    assert rep["weights"]["n_total"] == 400 and rep["matched"]["n_total"] == 400
    assert rep["matched"]["n_matching"] == rep["weights"]["n_nonzero"]
    cs = str(pipeline["dir"] / "diag.csv")
    assert main(["diagnose", "--in", pipeline["dd.jsonl"], "--policy", pipeline["pi.json"],
                 "--behavior", pipeline["pib.json"], "--report", cs]) == 0
    rows = dict(csv.reader(open(cs)))
    assert rows["metric"] == "value" and rows["n_total"] == "400"


def test_ucurve(pipeline, capsys):
    capsys.readouterr()
    assert main(["ucurve", "--in", pipeline["dd.jsonl"], "--policy", pipeline["pi.json"],
                 "--dose-bins", pipeline["bins.json"], "--axis", "fluid", "--bins", "5"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "bin_low,bin_high,count,mortality" and len(lines) == 6
    assert sum(int(line.split(",")[2]) for line in lines[1:]) == 400


def test_experiment(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"n_patients": 200, "k_values": [4], "n_replicates": 2, "lift_samples": 50,
                                "estimators": ["wis"], "policies": ["noaction"]}))
    assert main(["experiment", "--spec", str(spec), "--out-dir", str(tmp_path / "out"), "--format", "json"]) == 0
    rep = json.loads((tmp_path / "out" / "report.json").read_text())
    assert len(rep["records"]) == 2


def test_errors_exit_with_status_one(tmp_path, pipeline, capsys):
    assert main(["learn", "--in", str(tmp_path / "missing.jsonl"), "--out-policy", str(tmp_path / "p.json")]) == 1
    assert "error" in capsys.readouterr().err
    # a fitted model is not a policy file
    with pytest.raises(SystemExit):
        main(["evaluate", "--in", pipeline["dd.jsonl"], "--policy", pipeline["mdp.json"],
              "--behavior", pipeline["pib.json"]])
    with pytest.raises(SystemExit):
        main(["simulate", "--n", "3"])
