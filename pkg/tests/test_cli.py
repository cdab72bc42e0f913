import json
import subprocess
import sys

import numpy as np
import pytest

from implisr.cli import main, read_points

GEN_TOML = """
[generate]
non_leaf_nodes = 3
min_non_leaf_nodes = 1
n_vars = 2
operators = ["add", "sub", "mul", "sin"]
N_points = 20
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "gen.toml").write_text(GEN_TOML)
    assert main(["generate", "--config", str(d / "gen.toml"), "--out", str(d / "train.jsonl"), "--seed", "1",
                 "--count", "24"]) == 0
    assert main(["generate", "--config", str(d / "gen.toml"), "--out", str(d / "val.jsonl"), "--seed", "2",
                 "--count", "8"]) == 0
    assert main(["train", "--data", str(d / "train.jsonl"), "--val", str(d / "val.jsonl"), "--preset", "tiny",
                 "--seed", "0", "--out", str(d / "m.ckpt"), "--max-steps", "3", "--batch-size", "8",
                 "--max-seq-len", "16"]) == 0
    return d


def test_generate_and_train_outputs(workdir):
    lines = (workdir / "train.jsonl").read_text().splitlines()
    assert len(lines) == 24
    assert set(json.loads(lines[0])) == {"skeleton", "constants", "points", "dims", "expr"}
    assert (workdir / "m.ckpt").exists()
    loss = (workdir / "m.ckpt.loss.csv").read_text().splitlines()
    assert loss[0] == "step,train_ce,val_ce" and len(loss) == 4


def test_infer_and_evaluate(workdir):
    out = workdir / "pred.json"
    code = main(["infer", "--ckpt", str(workdir / "m.ckpt"), "--points", str(workdir / "val.jsonl"), "--beam", "3",
                 "--max-len", "8", "--restarts", "1", "--out", str(out)])
    pred = json.loads(out.read_text())
    assert code in (0, 1)
    if code == 0:
        assert {"expr_prefix", "constants", "clfem", "log_prob", "all_candidates"} <= set(pred)
    else:
        assert pred["expr_prefix"] is None and pred["error"]
    truth = " ".join(json.loads((workdir / "val.jsonl").read_text().splitlines()[0])["expr"])
    rep = workdir / "rep.json"
    assert main(["evaluate", "--pred", str(out), "--truth", truth, "--M", "10", "--out", str(rep)]) == 0
    report = json.loads(rep.read_text())
    assert 0.0 <= report["fitness"] <= 1.0
    assert set(report["acc"]) == {"0.5", "0.7", "0.8", "0.9", "0.99"}


def test_evaluate_exact(tmp_path):
    pred = tmp_path / "p.json"
    pred.write_text(json.dumps({"expr_prefix": "sub add pow2 x_1 pow2 x_2 1.0".split()}))
    rep = tmp_path / "r.json"
    main(["evaluate", "--pred", str(pred), "--truth", "sub add pow2 x_1 pow2 x_2 1.0", "--out", str(rep)])
    assert json.loads(rep.read_text())["fitness"] >= 0.99


def test_baseline_gp(tmp_path):
    th = np.random.default_rng(0).uniform(0, 2 * np.pi, 60)
    pts = tmp_path / "circle.csv"
    np.savetxt(pts, np.column_stack([np.cos(th), np.sin(th)]), delimiter=",", header="x1,x2", comments="")
    out, stats = tmp_path / "gp.json", tmp_path / "gp.csv"
    assert main(["baseline-gp", "--points", str(pts), "--fitness", "clfem", "--seed", "3", "--population", "60",
                 "--generations", "3", "--stats", str(stats), "--out", str(out)]) == 0
    res = json.loads(out.read_text())
    assert res["expr_prefix"] and res["config"]["population"] == 60
    rows = stats.read_text().splitlines()
    assert rows[0] == "generation,best_fitness,mean_fitness" and len(rows) == 5


def test_bench(tmp_path):
    cfg = tmp_path / "b.toml"
    cfg.write_text('suite = "ai_feynman"\nmethod = ["gp_vanilla"]\ncount = 2\n'
                   '[gp]\npopulation = 12\ngenerations = 1\ntournament = 3\n[metric]\nM = 5\n')
    out = tmp_path / "res.csv"
    assert main(["bench", "--config", str(cfg), "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("suite,eq_id,method,sigma,n_points,seed,fitness,acc_0.5")
    assert len(lines) == 1 + 2 + 1


def test_read_points_csv_padding(tmp_path):
    p = tmp_path / "pts.csv"
    p.write_text("1.5,2\n-1,0.25\n")
    pts = read_points(str(p))
    assert pts.shape == (2, 3) and np.all(pts[:, 2] == 0) and pts[0, 0] == 1.5


def test_module_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "implisr", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("generate", "train", "infer", "evaluate", "baseline-gp", "bench"):
        assert cmd in out.stdout


def test_bad_subcommand():
    with pytest.raises(SystemExit):
        main(["nope"])
