import hashlib
import json

import numpy as np
import pytest

from fipscm import cli
from fipscm.dataset import Dataset, bundle_digest, load_bundle, save_bundle
from fipscm.fip import FipModel
from fipscm.synth import Chain, ErdosRenyi, GaussianNoise, Linear, ScmDistributionSpec, generate_dataset
from fipscm.toinfer import ToModel

FAST_INI = """
[fip]
D = 16
heads = 2
d_head = 8
hidden = 16
lr = 3e-3
lr_final = 1e-4
batch_size = 128
epochs = 10

[eval]
n_generate = 5000
per_intervention = 20
"""


def sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "fast.ini").write_text(FAST_INI)
    spec = ScmDistributionSpec((Chain(),), Linear(1.0, 1.5), GaussianNoise(), 3)
    save_bundle(generate_dataset(spec, 4000, seed=0), root / "chain")
    empty = ScmDistributionSpec((ErdosRenyi(p=0.0),), Linear(), GaussianNoise(), 3)
    save_bundle(generate_dataset(empty, 6000, seed=1), root / "empty")
    return root


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_gen_data_round_trip_and_reproducible(tmp_path):
    assert run("gen-data", "--preset", "LIN-IN", "--dims", "4", "--count", "2", "--n-samples", "50", "--seed", "3", "--out", tmp_path / "a") == 0
    assert run("gen-data", "--preset", "LIN-IN", "--dims", "4", "--count", "2", "--n-samples", "50", "--seed", "3", "--out", tmp_path / "b") == 0
    assert sha(tmp_path / "a" / "manifest.json") == sha(tmp_path / "b" / "manifest.json")
    entries = json.loads((tmp_path / "a" / "manifest.json").read_text())["bundles"]
    assert len(entries) == 4
    for e in entries:
        assert bundle_digest(tmp_path / "a" / e["path"]) == e["sha256"]
        assert load_bundle(tmp_path / "a" / e["path"]).d == 4
    assert (tmp_path / "a" / "config.ini").exists()


def test_usage_errors(tmp_path, capsys):
    assert run("gen-data", "--preset", "NOPE", "--out", tmp_path) == 2
    assert "unknown preset" in capsys.readouterr().err
    assert run("gen-data", "--dims", "x", "--out", tmp_path) == 2
    assert run("frobnicate") == 2
    (tmp_path / "bad.ini").write_text("[fip]\nwidth = 3\n")
    assert run("gen-data", "--config", tmp_path / "bad.ini", "--out", tmp_path) == 2
    (tmp_path / "bad2.ini").write_text("[nope]\nx = 1\n")
    assert run("gen-data", "--config", tmp_path / "bad2.ini", "--out", tmp_path) == 2


def test_config_file_values_and_flag_override(tmp_path):
    (tmp_path / "c.ini").write_text("[gen-data]\npreset = LIN-OUT\ncount = 1\nn_samples = 30\nstandardize = false\n")
    assert run("gen-data", "--config", tmp_path / "c.ini", "--dims", "3", "--count", "2", "--out", tmp_path / "o") == 0
    entries = json.loads((tmp_path / "o" / "manifest.json").read_text())["bundles"]
    assert len(entries) == 4 and entries[0]["preset"] == "LIN-OUT"
    resolved = cli.read_config(str(tmp_path / "o" / "config.ini"))["gen-data"]
    assert resolved["count"] == 2 and resolved["standardize"] is False


def test_train_fip_true_order_on_chain(work):
    out = work / "fip_true"
    assert run("train-fip", "--dataset", work / "chain", "--to-source", "true", "--config", work / "fast.ini", "--out", out) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["f1"] == 1.0 and report["tos"] == 1.0
    assert len(report["loss"]["train"]) == 10
    assert (out / "config.ini").exists()


def test_train_fip_is_reproducible_and_leaves_inputs_alone(work):
    before = bundle_digest(work / "chain")
    for name in ("rep_a", "rep_b"):
        assert run("train-fip", "--dataset", work / "chain", "--config", work / "fast.ini", "--seed", "4", "--out", work / name) == 0
    assert sha(work / "rep_a" / "fip.ckpt") == sha(work / "rep_b" / "fip.ckpt")
    assert bundle_digest(work / "chain") == before


def test_train_fip_identity_file_on_empty_data(work):
    (work / "perm.json").write_text("[0, 1, 2]")
    out = work / "fip_empty"
    assert run("train-fip", "--dataset", work / "empty", "--to-source", work / "perm.json", "--config", work / "fast.ini", "--out", out) == 0
    model = FipModel.load(out / "fip.ckpt")
    z = np.random.default_rng(0).normal(size=(2000, 3))
    assert np.sqrt(np.mean(model.anm_mean(z) ** 2)) < 0.1
    assert json.loads((out / "report.json").read_text())["to_source"] == "file-perm"


def test_train_fip_bad_sources(work):
    assert run("train-fip", "--dataset", work / "chain", "--to-source", work / "missing.ckpt", "--out", work / "x") == 3
    (work / "short.json").write_text("[0, 1]")
    assert run("train-fip", "--dataset", work / "chain", "--to-source", work / "short.json", "--out", work / "x") == 2


def test_eval_tasks(work):
    ckpt = work / "fip_true" / "fip.ckpt"
    if not ckpt.exists():
        assert run("train-fip", "--dataset", work / "chain", "--config", work / "fast.ini", "--out", work / "fip_true") == 0
    out = work / "ev"
    assert run("eval", "--ckpt", ckpt, "--dataset", work / "chain", "--tasks", "graph,counterfactual,generation", "--config", work / "fast.ini", "--out", out) == 0
    graph = json.loads((out / "graph.json").read_text())
    assert {r["id"]: r["score"] for r in graph["rows"]}["f1"] == 1.0
    for task in ("graph", "counterfactual", "generation"):
        assert (out / f"{task}.csv").read_text().startswith("id,score")
    assert run("eval", "--ckpt", ckpt, "--dataset", work / "chain", "--tasks", "", "--out", out) == 2


def test_eval_counterfactual_without_simulator(work, tmp_path, capsys):
    ds = load_bundle(work / "chain")
    save_bundle(Dataset(ds.x, dag=ds.dag, perm=ds.perm), tmp_path / "bare")
    ckpt = work / "fip_true" / "fip.ckpt"
    if not ckpt.exists():
        assert run("train-fip", "--dataset", work / "chain", "--config", work / "fast.ini", "--out", work / "fip_true") == 0
    assert run("eval", "--ckpt", ckpt, "--dataset", tmp_path / "bare", "--tasks", "counterfactual", "--out", tmp_path / "ev") == 3
    assert "mechanisms" in capsys.readouterr().err
    ckpt_bad = tmp_path / "bad.ckpt"
    ckpt_bad.write_bytes(b"Q" + ckpt.read_bytes()[1:])
    assert run("eval", "--ckpt", ckpt_bad, "--dataset", work / "chain", "--out", tmp_path / "ev") == 3


def test_train_to_and_use_checkpoint(work, tmp_path):
    (tmp_path / "g.ini").write_text("[gen-data]\nstandardize = false\n")
    assert run("gen-data", "--config", tmp_path / "g.ini", "--preset", "LIN-TO", "--dims", "3", "--count", "3", "--n-samples", "80", "--out", tmp_path / "d") == 0
    (tmp_path / "t.ini").write_text("[train-to]\nD = 8\nheads = 2\nblocks = 1\nhidden = 8\nbatch = 3\nrows = 40\n")
    ckpt = tmp_path / "to.ckpt"
    assert run("train-to", "--manifest", tmp_path / "d" / "manifest.json", "--config", tmp_path / "t.ini", "--epochs", "1", "--out", ckpt) == 0
    assert ToModel.load(ckpt).step == 2
    metrics = json.loads((tmp_path / "to.ckpt.metrics.json").read_text())
    assert metrics["step"] == 2 and len(metrics["epochs"]) == 1
    assert run("train-to", "--manifest", tmp_path / "d" / "manifest.json", "--config", tmp_path / "t.ini", "--epochs", "1", "--resume", ckpt, "--out", tmp_path / "to2.ckpt") == 0
    assert ToModel.load(tmp_path / "to2.ckpt").step == 4
    out = tmp_path / "fip"
    assert run("train-fip", "--dataset", work / "chain", "--to-source", ckpt, "--config", work / "fast.ini", "--out", out) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["to_source"] == "ckpt" and sorted(report["perm"]) == [0, 1, 2]


def test_train_to_needs_graphs(tmp_path):
    save_bundle(Dataset(np.random.default_rng(0).normal(size=(30, 3))), tmp_path / "nog")
    (tmp_path / "m.json").write_text(json.dumps({"bundles": [{"path": "nog"}]}))
    assert run("train-to", "--manifest", tmp_path / "m.json", "--out", tmp_path / "to.ckpt") == 3
