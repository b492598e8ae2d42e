import json

import pytest
import torch

from mfm.cli import load_split, main, new_model
from mfm.config import load_config
from mfm.datagen import load_populations, save_populations
from mfm.errors import ConfigurationError
from mfm.model import FlowModel
from mfm.tensor import load_checkpoint

TINY = {
    "dataset": {"letters": {"train_letters": "AB", "test_letters": "X", "train_rotations": 2,
                            "test_rotations": 1, "size_range": [30, 40]}},
    "model": {"mode": "MFM", "hidden_width": 8, "n_hidden": 1, "embed_dim": 2, "k": 3,
              "n_gcn_layers": 1, "gcn_width": 8, "embedding_dim": 4},
    "train": {"population_batch": 2, "sample_batch": 16, "epochs": 4, "lr": 1e-3},
    "integrator": {"steps": 4},
    "eval": {"eval_size": 12},
}


@pytest.fixture
def run(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({**TINY, "out": str(tmp_path / "out")}))

    def go(*args):
        return main([args[0], "--config", str(cfg), *args[1:]])

    go.out = tmp_path / "out"
    go.cfg = cfg
    return go


def test_generate_is_reproducible(run):
    assert run("generate") == 0
    manifest = (run.out / "data" / "manifest.json").read_bytes()
    assert json.loads(manifest)["counts"] == {"train": 4, "val": 0, "test": 1}
    assert run("generate") == 0
    assert (run.out / "data" / "manifest.json").read_bytes() == manifest
    assert (run.out / "generate.config.json").is_file()


def test_default_letters_manifest(tmp_path):
    assert main(["generate", "--out", str(tmp_path)]) == 0
    counts = json.loads((tmp_path / "data" / "manifest.json").read_text())["counts"]
    assert counts == {"train": 240, "val": 0, "test": 20}


def test_train_eval_sample_round(run, tmp_path):
    assert run("generate") == 0
    assert run("train") == 0
    lines = (run.out / "loss.csv").read_text().splitlines()
    assert lines[0] == "step,mode,loss" and len(lines) == 5
    final = run.out / "checkpoints" / "final.json"
    assert run("eval", "--checkpoint", str(final), "--split", "train") == 0
    rows = (run.out / "eval" / "train_metrics.csv").read_text().splitlines()
    assert len(rows) == 1 + 4
    agg = json.loads((run.out / "eval" / "train_aggregate.json").read_text())
    assert set(agg["model"]) == {"W1", "W2", "MMD", "r2"} and agg["units"]["MMD"] == "x1e-3"
    test_file = run.out / "data" / "test.jsonl"
    before = test_file.read_bytes()
    assert run("sample", "--checkpoint", str(final), "--input", str(test_file)) == 0
    assert test_file.read_bytes() == before
    pred = load_populations(run.out / "sample" / "predicted.jsonl")
    assert pred[0].target.dim == 2 and pred[0].target.n == pred[0].source.n
    emb = json.loads((run.out / "sample" / "embeddings.json").read_text())
    vec = torch.tensor(next(iter(emb.values())), dtype=torch.float64)
    assert abs(float(torch.linalg.norm(vec)) - 1.0) < 1e-12


def test_zero_epochs_checkpoint_is_initialization(run):
    run("generate")
    assert run("train", "--set", "train.epochs=0") == 0
    model, _, _ = FlowModel.load(run.out / "checkpoints" / "final.json")
    cfg = load_config(run.cfg, ["train.epochs=0"])
    fresh = new_model(cfg, load_split(cfg, "train"))
    for k, v in fresh.parameters().items():
        assert torch.equal(v, model.parameters()[k])


def test_resume_is_bit_exact(run):
    run("generate")
    assert run("train", "--set", "train.epochs=6") == 0
    full = (run.out / "loss.csv").read_text()
    full_tensors, _ = load_checkpoint(run.out / "checkpoints" / "final.json")
    assert run("train", "--set", "train.epochs=3") == 0
    part = run.out / "checkpoints" / "part.json"
    (run.out / "checkpoints" / "final.json").rename(part)
    assert run("train", "--set", "train.epochs=6", "--checkpoint", str(part)) == 0
    assert (run.out / "loss.csv").read_text() == full
    resumed, _ = load_checkpoint(run.out / "checkpoints" / "final.json")
    assert all(torch.equal(full_tensors[k], resumed[k]) for k in full_tensors)


def test_periodic_checkpoints(run):
    run("generate")
    assert run("train", "--set", "train.checkpoint_every=2") == 0
    names = sorted(p.name for p in (run.out / "checkpoints").iterdir())
    assert names == ["final.json", "step_0000002.json", "step_0000004.json"]


def test_perfect_stub_scores_zero(run):
    run("generate")
    assert run("eval", "--stub", "perfect", "--split", "train") == 0
    agg = json.loads((run.out / "eval" / "train_aggregate.json").read_text())
    assert agg["model"]["W1"]["mean"] == 0.0 and agg["model"]["W2"]["mean"] == 0.0
    assert agg["n_populations"] == 4


def test_zero_stub_sample_is_identity(run):
    run("generate")
    src = run.out / "data" / "train.jsonl"
    assert run("sample", "--stub", "zero", "--input", str(src), "--set", "integrator.record_trajectory=true") == 0
    for pair in load_populations(run.out / "sample" / "predicted.jsonl"):
        assert torch.equal(pair.source.points, pair.target.points)
    header = (run.out / "sample" / "trajectory.csv").read_text().splitlines()[0]
    assert header == "population_id,step,row,x0,x1"


def test_validation_errors_exit_2(run, tmp_path, capsys):
    assert run("generate", "--set", "model.nope=1") == 2
    assert run("generate", "--set", "noequals") == 2
    assert main(["generate", "--set", "dataset.generator=file", "--set", f"dataset.path={tmp_path}/missing",
                 "--out", str(tmp_path / "o")]) == 2
    assert not (tmp_path / "o").exists()
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    assert main(["generate", "--config", str(bad)]) == 2
    assert run("eval", "--split", "test") == 2
    assert "error:" in capsys.readouterr().err


def test_empty_split_and_numerical_failure(run):
    run("generate")
    assert run("eval", "--stub", "perfect", "--split", "val") == 2
    assert run("train", "--set", "train.lr=1e300", "--set", "train.epochs=6") == 3


def test_override_parsing():
    cfg = load_config(None, ["train.lr=0.5", "dataset.letters.train_letters=AB", "model.mode=FM"])
    assert cfg.train.lr == 0.5 and cfg.dataset.letters.train_letters == "AB" and cfg.train.mode == "FM"
    with pytest.raises(ConfigurationError):
        load_config(None, ["train.lr"])


def test_file_generator_round_trip(run, tmp_path):
    run("generate")
    pairs = load_populations(run.out / "data" / "train.jsonl")
    path = tmp_path / "mine.jsonl"
    save_populations(pairs, path)
    assert main(["generate", "--set", "dataset.generator=file", "--set", f"dataset.path={path}",
                 "--out", str(tmp_path / "o2")]) == 0
    assert (tmp_path / "o2" / "data" / "train.jsonl").read_bytes() == (run.out / "data" / "train.jsonl").read_bytes()
