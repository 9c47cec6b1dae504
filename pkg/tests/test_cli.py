import json

import numpy as np
import pytest

from stimpute import cli, diffcore
from stimpute.geometry import MeshGraph
from stimpute.trainer import TrainingDiverged

SMALL = {"schema": 1,
         "model": {"d": 3, "q": 2, "r": 2, "enc_hidden": 4, "dec_hidden": 4},
         "train": {"batch_size": 2, "window": 5, "epochs": 2, "iterations_per_epoch": 2,
                   "area_range": [0.1, 0.5], "dwell_range": [0.2, 0.4]}}


def run(tmp_path, *argv):
    return cli.main([*argv, "--workdir", str(tmp_path)])


@pytest.fixture
def cohort(tmp_path):
    assert run(tmp_path, "gen-mesh", "--subdiv", "0", "--out", "mesh.json") == 0
    assert run(tmp_path, "gen-data", "--mesh", "mesh.json", "--kind", "spiral", "--patients", "5",
               "--seconds", "0.5", "--out", "data") == 0
    (tmp_path / "cfg.json").write_text(json.dumps(SMALL))
    return tmp_path


def test_gen_mesh_162_nodes(tmp_path):
    assert run(tmp_path, "gen-mesh", "--subdiv", "2", "--out", "m/mesh.json") == 0
    assert MeshGraph.load(tmp_path / "m/mesh.json").n_nodes == 162
    manifest = json.loads((tmp_path / "m/run_manifest.json").read_text())
    assert manifest["command"] == "gen-mesh" and manifest["config"]["nodes"] == 162
    assert any(k.endswith("mesh.json") for k in manifest["artifact_sha256"])


def test_eval_perfect_prediction(tmp_path, rng):
    truth = rng.uniform(size=(12, 30))
    mask = (rng.uniform(size=truth.shape) < 0.5).astype(float)
    for name, arr in (("t.sti", truth), ("m.sti", mask)):
        diffcore.save(tmp_path / name, arr)
    assert run(tmp_path, "eval", "--pred", "t.sti", "--truth", "t.sti", "--mask", "m.sti",
               "--out", "ev") == 0
    report = json.loads((tmp_path / "ev/report.json").read_text())
    assert report["mae"] == report["mse"] == report["mre"] == report["mape"] == 0.0
    assert (tmp_path / "ev/reconstruction.png").read_bytes()[:4] == b"\x89PNG"


def test_train_twice_byte_identical(cohort):
    for out in ("a", "b"):
        assert run(cohort, "train", "--data", "data", "--config", "cfg.json", "--seed", "7",
                   "--out", out) == 0
    files = sorted(p.name for p in (cohort / "a").iterdir() if p.name != "run_manifest.json")
    assert "manifest.json" in files and "loss_history.csv" in files
    for name in files:
        assert (cohort / "a" / name).read_bytes() == (cohort / "b" / name).read_bytes(), name


def test_seed_from_environment(cohort, monkeypatch):
    monkeypatch.setenv("STIMPUTE_SEED", "7")
    assert run(cohort, "train", "--data", "data", "--config", "cfg.json", "--out", "env") == 0
    assert json.loads((cohort / "env/run_manifest.json").read_text())["seed"] == 7
    monkeypatch.setenv("STIMPUTE_SEED", "seven")
    assert run(cohort, "gen-mesh", "--subdiv", "0", "--out", "x.json") == 2


def test_pipeline_end_to_end(cohort):
    assert run(cohort, "split", "--data", "data", "--out", "split.json") == 0
    assert run(cohort, "train", "--data", "data", "--split", "split.json", "--config", "cfg.json",
               "--out", "ck") == 0
    assert run(cohort, "finetune", "--checkpoint", "ck", "--bundle", "data/p00", "--max-epochs",
               "1", "--area", "0.25", "--dwell", "0.2", "--out", "ft") == 0
    assert run(cohort, "impute", "--checkpoint", "ck", "--embeddings", "ft", "--bundle", "data/p00",
               "--mask", "ft/mask.sti", "--window", "5", "--out", "imp") == 0
    assert run(cohort, "baseline", "--method", "mean", "--bundle", "data/p00", "--mask",
               "ft/mask.sti", "--out", "mean") == 0
    assert run(cohort, "eval", "--pred", "imp/pred.sti", "--truth", "data/p00/values.sti",
               "--mask", "ft/mask.sti", "--mesh", "mesh.json", "--out", "ev") == 0
    assert (cohort / "ev/ps_truth.csv").exists()
    pred = diffcore.load(cohort / "imp/pred.sti")
    mask = diffcore.load(cohort / "ft/mask.sti")
    truth = diffcore.load(cohort / "data/p00/values.sti")
    assert np.array_equal(pred[mask > 0], truth[mask > 0])


def test_usage_errors(cohort, capsys):
    with pytest.raises(SystemExit) as err:
        cli.main(["gen-mesh", "--out", "m.json", "--bogus"])
    assert err.value.code == 2
    (cohort / "bad.json").write_text(json.dumps({"schema": 1, "trian": {}}))
    assert run(cohort, "train", "--data", "data", "--config", "bad.json", "--out", "x") == 2
    (cohort / "bad2.json").write_text(json.dumps({"train": {"epochs": 1, "momentum": 0.9}}))
    assert run(cohort, "train", "--data", "data", "--config", "bad2.json", "--out", "x") == 2
    body = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert body["error"] == "usage" and "momentum" in body["message"]


def test_missing_input_is_io_error(tmp_path, capsys):
    assert run(tmp_path, "eval", "--pred", "nope.sti", "--truth", "nope.sti", "--mask", "nope.sti",
               "--out", "ev") == 3
    assert json.loads(capsys.readouterr().err)["error"] == "io"
    (tmp_path / "junk.sti").write_bytes(b"not a tensor")
    assert run(tmp_path, "eval", "--pred", "junk.sti", "--truth", "junk.sti", "--mask", "junk.sti",
               "--out", "ev") == 3


def test_numeric_failure_reports_context(cohort, monkeypatch, capsys):
    def diverge(*a, **k):
        raise TrainingDiverged(1, 3)

    monkeypatch.setattr(cli, "train_model", diverge)
    assert run(cohort, "train", "--data", "data", "--config", "cfg.json", "--out", "x") == 4
    body = json.loads(capsys.readouterr().err)
    assert body["error"] == "numeric" and (body["epoch"], body["iteration"]) == (1, 3)
