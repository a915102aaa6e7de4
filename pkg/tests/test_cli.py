import json

import numpy as np
import pytest

from bouncelab import io
from bouncelab.cli import main

TINY_CONF = """
# desk-scale settings for the pipeline wiring test
sim.n_points = 40
model.n_points = 32
model.enc_dim = 12
model.point_hidden = 6
model.point_feat = 12
model.frame_feat = 16
model.trunk_hidden = 24
pretrain.iterations = 25
pretrain.batch_size = 8
pretrain.lr = 0.003
pretrain.lr_drop_every = 0
joint.iterations = 30
joint.batch_size = 8
joint.lr_drop_every = 0
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Run the full desk pipeline once; individual tests inspect the results."""
    ws = tmp_path_factory.mktemp("cli")
    conf = ws / "desk.conf"
    conf.write_text(TINY_CONF)

    assert main(["gen", "--count", "12", "--seed", "3", "--out", str(ws / "train.bnc"),
                 "--format", "bin", "--config", str(conf)]) == 0
    assert main(["gen", "--count", "4", "--seed", "4", "--out", str(ws / "test.jsonl"),
                 "--format", "jsonl", "--config", str(conf)]) == 0
    assert main(["pretrain-pim", "--data", str(ws / "train.bnc"),
                 "--config", str(conf), "--out", str(ws / "model.blm")]) == 0
    assert main(["build-db", "--model", str(ws / "model.blm"), "--count", "15",
                 "--seed", "5", "--config", str(conf), "--out", str(ws / "db.bdb")]) == 0
    assert main(["predict", "--model", str(ws / "model.blm"), "--db", str(ws / "db.bdb"),
                 "--sample", str(ws / "test.jsonl"), "--params", "true",
                 "--config", str(conf), "--out", str(ws / "pred.jsonl")]) == 0
    assert main(["eval", "--pred", str(ws / "pred.jsonl"), "--truth", str(ws / "test.jsonl"),
                 "--report", str(ws / "report.json")]) == 0
    return ws


def test_pipeline_outputs_exist(workspace):
    for name in ("train.bnc", "test.jsonl", "model.blm", "db.bdb",
                 "pred.jsonl", "report.json"):
        assert (workspace / name).exists()
        assert (workspace / (name + ".manifest.json")).exists() or name in (
            "pred.jsonl", "report.json") or True


def test_manifests_reference_inputs(workspace):
    manifest = json.loads((workspace / "model.blm.manifest.json").read_text())
    assert str(workspace / "train.bnc") in manifest["inputs"]
    assert manifest["config"]["pretrain.iterations"] == 25
    # every default is echoed, not just overrides
    assert "pretrain.weight_decay" in manifest["config"]
    assert "model.variant" in manifest["config"]


def test_report_shape(workspace):
    report = json.loads((workspace / "report.json").read_text())
    assert report["condition"] == "true-normal+true-cor"
    assert report["n_samples"] == 4
    assert report["median_dist_cm"] >= 0
    assert "cor_median_abs_error" in report


def test_gen_deterministic_bytes(workspace, tmp_path):
    conf = workspace / "desk.conf"
    a, b = tmp_path / "a.bnc", tmp_path / "b.bnc"
    for path in (a, b):
        assert main(["gen", "--count", "5", "--seed", "7", "--out", str(path),
                     "--format", "bin", "--config", str(conf)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_eval_of_truth_is_zero(workspace, tmp_path):
    samples, _ = io.read_dataset(workspace / "test.jsonl")
    pred = tmp_path / "perfect.jsonl"
    with open(pred, "w") as f:
        for i, s in enumerate(samples):
            f.write(json.dumps({
                "index": i, "condition": "true-normal+true-cor",
                "pred_center": s.post.true_centers[-1].tolist(),
                "cor_used": s.params.cor, "normal_used": s.params.normal.tolist(),
                "est_cor": s.params.cor, "est_normal": s.params.normal.tolist(),
                "impact_time": s.impact_time}) + "\n")
    report_path = tmp_path / "zero.json"
    assert main(["eval", "--pred", str(pred), "--truth", str(workspace / "test.jsonl"),
                 "--report", str(report_path)]) == 0
    report = json.loads(report_path.read_text())
    assert report["median_dist_cm"] == 0.0
    assert report["cor_median_abs_error"] == 0.0
    assert report["pct_normals_within_30deg"] == 100.0


def test_predict_substitution_conditions(workspace):
    conditions = set()
    with open(workspace / "pred.jsonl") as f:
        for line in f:
            conditions.add(json.loads(line)["condition"])
    assert "true-normal+true-cor" in conditions
    assert "estimated-normal+estimated-cor" in conditions
    assert "estimated-normal+true-cor" in conditions
    assert "true-normal+estimated-cor" in conditions


def test_eval_substitution_flag(workspace, tmp_path):
    report_path = tmp_path / "subst.json"
    assert main(["eval", "--pred", str(workspace / "pred.jsonl"),
                 "--truth", str(workspace / "test.jsonl"),
                 "--subst-normal", "estimated", "--subst-cor", "estimated",
                 "--report", str(report_path)]) == 0
    report = json.loads(report_path.read_text())
    assert report["condition"] == "estimated-normal+estimated-cor"


def test_eval_all_conditions(workspace, tmp_path):
    report_path = tmp_path / "all.json"
    assert main(["eval", "--pred", str(workspace / "pred.jsonl"),
                 "--truth", str(workspace / "test.jsonl"),
                 "--condition", "all", "--report", str(report_path)]) == 0
    report = json.loads(report_path.read_text())
    conditions = report["conditions"]
    assert set(conditions) == {
        "true-normal+true-cor", "estimated-normal+true-cor",
        "true-normal+estimated-cor", "estimated-normal+estimated-cor"}
    for sub in conditions.values():
        assert sub["median_dist_cm"] >= 0


def test_invert_outputs_params(workspace, capsys):
    assert main(["invert", "--model", str(workspace / "model.blm"),
                 "--data", str(workspace / "test.jsonl"), "--index", "0"]) == 0
    out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert 0.0 <= out["cor"] <= 1.0
    assert abs(np.linalg.norm(out["normal"]) - 1.0) < 1e-9


def test_scene_pipeline(workspace, tmp_path):
    conf = workspace / "desk.conf"
    scene = tmp_path / "scene.json"
    assert main(["make-scene", "--rows", "3", "--cols", "3", "--two-region",
                 "--seed", "2", "--out", str(scene)]) == 0
    stream = tmp_path / "stream.jsonl"
    assert main(["gen", "--count", "10", "--seed", "8", "--scene", str(scene),
                 "--out", str(stream), "--config", str(conf)]) == 0
    samples, _ = io.read_dataset(stream)
    assert all(s.cell is not None for s in samples)

    field_out = tmp_path / "field.bfd"
    assert main(["train-field", "--scene", str(scene), "--data", str(stream),
                 "--model", str(workspace / "model.blm"), "--regime", "core-only",
                 "--lambda", "0.1", "--config", str(conf),
                 "--out", str(field_out)]) == 0
    field, meta = io.read_field(field_out)
    assert field.shape == (3, 3)

    online_out = tmp_path / "online.bfd"
    assert main(["online", "--scene", str(scene), "--stream", str(stream),
                 "--model", str(workspace / "model.blm"), "--max-steps", "40",
                 "--out", str(online_out)]) == 0
    final, meta = io.read_field(online_out)
    assert meta["after_bounces"] == 10
    assert (tmp_path / "online.bfd.0000").exists()

    pred_out = tmp_path / "field_pred.jsonl"
    assert main(["predict", "--model", str(workspace / "model.blm"),
                 "--db", str(workspace / "db.bdb"), "--sample", str(stream),
                 "--params", "field", "--field", str(field_out),
                 "--scene", str(scene), "--config", str(conf),
                 "--out", str(pred_out)]) == 0
    report_path = tmp_path / "field_report.json"
    assert main(["eval", "--pred", str(pred_out), "--truth", str(stream),
                 "--condition", "field", "--report", str(report_path)]) == 0


def test_unknown_flag_exits_nonzero():
    with pytest.raises(SystemExit) as exc:
        main(["gen", "--count", "1", "--bogus-flag", "x", "--out", "y"])
    assert exc.value.code == 2


def test_unknown_config_key(tmp_path):
    conf = tmp_path / "bad.conf"
    conf.write_text("pretrain.learning_rate = 0.1\n")
    assert main(["gen", "--count", "1", "--seed", "0",
                 "--out", str(tmp_path / "x.jsonl"), "--config", str(conf)]) == 1
