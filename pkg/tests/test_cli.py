import json
import os

import numpy as np
import pytest

from posegraph.cli import build_parser, main
from posegraph.convnet import load_checkpoint
from posegraph.dataset import JOINTS, PoseExample, load_annotations, save_annotations, write_image
from posegraph.evaluation import read_curves
from posegraph.spatial import load_bundle

TINY = ["--conv-maps", "2,2,2", "--fc-sizes", "4,4", "--batch-size", "8"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    assert run("synth", "--out", root, "--n", 12, "--seed", 3) == 0
    return root


def pipeline(dataset, out, workers=1, epochs=1):
    ann = dataset / "annotations.txt"
    assert run("--workers", workers, "train", "--annotations", ann, "--out", out / "models",
               "--epochs", epochs, "--seed", 5, *TINY) == 0
    assert run("learn-priors", "--annotations", ann, "--out", out / "priors.bin") == 0
    assert run("detect", "--workers", workers, "--annotations", ann, "--models", out / "models",
               "--priors", out / "priors.bin", "--out", out / "dets.txt", "--scales", "1.0,0.8") == 0
    assert run("detect", "--annotations", ann, "--models", out / "models", "--no-spatial",
               "--out", out / "dets_unary.txt", "--scales", "1.0,0.8") == 0
    assert run("eval", "--annotations", ann, "--detections", f"spatial={out / 'dets.txt'}",
               f"unary={out / 'dets_unary.txt'}", "--out", out / "curves.csv") == 0


def artifact_bytes(out):
    names = [f"models/{p}.ckpt" for p in ("face", "shoulder", "elbow", "wrist")]
    names += [f"models/{p}.log" for p in ("face", "shoulder", "elbow", "wrist")]
    names += ["priors.bin", "dets.txt", "dets_unary.txt", "curves.csv"]
    return {n: (out / n).read_bytes() for n in names}


def test_synth_is_deterministic_and_valid(dataset, tmp_path):
    assert run("synth", "--out", tmp_path, "--n", 12, "--seed", 3) == 0
    assert (tmp_path / "annotations.txt").read_bytes() == (dataset / "annotations.txt").read_bytes()
    exs = load_annotations(dataset / "annotations.txt")
    assert len(exs) == 12 and sum(e.split == "test" for e in exs) == 2


def test_synth_empty(tmp_path):
    assert run("synth", "--out", tmp_path, "--n", 0) == 0
    assert load_annotations(tmp_path / "annotations.txt") == []


def test_train_zero_epochs_writes_initialisation(dataset, tmp_path):
    assert run("train", "--annotations", dataset / "annotations.txt", "--out", tmp_path,
               "--epochs", 0, "--parts", "face", *TINY) == 0
    params = load_checkpoint((tmp_path / "face.ckpt").read_bytes())
    assert all(np.all(b == 0) for b in params.arrays()[1::2])
    assert (tmp_path / "face.log").read_text() == ""
    assert not (tmp_path / "wrist.ckpt").exists()


def test_pipeline_is_deterministic_across_runs_and_workers(dataset, tmp_path):
    pipeline(dataset, tmp_path / "a", workers=1)
    pipeline(dataset, tmp_path / "b", workers=1)
    pipeline(dataset, tmp_path / "c", workers=3)
    a = artifact_bytes(tmp_path / "a")
    assert a == artifact_bytes(tmp_path / "b")
    assert a == artifact_bytes(tmp_path / "c")
    curves = read_curves(tmp_path / "a" / "curves.csv")
    assert "spatial:wrist" in curves and "unary:wrist" in curves
    log = (tmp_path / "a" / "models" / "face.log").read_text().splitlines()
    assert len(log) == 1 and json.loads(log[0])["epoch"] == 1
    bundle = load_bundle((tmp_path / "a" / "priors.bin").read_bytes())
    assert all(abs(p.hist.sum() - 1) < 1e-9 for p in bundle.pairwise)


def test_eval_of_ground_truth_is_all_ones(dataset, tmp_path):
    exs = [e for e in load_annotations(dataset / "annotations.txt") if e.split == "test"]
    lines = ["posegraph-detections v1"]
    names = {"face": "face", "shoulder": "lsho", "elbow": "lelb", "wrist": "lwri"}
    for e in exs:
        for part, j in names.items():
            x, y = e.joints[j]
            lines.append(f"{e.image_path},{part},{x!r},{y!r},1.0,1.0")
    (tmp_path / "d.txt").write_text("\n".join(lines) + "\n")
    assert run("eval", "--annotations", dataset / "annotations.txt", "--detections", tmp_path / "d.txt",
               "--out", tmp_path / "c.csv") == 0
    cols = read_curves(tmp_path / "c.csv")
    assert all(v == 1.0 for k, col in cols.items() if k != "radius" for v in col)


def test_usage_errors_exit_1(tmp_path, capsys):
    assert run() == 1
    assert run("train") == 1
    assert run("detect", "--bogus") == 1
    assert run("--workers", 0, "synth", "--out", tmp_path) == 1
    assert "usage error" in capsys.readouterr().err


def test_data_errors_exit_2(dataset, tmp_path):
    assert run("train", "--annotations", tmp_path / "missing.txt", "--out", tmp_path) == 2
    (tmp_path / "bad.txt").write_text("not an annotation file\n")
    assert run("learn-priors", "--annotations", tmp_path / "bad.txt", "--out", tmp_path / "p.bin") == 2
    assert run("detect", "--annotations", dataset / "annotations.txt", "--models", tmp_path / "none",
               "--no-spatial", "--out", tmp_path / "d.txt") == 2
    assert run("train", "--annotations", dataset / "annotations.txt", "--out", tmp_path,
               "--dropout", 1.5) == 2
    (tmp_path / "x.ckpt").write_bytes(b"garbage")
    os.makedirs(tmp_path / "m", exist_ok=True)
    for p in ("face", "shoulder", "elbow", "wrist"):
        (tmp_path / "m" / f"{p}.ckpt").write_bytes(b"garbage!!!!!!!!!!!!")
    assert run("detect", "--annotations", dataset / "annotations.txt", "--models", tmp_path / "m",
               "--no-spatial", "--out", tmp_path / "d.txt") == 2
    assert run("detect", "--annotations", dataset / "annotations.txt", "--models", tmp_path / "m",
               "--out", tmp_path / "d.txt") == 2


def test_contract_violation_exit_3(dataset, tmp_path):
    models = tmp_path / "models"
    assert run("train", "--annotations", dataset / "annotations.txt", "--out", models, "--epochs", 0, *TINY) == 0
    write_image(tmp_path / "tiny.png", np.zeros((40, 40, 3)))
    joints = {j: (20.0, 20.0) for j in JOINTS}
    save_annotations([PoseExample("tiny.png", joints, (10.0, 10.0, 5.0, 5.0), "test")], tmp_path / "a.txt")
    assert run("detect", "--annotations", tmp_path / "a.txt", "--models", models, "--no-spatial",
               "--out", tmp_path / "d.txt") == 3


def test_config_file_sets_defaults(dataset, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"epochs": 0, "conv_maps": [2, 2, 2], "fc_sizes": [4, 4], "parts": ["face"]}))
    assert run("--config", cfg, "train", "--annotations", dataset / "annotations.txt", "--out", tmp_path / "m") == 0
    assert load_checkpoint((tmp_path / "m" / "face.ckpt").read_bytes()).arch.conv_maps == (2, 2, 2)
    (tmp_path / "broken.json").write_text("{")
    assert run("--config", tmp_path / "broken.json", "synth", "--out", tmp_path / "s") == 2


def test_help_states_every_default():
    parser = build_parser()
    sub = parser._subparsers._group_actions[0].choices
    for name, sp in sub.items():
        fmt = sp._get_formatter()
        for action in sp._actions:
            if not action.option_strings or action.dest in ("help", "version"):
                continue
            if action.required:
                continue
            assert "default" in fmt._get_help_string(action), (name, action.dest)
        assert "(default:" in sp.format_help()
