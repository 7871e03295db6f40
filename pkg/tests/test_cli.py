import csv
import json

import numpy as np
import pytest

from ghhdet import cli
from ghhdet.ghh import load_model
from ghhdet.imagekit import write_image
from ghhdet.trainset import load_training_set


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", root / "scene", "--n-images", 5, "--width", 128, "--height", 128, "--n-blobs", 5,
               "--n-corners", 3) == 0
    ts = root / "ts.zip"
    assert run("build-trainset", root / "scene", "-o", ts, "--patch-size", 11, "--max-cells", 40, "--seed", 3) == 0
    model = root / "model.json"
    assert run("train", ts, "-o", model, "-N", 2, "-M", 2, "--pca-dim", 40, "--refine-sweeps", 1) == 0
    return {"root": root, "scene": root / "scene", "ts": ts, "model": model}


def test_synth_overfull_scene(tmp_path):
    assert run("synth", tmp_path / "s", "--width", 64, "--height", 64) == 3


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        run("--version")
    assert exc.value.code == 0
    out = capsys.readouterr().out
    assert "model schema 1" in out and "training-set archive 1" in out


def test_usage_error():
    with pytest.raises(SystemExit) as exc:
        run("train")
    assert exc.value.code == 2


def test_empty_directory(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert run("build-trainset", tmp_path / "empty", "-o", tmp_path / "x.zip") == 3
    assert "no images" in capsys.readouterr().err


def test_unreadable_images_listed(tmp_path, capsys):
    d = tmp_path / "scene"
    d.mkdir()
    for i in range(3):
        write_image(d / f"ok{i}.ppm", np.zeros((8, 8, 3), np.uint8))
    (d / "bad.ppm").write_bytes(b"P6\n4 4\n255\n")
    assert run("build-trainset", d, "-o", tmp_path / "x.zip") == 3
    assert "bad.ppm" in capsys.readouterr().err


def test_trainset_archive(workspace, tmp_path):
    ts = load_training_set(workspace["ts"])
    assert ts.K_p == 5 * ts.meta["n_anchors"] and ts.K_p > 0
    assert ts.seed == 3 and "config_hash" in ts.meta["config"]
    again = tmp_path / "again.zip"
    # volatile options such as the output path or worker count do not change the archive
    assert run("build-trainset", workspace["scene"], "-o", again, "--patch-size", 11, "--max-cells", 40, "--seed", 3,
               "--jobs", 2) == 0
    assert again.read_bytes() == workspace["ts"].read_bytes()


def test_train_outputs(workspace):
    model = load_model(workspace["model"])
    assert model.weights.shape == (2, 2, 6, 11, 11)
    doc = json.loads(workspace["model"].read_text())
    assert doc["config"]["N"] == 2 and len(doc["config_hash"]) == 16
    trace = [json.loads(line) for line in workspace["model"].with_suffix(".trace.jsonl").read_text().splitlines()]
    objs = [t["objective"] for t in trace]
    assert all(b <= a + 1e-12 for a, b in zip(objs, objs[1:]))


def test_train_smoke_and_config_file(workspace, tmp_path):
    conf = tmp_path / "conf.json"
    conf.write_text(json.dumps({"gamma-c": 0.5, "N": 1, "M": 1, "pca_dim": 10, "refine_sweeps": 0}))
    out = tmp_path / "m.json"
    assert run("train", workspace["ts"], "-o", out, "--config", conf, "--gamma-c", 0.25) == 0
    doc = json.loads(out.read_text())
    assert doc["config"]["gamma_c"] == 0.25  # flag beats file
    assert doc["config"]["N"] == 1 and doc["config"]["pca_dim"] == 10
    assert load_model(out).n_filters == 6


def test_numerical_failure_exit(workspace, tmp_path, monkeypatch):
    from ghhdet import learner

    def boom(*a, **k):
        raise learner.NumericalFailure("objective is not finite")

    monkeypatch.setattr(learner, "train_greedy", boom)
    assert run("train", workspace["ts"], "-o", tmp_path / "m.json") == 4


def _lines(path):
    return [line.split() for line in path.read_text().splitlines()]


def test_detect_budget_and_determinism(workspace, tmp_path):
    img = workspace["scene"] / "img_000.ppm"
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    assert run("detect", workspace["model"], img, "--budget", 300, "-o", a) == 0
    assert run("detect", workspace["model"], img, "--budget", 300, "-o", b, "--jobs", 3) == 0
    rows = _lines(a)
    assert 0 < len(rows) <= 300
    scores = [float(r[2]) for r in rows]
    assert scores == sorted(scores, reverse=True)
    assert a.read_bytes() == b.read_bytes()
    c = tmp_path / "c.txt"
    assert run("detect", workspace["model"], img, "--budget", 5, "-o", c) == 0
    assert _lines(c) == rows[:5]


def test_detect_separable_overlap(workspace, tmp_path):
    approx = tmp_path / "approx.json"
    assert run("approx", workspace["model"], "-S", 24, "-o", approx) == 0
    img = workspace["scene"] / "img_001.ppm"
    exact, sep = tmp_path / "e.txt", tmp_path / "s.txt"
    assert run("detect", approx, img, "--budget", 30, "-o", exact) == 0
    assert run("detect", approx, img, "--budget", 30, "-o", sep, "--separable") == 0
    e = np.array([[float(v) for v in r[:2]] for r in _lines(exact)])
    s = np.array([[float(v) for v in r[:2]] for r in _lines(sep)])
    close = np.hypot(e[:, None, 0] - s[None, :, 0], e[:, None, 1] - s[None, :, 1]).min(axis=1) < 5
    assert close.mean() >= 0.9


def test_detect_without_bank_or_small_image(workspace, tmp_path, capsys):
    img = workspace["scene"] / "img_000.ppm"
    assert run("detect", workspace["model"], img, "--separable", "-o", tmp_path / "x.txt") == 3
    small = tmp_path / "small.ppm"
    write_image(small, np.zeros((6, 6, 3), np.uint8))
    assert run("detect", workspace["model"], small, "-o", tmp_path / "y.txt") == 3
    assert "smaller than" in capsys.readouterr().err


def test_eval_identical_images(workspace, tmp_path):
    data = tmp_path / "data"
    data.mkdir()
    src = (workspace["scene"] / "img_002.ppm").read_bytes()
    for i in range(3):
        (data / f"img{i}.ppm").write_bytes(src)
    out = tmp_path / "report"
    assert run("eval", data, workspace["model"], "-o", out, "--budget", 20, "--mode", "both") == 0
    with open(out / "report.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0].keys()) == ["sequence", "pair", "mode", "score", "budget"]
    assert len(rows) == 6 and all(float(r["score"]) == 1.0 for r in rows)
    doc = json.loads((out / "report.json").read_text())
    assert "config_hash" in doc["config"]


def test_eval_random_keypoints_at_2pct(tmp_path):
    # uniform random keypoint files at the 2% budget repeat about 2% of the time
    from ghhdet.detector import Keypoint, write_keypoints
    from ghhdet.evalkit import budget_for_random_rate

    w, h = 128, 96
    k = budget_for_random_rate(w, h, 5.0)
    rng = np.random.default_rng(7)
    data, kdir = tmp_path / "data", tmp_path / "kps"
    data.mkdir()
    kdir.mkdir()
    n_img = 60
    for i in range(n_img):
        write_image(data / f"im{i:02d}.ppm", np.zeros((h, w, 3), np.uint8))
        pts = np.c_[rng.integers(0, w, k), rng.integers(0, h, k)]
        write_keypoints(kdir / f"im{i:02d}.txt", [Keypoint(float(x), float(y), 0.0) for x, y in pts])
    out = tmp_path / "out"
    assert run("eval", data, kdir, "-o", out, "--budget2pct") == 0
    summary = json.loads((out / "report.json").read_text())["summary"]["data"]["one_to_one"]
    assert abs(summary["mean"] - 0.02) <= 0.005


def test_eval_missing_detector(tmp_path):
    (tmp_path / "d").mkdir()
    write_image(tmp_path / "d" / "a.ppm", np.zeros((30, 30, 3), np.uint8))
    assert run("eval", tmp_path / "d", tmp_path / "nope") == 3
