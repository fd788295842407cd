import json

import numpy as np
import pytest

from mccad.cli import main
from mccad.classifier import load_model
from mccad.evaluation import compute_froc, score_result, sensitivity_at
from mccad.cascade import run_cascade
from mccad.image_core import Image2D, load_any, write_pgm, write_volume, Volume3D
from mccad.truth import HitCriterion, read_truth

CONFIG = """
seed = 5
[synth]
n_cases = 6
[synth.phantom]
width = 320
height = 320
n_distractors = 2
distractor_clearance_mm = 8.0
disk_radius_mm = [2.5, 4.0]
[pipeline.objectness]
max_candidates = 300
[training]
cv_folds = 2
[training.forest]
n_trees = 10
"""


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "c.toml").write_text(CONFIG)
    cfg = str(d / "c.toml")
    assert main(["synth", "--config", cfg, "--out", str(d / "ds")]) == 0
    assert main(["train", "--config", cfg, "--dataset", str(d / "ds"), "--model", str(d / "m.json")]) == 0
    return d, cfg


def test_synth_writes_files(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text(CONFIG)
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "a"), "--n", "3"]) == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == ["case_0000.pgm", "case_0000.spacing", "case_0000.truth.json",
                     "case_0001.pgm", "case_0001.spacing", "case_0001.truth.json",
                     "case_0002.pgm", "case_0002.spacing", "case_0002.truth.json",
                     "manifest.json", "resolved_config.json"]
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["n_cases"] == 3 and len({c["seed"] for c in manifest["cases"]}) == 3
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "b"), "--n", "3", "--jobs", "3"]) == 0
    for p in (tmp_path / "a").iterdir():
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes(), p.name


def test_synth_invalid_spec_leaves_nothing(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("[synth.phantom]\nwidth = 40\nheight = 40\n")
    out = tmp_path / "out"
    assert main(["synth", "--config", str(cfg), "--out", str(out)]) == 2
    assert not out.exists()
    assert not any(p.name.startswith(".synth-") for p in tmp_path.iterdir())


def test_synth_volume(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text(CONFIG)
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "v"), "--n", "1", "--nz", "3"]) == 0
    vol = load_any(tmp_path / "v" / "case_0000.mcvol")
    assert isinstance(vol, Volume3D) and vol.data.shape[0] == 3


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[pipeline]\nnot_a_key = 1\n")
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert main(["synth", "--config", str(tmp_path / "missing.toml"), "--out", str(tmp_path / "x")]) == 2
    assert main(["synth", "--out", str(tmp_path / "x"), "--jobs", "0"]) == 2
    assert main(["bogus"]) == 2


def test_train_errors(tmp_path):
    (tmp_path / "empty").mkdir()
    assert main(["train", "--dataset", str(tmp_path / "empty"), "--model", str(tmp_path / "m.json")]) == 2
    assert main(["train", "--dataset", str(tmp_path / "nope"), "--model", str(tmp_path / "m.json")]) == 2
    assert not (tmp_path / "m.json").exists()


def test_train_output(work, capsys):
    d, cfg = work
    model = load_model(d / "m.json")
    assert [s.n_features for s in model.stages] == [50, 100, 58]
    assert json.loads((d / "m.json.config.json").read_text())["seed"] == 5
    assert main(["train", "--config", cfg, "--dataset", str(d / "ds"), "--model", str(d / "m2.json")]) == 0
    out = capsys.readouterr().out
    assert "stage 1:" in out and "threshold" in out
    assert (d / "m.json").read_bytes() == (d / "m2.json").read_bytes()


def test_detect_2d(work, caplog):
    d, cfg = work
    out = d / "det.json"
    csv = d / "cands.csv"
    with caplog.at_level("INFO", logger="mccad"):
        assert main(["detect", "--config", cfg, "--model", str(d / "m.json"), "--input",
                     str(d / "ds" / "case_0000.pgm"), "--out", str(out), "--dump-candidates", str(csv)]) == 0
    assert "mode=2d" in caplog.text
    rec = json.loads(out.read_text())
    truths = read_truth(d / "ds" / "case_0000.truth.json")
    crit = HitCriterion()
    assert truths and any(crit.hits(r["centroid_mm"], t) for r in rec["detections"] for t in truths)
    assert csv.read_text().count("\n") == rec["counts"]["candidates"] + 1


def test_detect_blank_and_volume(work, tmp_path, caplog):
    d, cfg = work
    blank = tmp_path / "blank.pgm"
    write_pgm(blank, Image2D(np.full((320, 320), 1000.0), (0.1, 0.1)))
    assert main(["detect", "--model", str(d / "m.json"), "--input", str(blank), "--spacing-mm", "0.1",
                 "--out", str(tmp_path / "b.json")]) == 0
    assert json.loads((tmp_path / "b.json").read_text())["detections"] == []
    rng = np.random.default_rng(0)
    vol = tmp_path / "v.mcvol"
    write_volume(vol, Volume3D(rng.normal(1000, 5, (3, 96, 96)), (0.1, 0.1, 1.0)))
    with caplog.at_level("INFO", logger="mccad"):
        assert main(["detect", "--model", str(d / "m.json"), "--input", str(vol),
                     "--out", str(tmp_path / "v.json")]) == 0
    assert "mode=3d" in caplog.text
    assert json.loads((tmp_path / "v.json").read_text())["mode"] == "3d"


def test_detect_errors(work, tmp_path):
    d, _ = work
    args = ["detect", "--input", str(d / "ds" / "case_0000.pgm"), "--out", str(tmp_path / "o.json")]
    assert main(args + ["--model", str(tmp_path / "none.json")]) == 2
    doc = json.loads((d / "m.json").read_text())
    doc["stages"][1]["n_features"] = 99
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    assert main(args + ["--model", str(bad)]) == 2
    (tmp_path / "junk.pgm").write_bytes(b"P5\n4 4\n255\n")
    assert main(["detect", "--model", str(d / "m.json"), "--input", str(tmp_path / "junk.pgm"),
                 "--out", str(tmp_path / "o.json")]) == 2


def test_eval_matches_library_and_ablation(work, capsys):
    d, cfg = work
    rep = d / "rep"
    assert main(["eval", "--config", cfg, "--model", str(d / "m.json"), "--dataset", str(d / "ds"),
                 "--out", str(rep), "--ablation", "global-norm"]) == 0
    out = capsys.readouterr().out
    assert "sens@FP=2" in out
    assert (rep / "froc.csv").exists() and (rep / "froc_global_norm.csv").exists()
    # same numbers as scoring the dataset directly through the library
    model = load_model(d / "m.json")
    manifest = json.loads((d / "ds" / "manifest.json").read_text())
    scored = [score_result(run_cascade(model, load_any(d / "ds" / c["image"])),
                           read_truth(d / "ds" / c["truth"])) for c in manifest["cases"]]
    curve = compute_froc(scored, HitCriterion())
    summary = json.loads((rep / "summary.json").read_text())
    for k in (0.5, 1.0, 2.0):
        assert summary["froc"][f"sens@FP={k:g}"] == sensitivity_at(curve, k)
    assert main(["eval", "--config", cfg, "--model", str(d / "m.json"), "--dataset", str(d / "ds"),
                 "--out", str(d / "rep2"), "--jobs", "3"]) == 0
    assert (rep / "froc.csv").read_bytes() == (d / "rep2" / "froc.csv").read_bytes()


def test_eval_without_truth(work, tmp_path):
    d, cfg = work
    ds = tmp_path / "neg"
    assert main(["synth", "--config", cfg, "--out", str(ds), "--n", "2"]) == 0
    manifest = json.loads((ds / "manifest.json").read_text())
    for c in manifest["cases"]:
        (ds / c["truth"]).write_text("[]\n")
    assert main(["eval", "--model", str(d / "m.json"), "--dataset", str(ds), "--out", str(tmp_path / "r")]) == 2


def test_seed_env_override(tmp_path, monkeypatch):
    cfg = tmp_path / "c.toml"
    cfg.write_text(CONFIG)
    monkeypatch.setenv("MCCAD_SEED", "11")
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "a"), "--n", "1"]) == 0
    assert json.loads((tmp_path / "a" / "manifest.json").read_text())["seed"] == 11
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "b"), "--n", "1", "--seed", "4"]) == 0
    assert json.loads((tmp_path / "b" / "manifest.json").read_text())["seed"] == 4
