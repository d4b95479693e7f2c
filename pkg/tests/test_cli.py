import json
import subprocess
import sys

import numpy as np
import pytest

from spinalis.cli import run_command
from spinalis.core import Label, MaskVolume, load_volume, save_volume

SMALL = ["--width", "120", "--height", "160", "--depth", "16"]


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert run_command(["phantom", "gen", "--count", "4", "--seed", "2", "--out", str(out), *SMALL]) == 0
    return out


def test_phantom_gen_writes_count(corpus_dir):
    manifest = json.loads((corpus_dir / "corpus.json").read_text())
    assert len(manifest["items"]) == 4
    assert len(list(corpus_dir.glob("*_truth.svol"))) == 4


def test_phantom_gen_idempotent(tmp_path):
    for d in ("a", "b"):
        assert run_command(["phantom", "gen", "--count", "2", "--seed", "7", "--out", str(tmp_path / d),
                            "--control-every", "2", *SMALL]) == 0
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_eval_identical_masks(tmp_path, corpus_dir):
    truth = next(corpus_dir.glob("*_truth.svol"))
    assert run_command(["eval", "--pred", str(truth), "--truth", str(truth), "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "eval.json").read_text())
    assert report["aggregate"]["pixel"]["dice"] == 1.0


def test_segment_train_and_run(tmp_path, corpus_dir):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"segmenter": {"forest": {"n_trees": 4, "max_depth": 8}}}))
    assert run_command(["train-seg", "--corpus", str(corpus_dir), "--config", str(cfg), "--out", str(tmp_path)]) == 0
    split = json.loads((tmp_path / "split.json").read_text())
    assert len(split["train"]) == 3 and len(split["test"]) == 1
    vol = corpus_dir / f"{split['test'][0]}.svol"
    assert run_command(["segment", "--model", str(tmp_path / "segmenter.json"), "--volume", str(vol),
                        "--out", str(tmp_path / "seg")]) == 0
    mask = load_volume(tmp_path / "seg" / f"{vol.stem}_mask.svol")
    assert mask.shape == load_volume(vol).shape


def test_localize_command(tmp_path, corpus_dir):
    item = sorted(corpus_dir.glob("*_mask.svol"))[0]
    anatomy = load_volume(item)
    vert = MaskVolume(np.where(np.isin(anatomy.data, range(Label.T11, Label.L5 + 1)), anatomy.data, 0)
                      .astype(np.uint8), anatomy.spacing)
    save_volume(vert, tmp_path / "vert.svol")
    truth = item.with_name(item.name.replace("_mask", "_truth"))
    volume = item.with_name(item.name.replace("_mask", ""))
    assert run_command(["localize", "--tumor", str(truth), "--vertebrae", str(tmp_path / "vert.svol"),
                        "--overlay", str(volume), "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "localization.json").read_text())
    assert rep["origin"] in rep["impacted"]
    assert len(list((tmp_path / "overlay").glob("*.pgm"))) == anatomy.depth


def test_train_cls_and_classify(tmp_path, corpus_dir):
    assert run_command(["train-cls", "--train-count", "3", "--test-count", "3", "--epochs", "1",
                        "--out", str(tmp_path)]) == 0
    assert (tmp_path / "classifier.cnn").is_file()
    vol = sorted(corpus_dir.glob("ph*_0000.svol"))[0]
    truth = vol.with_name(vol.stem + "_truth.svol")
    assert run_command(["classify", "--model", str(tmp_path / "classifier.cnn"), "--volume", str(vol),
                        "--mask", str(truth), "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "classification.json").read_text())
    assert abs(sum(rep["probabilities"].values()) - 1) < 1e-5


def test_report_merges(tmp_path):
    a = tmp_path / "eval.json"
    a.write_text('{"x": 1}')
    assert run_command(["report", str(a), "--out", str(tmp_path)]) == 0
    merged = json.loads((tmp_path / "report.json").read_text())
    assert merged["eval"] == {"x": 1} and "config" in merged


def test_exit_codes(tmp_path, monkeypatch):
    assert run_command([]) == 1
    assert run_command(["phantom", "gen"]) == 1  # missing --count
    assert run_command(["eval", "--pred", str(tmp_path / "nope.svol"), "--truth", "x", "--out", str(tmp_path)]) == 1
    bad = tmp_path / "bad.svol"
    bad.write_bytes(b"not a volume")
    assert run_command(["eval", "--pred", str(bad), "--truth", str(bad), "--out", str(tmp_path)]) == 1
    monkeypatch.setenv("SPINALIS_THREADS", "many")
    assert run_command(["phantom", "gen", "--count", "1", "--out", str(tmp_path)]) == 1


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "spinalis.cli", "phantom", "gen", "--count", "0",
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
