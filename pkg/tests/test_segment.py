from dataclasses import replace

import numpy as np
import pytest

from spinalis.core import Label, MaskVolume, Volume
from spinalis.forest import ForestConfig, ForestModel
from spinalis.metrics import dice
from spinalis.phantom import PhantomConfig
from spinalis.pipeline import generate_corpus
from spinalis.segment import (
    RelevanceConfig, SegmenterConfig, prepare_slices, segment_volume, select_relevant_slices, train_segmenter,
)

CFG = SegmenterConfig(forest=ForestConfig(n_trees=6, max_depth=10, min_samples_leaf=3, seed=1), seed=1)


@pytest.fixture(scope="module")
def corpus():
    pc = PhantomConfig(width=120, height=160, depth=16)  # IM tumors need this resolution
    return generate_corpus(7, 21, pc, control_every=7)  # six tumors, one control


@pytest.fixture(scope="module")
def model(corpus):
    return train_segmenter([(it.volume, it.truth) for it in corpus[:3]], CFG)


def test_relevance_flags_tumor_planes_not_controls(corpus):
    tumor = corpus[0]
    preps = prepare_slices(tumor.volume, CFG)
    rel = select_relevant_slices(tumor.volume, preps, CFG.relevance)
    tumor_planes = set(np.flatnonzero(tumor.truth.data.any(axis=(1, 2))))
    assert rel and rel <= tumor_planes
    control = corpus[6]
    assert not control.has_tumor
    assert select_relevant_slices(control.volume, prepare_slices(control.volume, CFG), CFG.relevance) == set()


def test_manual_override(corpus):
    v = corpus[0].volume
    rc = RelevanceConfig(manual_override=(2, 5, 99))
    assert select_relevant_slices(v, prepare_slices(v, CFG), rc) == {2, 5}


def test_training_fit_and_mask_properties(corpus, model):
    for it in corpus[:3]:
        res = segment_volume(it.volume, model)
        pred = res.mask.data == Label.TUMOR
        truth = it.truth.data == Label.TUMOR
        relevant = np.array(res.relevant)
        on_rel = truth & relevant[:, None, None]
        assert np.mean(pred[relevant] == truth[relevant]) >= 0.99
        assert dice(pred, on_rel) > 0.8
        # mask is the thresholded probability minus specks, and only on relevant planes
        assert not np.any(pred & (res.probability.data < CFG.probability_threshold))
        assert not pred[~relevant].any()
        assert set(np.unique(res.mask.data)) <= {0, Label.TUMOR}


def test_held_out_and_control(corpus, model):
    it = corpus[3]
    res = segment_volume(it.volume, model)
    assert dice(res.mask.data == Label.TUMOR, it.truth.data == Label.TUMOR) > 0.6
    assert not segment_volume(corpus[6].volume, model).mask.data.any()


def test_deterministic(corpus, model):
    again = train_segmenter([(it.volume, it.truth) for it in corpus[:3]], CFG)
    a = segment_volume(corpus[4].volume, model)
    b = segment_volume(corpus[4].volume, again)
    assert np.array_equal(a.probability.data, b.probability.data)


def test_threads_do_not_change_output(corpus, model):
    a = segment_volume(corpus[5].volume, model)
    b = segment_volume(corpus[5].volume, model, replace(CFG, threads=3))
    assert np.array_equal(a.mask.data, b.mask.data)


def test_errors(corpus, model):
    with pytest.raises(ValueError):
        train_segmenter([], CFG)
    with pytest.raises(ValueError):
        train_segmenter([(corpus[6].volume, corpus[6].truth)], CFG)
    it = corpus[0]
    with pytest.raises(ValueError):
        train_segmenter([(it.volume, MaskVolume(it.truth.data[:-1], it.truth.spacing))], CFG)
    no_fcm = replace(CFG, features=replace(CFG.features, fcm_memberships=False))
    with pytest.raises(ValueError):
        segment_volume(it.volume, model, no_fcm)


def test_save_and_reload(tmp_path, corpus, model):
    model.save(tmp_path / "seg.json")
    back = ForestModel.load(tmp_path / "seg.json")
    res = segment_volume(corpus[0].volume, back)
    assert np.array_equal(res.mask.data, segment_volume(corpus[0].volume, model).mask.data)
    res.save(tmp_path, "case")
    for suffix in ("_mask.svol", "_prob.svol", "_relevance.json"):
        assert (tmp_path / f"case{suffix}").is_file()


def test_relevance_config_validation():
    with pytest.raises(ValueError):
        RelevanceConfig(cluster_z_threshold=0)
    with pytest.raises(ValueError):
        RelevanceConfig(min_component_px=0)


def test_flat_volume_has_no_relevant_planes():
    v = Volume(np.full((3, 32, 32), 0.4), (1.0, 1.0, 1.0))
    assert select_relevant_slices(v, prepare_slices(v, CFG)) == set()
