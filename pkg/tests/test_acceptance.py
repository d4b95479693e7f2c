"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import time

import numpy as np
import pytest
from scipy import ndimage
from scipy.signal import correlate2d

from oracles import brute_force_split, naive_conv2d, set_counts
from spinalis.augment import AugmentConfig, augment_dataset, extract_csf_path, extract_tumor, glide_tumor, paste_tumor
from spinalis.augment import GlideConfig
from spinalis.cnn import cnn_forward, cnn_loss_and_gradients, conv_output_size, init_model
from spinalis.core import Label, Slice
from spinalis.fcm import FcmConfig, fcm_fit
from spinalis.forest import ForestConfig, best_split, forest_train, gini
from spinalis.metrics import class_accuracy, confusion_counts, dice, dice_from_counts, iou
from spinalis.phantom import PhantomConfig, TumorSpec, TumorType, generate_phantom, inject_tumor
from spinalis.pipeline import (
    classification_dataset, default_segmenter_config, generate_corpus, run_benchmark, run_classification,
    run_localization, without_fcm_features,
)
from test_augment import blob_instance, straight_scene
from test_cnn import TOY


def test_criterion_1_metrics_oracle(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    mismatches, worst = 0, 0.0
    for _ in range(1000):
        h, w = rng.integers(1, 17, 2)
        density = rng.random()
        p, t = rng.random((h, w)) < density, rng.random((h, w)) < rng.random()
        tp, fp, fn, tn = set_counts(p, t)
        c = confusion_counts(p, t, "pixel")
        ok = (c.tp, c.fp, c.fn, c.tn) == (tp, fp, fn, tn) and class_accuracy(c) == (tp + tn) / (h * w)
        if tp + fp + fn:
            j = iou(c)
            ok &= j == tp / (tp + fp + fn) and dice(p, t) == 2 * tp / (2 * tp + fp + fn)
            worst = max(worst, abs(dice_from_counts(c) - 2 * j / (1 + j)))
        mismatches += not ok
    secs = time.perf_counter() - t0
    acceptance(1, "metrics oracle", mismatches == 0 and worst <= 1e-12 and secs < 10,
               f"1000 pairs, {mismatches} mismatches, max Dice/IoU identity error {worst:.1e}, {secs:.1f}s")


def test_criterion_2_fcm(acceptance):
    t0 = time.perf_counter()
    worst_sum, increases = 0.0, 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        x = rng.random((150, 1 + seed % 2))
        sums = []
        model = fcm_fit(x, FcmConfig(c=2 + seed % 4, m=1.5 + (seed % 5) * 0.4, seed=seed, max_iter=100),
                        callback=lambda it, u, v: sums.append(np.max(np.abs(u.sum(axis=0) - 1))))
        worst_sum = max(worst_sum, max(sums))
        h = model.objective_history
        increases += sum(b > a + 1e-12 for a, b in zip(h, h[1:]))
    blob = fcm_fit(np.array([0, 0, 0, 1, 1, 1], float), FcmConfig(c=2, m=2.0, seed=0))
    recovery = float(np.max(np.abs(np.sort(blob.centroids[:, 0]) - [0, 1])))
    secs = time.perf_counter() - t0
    acceptance(2, "FCM suite", worst_sum <= 1e-9 and increases == 0 and recovery <= 0.05 and secs < 30,
               f"100 runs, max row-sum error {worst_sum:.1e}, {increases} objective increases, "
               f"two-blob error {recovery:.1e}, {secs:.1f}s")


def test_criterion_3_forest(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    mismatches = cases = 0
    for n in range(2, 26):
        for f in range(1, 6):
            for _ in range(4):
                k = int(rng.integers(2, 4))
                X = rng.integers(0, 4, (n, f)).astype(float) if rng.random() < 0.5 else rng.random((n, f))
                y = rng.integers(0, k, n)
                got, want = best_split(X, y, n_classes=k), brute_force_split(X, y, k)
                same = (got is None) if want is None else (
                    got is not None and (got.feature, got.threshold) == want[:2] and abs(got.impurity - want[2]) < 1e-12)
                mismatches += not same
                cases += 1
    pure = gini([7, 0, 0])
    X = rng.random((200, 4))
    y = (X[:, 0] > 0.5).astype(int)
    a = forest_train(X, y, ForestConfig(n_trees=8, seed=5)).dumps()
    b = forest_train(X, y, ForestConfig(n_trees=8, seed=5)).dumps()
    secs = time.perf_counter() - t0
    acceptance(3, "forest suite", mismatches == 0 and pure == 0 and a == b and secs < 30,
               f"{cases} brute-force instances, {mismatches} mismatches, pure Gini {pure}, "
               f"byte-exact {a == b}, {secs:.1f}s")


def test_criterion_4_cnn(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    grid = bad = 0
    for n in range(3, 33):
        img = rng.random((n, n))
        for k in range(1, 8):
            kern = rng.random((k, k))
            for p in range(4):
                for s in range(1, 4):
                    if n - k + 2 * p < 0:
                        continue
                    e = conv_output_size(n, k, p, s)
                    out = correlate2d(np.pad(img, p), kern, mode="valid")[::s, ::s]
                    bad += out.shape != (e, e)
                    if n <= 6:
                        bad += naive_conv2d(img[None, None], kern[None, None], np.zeros(1), s, p).shape[-1] != e
                    grid += 1
    model = init_model(TOY, (1, 8, 8), seed=1, dtype=np.float64, strict=False)
    x, y = rng.random((4, 1, 8, 8)), np.array([0, 1, 2, 1])
    _, grads = cnn_loss_and_gradients(model, x, y)
    worst = 0.0
    for i, key, t in model.tensors():
        flat = t.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + 1e-6
            lp, _ = cnn_loss_and_gradients(model, x, y)
            flat[j] = old - 1e-6
            lm, _ = cnn_loss_and_gradients(model, x, y)
            flat[j] = old
            num, an = (lp - lm) / 2e-6, grads[i][key].reshape(-1)[j]
            worst = max(worst, abs(num - an) / max(abs(num), abs(an), 1e-8))
    full = init_model(seed=2)
    norm = max(abs(float(cnn_forward(full, rng.random((128, 128))).sum()) - 1) for _ in range(5))
    secs = time.perf_counter() - t0
    acceptance(4, "CNN suite", bad == 0 and worst < 1e-3 and norm <= 1e-6 and secs < 120,
               f"{grid} grid cases, {bad} shape mismatches, max gradient rel. error {worst:.1e}, "
               f"softmax error {norm:.1e}, {secs:.1f}s")


def test_criterion_5_augmentation(acceptance):
    t0 = time.perf_counter()
    img, labels = straight_scene(60)
    img, mask = blob_instance(img, 30, 29, size=2)
    inst, host = extract_tumor(Slice(img), mask)
    csf = labels == Label.CSF
    placements = glide_tumor(host, extract_csf_path(labels), inst, GlideConfig(step_px=3), csf)
    allowed = ndimage.binary_dilation(csf, iterations=2)
    contained = all(not np.any(p.truth & ~allowed) for p in placements)

    ph = generate_phantom(PhantomConfig(width=96, height=128, depth=8, seed=2))
    vol, anat, _ = inject_tumor(ph, TumorSpec(TumorType.INTRADURAL_EXTRAMEDULLARY, Label.L3, 2.5))
    samples, manifest = augment_dataset([(vol, anat)], AugmentConfig(), seed=0)
    glides = sum(m["direction"] == "none" for m in manifest)

    noisy = np.random.default_rng(5).random((24, 24)) * 0.3
    noisy, m2 = blob_instance(noisy, 9, 10, size=4)
    i2, h2 = extract_tumor(Slice(noisy), m2)
    err = float(np.max(np.abs(paste_tumor(h2, i2)[0].data - noisy)))
    secs = time.perf_counter() - t0
    ok = 18 <= len(placements) <= 22 and contained and glides > 0 and len(samples) == 2 * glides
    acceptance(5, "augmentation suite", ok and err < 1e-3 and secs < 60,
               f"{len(placements)} glide placements, contained {contained}, {len(samples)} samples from "
               f"{glides} glides, paste-back error {err:.1e}, {secs:.1f}s")


BENCH_PHANTOM = PhantomConfig(width=144, height=192, depth=16)


@pytest.fixture(scope="module")
def bench_corpus():
    return generate_corpus(100, 11, BENCH_PHANTOM)


@pytest.fixture(scope="module")
def benchmark(bench_corpus):
    controls = generate_corpus(20, 12, BENCH_PHANTOM, control_every=1)
    t0 = time.perf_counter()
    report = run_benchmark(bench_corpus, default_segmenter_config(0), 0.8, 0, controls)
    report["total_seconds"] = time.perf_counter() - t0
    return report


@pytest.mark.slow
def test_criterion_6_benchmark(acceptance, benchmark):
    r = benchmark
    ok = (r["n_train"], r["n_test"]) == (80, 20) and r["mean_dice"] >= 0.90
    ok &= r["pixel_class_accuracy"] >= 0.98 and r["control_empty_fraction"] >= 0.95 and r["total_seconds"] < 900
    acceptance(6, "phantom segmentation benchmark", ok,
               f"mean Dice {r['mean_dice']:.4f}, pixel accuracy {r['pixel_class_accuracy']:.5f}, "
               f"empty controls {r['control_empty_fraction']:.2f} of {r['control_volumes']}, "
               f"{r['total_seconds']:.0f}s")


@pytest.mark.slow
def test_criterion_7_ablation(acceptance, bench_corpus, benchmark):
    ablated = run_benchmark(bench_corpus, without_fcm_features(default_segmenter_config(0)), 0.8, 0)
    full, rf = benchmark["mean_dice"], ablated["mean_dice"]
    acceptance(7, "ablation direction", rf < full,
               f"Dice FCM+RF {full:.4f} vs RF only {rf:.4f}")


@pytest.mark.slow
def test_criterion_8_classification(acceptance):
    t0 = time.perf_counter()
    train = classification_dataset(300, 31)
    test = classification_dataset(60, 32)
    _, rep = run_classification(train, test, seed=0)
    secs = time.perf_counter() - t0
    ok = rep["epochs"] <= 40 and rep["test_accuracy"] >= 0.95
    ok &= rep["final_train_loss"] < rep["initial_train_loss"] and secs < 600
    acceptance(8, "tumor-type classification", ok,
               f"test accuracy {rep['test_accuracy']:.3f} after {rep['epochs']} epochs, train loss "
               f"{rep['initial_train_loss']:.3f} -> {rep['final_train_loss']:.4f}, {secs:.0f}s")


def test_criterion_9_localization(acceptance):
    t0 = time.perf_counter()
    rep = run_localization(generate_corpus(50, 41))
    secs = time.perf_counter() - t0
    acceptance(9, "tumor localization",
               rep["n"] == 50 and rep["origin_accuracy"] >= 0.98 and rep["impacted_recall"] == 1.0 and secs < 120,
               f"origin accuracy {rep['origin_accuracy']:.2f}, impacted recall {rep['impacted_recall']:.2f} "
               f"over {rep['n']} phantoms, {secs:.0f}s")
