import numpy as np
import pytest
from scipy.signal import correlate2d

from oracles import naive_conv2d
from spinalis.cnn import (
    FLATTEN, RELU, CnnModel, TrainConfig, classify_tumor, cnn_forward, cnn_loss_and_gradients, cnn_predict_proba,
    cnn_train, conv, conv_output_size, default_architecture, dense, depth_performance_heuristic, init_model,
    layer_shapes, pool, resample_roi, softmax, validate_architecture,
)
from spinalis.phantom import TumorType

TOY = [conv(3), RELU, conv(4, kernel=3, stride=1, padding=0), RELU, pool(), FLATTEN, dense(3)]


def toy_model(seed=1, dtype=np.float64):
    return init_model(TOY, (1, 8, 8), seed=seed, dtype=dtype, strict=False)


def test_output_size_examples():
    assert conv_output_size(224, 3, 1, 1) == 224
    assert conv_output_size(28, 5, 0, 1) == 24
    with pytest.raises(ValueError):
        conv_output_size(7, 9, 0, 1)
    with pytest.raises(ValueError):
        conv_output_size(7, 3, 0, 0)


def strided_correlation(img, kernel, stride, pad):
    """Single-channel convolution via scipy, subsampled by stride."""
    return correlate2d(np.pad(img, pad), kernel, mode="valid")[::stride, ::stride]


def test_output_size_matches_actual_convolution_grid():
    rng = np.random.default_rng(0)
    checked = 0
    for n in range(3, 33):
        img = rng.random((n, n))
        for k in range(1, 8):
            kernel = rng.random((k, k))
            for p in range(0, 4):
                for s in range(1, 4):
                    if n - k + 2 * p < 0:
                        continue
                    expected = conv_output_size(n, k, p, s)
                    assert strided_correlation(img, kernel, s, p).shape == (expected, expected)
                    if n <= 6:
                        out = naive_conv2d(img[None, None], kernel[None, None], np.zeros(1), s, p)
                        assert out.shape[-1] == expected
                    checked += 1
    assert checked > 2000


def test_depth_heuristic():
    assert depth_performance_heuristic(6, 6) == 1.0
    assert depth_performance_heuristic(4, 6) == pytest.approx(1 / 3)
    assert max(range(1, 11), key=lambda L: depth_performance_heuristic(L, 6)) == 6


def test_default_architecture_shape():
    arch = default_architecture()
    validate_architecture(arch)
    shapes = layer_shapes(arch, (1, 128, 128))
    assert shapes[-1] == (3,)
    assert (64, 8, 8) in shapes
    with pytest.raises(ValueError):
        validate_architecture(arch[:-2])


def test_forward_matches_naive_oracle():
    m = toy_model()
    x = np.random.default_rng(2).random((2, 1, 8, 8))
    h = np.maximum(naive_conv2d(x, m.params[0]["W"], m.params[0]["b"], 1, 1), 0)
    h = np.maximum(naive_conv2d(h, m.params[2]["W"], m.params[2]["b"], 1, 0), 0)
    n, c, hh, ww = h.shape
    pooled = h.reshape(n, c, hh // 2, 2, ww // 2, 2).max(axis=(3, 5))
    logits = pooled.reshape(n, -1) @ m.params[6]["W"].T + m.params[6]["b"]
    assert np.max(np.abs(cnn_predict_proba(m, x) - softmax(logits))) < 1e-5


def test_softmax_and_zero_weights():
    m = init_model(seed=0)
    for p in m.params:
        for k in p:
            p[k][...] = 0
    probs = cnn_forward(m, np.random.default_rng(0).random((128, 128)))
    assert np.allclose(probs, 1 / 3)
    m2 = init_model(seed=3)
    p = cnn_forward(m2, np.random.default_rng(1).random((128, 128)))
    assert abs(p.sum() - 1) < 1e-6 and np.all((p > 0) & (p < 1))


def test_forward_input_checks():
    m = toy_model()
    with pytest.raises(ValueError):
        cnn_forward(m, np.full((8, 8), 1.5))
    with pytest.raises(ValueError):
        cnn_forward(m, np.zeros((9, 8)))


def test_gradient_check():
    m = toy_model()
    rng = np.random.default_rng(0)
    x, y = rng.random((4, 1, 8, 8)), np.array([0, 1, 2, 1])
    _, grads = cnn_loss_and_gradients(m, x, y)
    worst = 0.0
    for i, k, t in m.tensors():
        flat = t.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + 1e-6
            lp, _ = cnn_loss_and_gradients(m, x, y)
            flat[j] = old - 1e-6
            lm, _ = cnn_loss_and_gradients(m, x, y)
            flat[j] = old
            num, an = (lp - lm) / 2e-6, grads[i][k].reshape(-1)[j]
            worst = max(worst, abs(num - an) / max(abs(num), abs(an), 1e-8))
    assert worst < 1e-3


def test_duplicated_batch_same_gradients():
    m = toy_model()
    x = np.random.default_rng(5).random((3, 1, 8, 8))
    y = np.array([2, 0, 1])
    l1, g1 = cnn_loss_and_gradients(m, x, y)
    l2, g2 = cnn_loss_and_gradients(m, np.concatenate([x, x]), np.concatenate([y, y]))
    assert l1 == pytest.approx(l2)
    for a, b in zip(g1, g2):
        for k in a:
            assert np.allclose(a[k], b[k])


def test_confident_correct_prediction_has_tiny_loss():
    m = toy_model()
    m.params[6]["W"][...] = 0
    m.params[6]["b"][...] = [50.0, 0.0, 0.0]
    loss, _ = cnn_loss_and_gradients(m, np.zeros((1, 1, 8, 8)), [0])
    assert 0 <= loss < 1e-12


def test_invalid_labels():
    with pytest.raises(ValueError):
        cnn_loss_and_gradients(toy_model(), np.zeros((1, 1, 8, 8)), [3])


def _toy_data(n=24):
    rng = np.random.default_rng(9)
    y = np.arange(n) % 3
    x = rng.random((n, 1, 8, 8)) * 0.2
    for i, c in enumerate(y):
        x[i, 0, :, c * 2:c * 2 + 3] += 0.7
    return x, y


def test_training_smoke_and_determinism():
    x, y = _toy_data()
    cfg = TrainConfig(epochs=5, learning_rate=0.05, batch_size=8, seed=4)
    m1, h1 = cnn_train(toy_model(), (x, y), cfg, validation=(x, y))
    m2, h2 = cnn_train(toy_model(), (x, y), cfg)
    assert h1.train_loss == h2.train_loss
    assert all(np.isfinite(h1.train_loss)) and len(h1.val_accuracy) == 5
    assert h1.train_loss[-1] < h1.initial_train_loss
    for (_, _, a), (_, _, b) in zip(m1.tensors(), m2.tensors()):
        assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        cnn_train(toy_model(), (x, np.zeros(len(x), int)), cfg)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)


def test_save_load(tmp_path):
    m = toy_model(dtype=np.float32)
    m.save(tmp_path / "m.cnn")
    back = CnnModel.load(tmp_path / "m.cnn")
    assert back.architecture == m.architecture
    for (_, _, a), (_, _, b) in zip(m.tensors(), back.tensors()):
        assert np.array_equal(a, b)


def test_classify_tumor_is_argmax():
    m = init_model(seed=11)
    roi = np.random.default_rng(3).random((40, 30))
    kind = classify_tumor(m, roi)
    probs = cnn_forward(m, resample_roi(roi))
    assert kind is TumorType(int(np.argmax(probs)))
    with pytest.raises(ValueError):
        classify_tumor(m, np.zeros((0, 5)))
