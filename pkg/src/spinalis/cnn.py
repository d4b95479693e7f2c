"""NumPy convolutional classifier for tumor-type ROIs.

Images enter as NCHW; activations travel as CNHW so that the im2col matrix
product needs no transposes. The backward pass scatters column gradients
back with one strided add per kernel tap.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .phantom import TumorType

CNN_FORMAT = "spinalis-cnn/1"
INPUT_SIZE = 128
N_CLASSES = 3


def conv_output_size(input_size: int, filter_size: int, padding: int, stride: int) -> int:
    """floor((input - filter + 2*padding) / stride) + 1."""
    if min(input_size, filter_size, padding) < 0 or stride < 1:
        raise ValueError("sizes must be nonnegative and stride >= 1")
    extent = input_size - filter_size + 2 * padding
    if extent < 0:
        raise ValueError(f"filter {filter_size} exceeds padded input {input_size + 2 * padding}")
    return extent // stride + 1


def depth_performance_heuristic(layers: int, c: float) -> float:
    """P(L) = 1 / (|L - c| + 1)."""
    if layers < 1:
        raise ValueError("layer count must be >= 1")
    return 1.0 / (abs(layers - c) + 1.0)


# ----------------------------------------------------------- architecture

def conv(filters, kernel=3, stride=1, padding=1):
    return {"type": "conv", "filters": filters, "kernel": kernel, "stride": stride, "padding": padding}


def pool(size=2, stride=2):
    return {"type": "maxpool", "size": size, "stride": stride}


def dense(units):
    return {"type": "dense", "units": units}


RELU = {"type": "relu"}
FLATTEN = {"type": "flatten"}


def default_architecture() -> list[dict]:
    return [
        conv(16), RELU, conv(16), RELU, pool(),
        conv(32), RELU, pool(),
        conv(32), RELU, pool(),
        conv(64), RELU, conv(64), RELU, pool(),
        FLATTEN, dense(128), RELU, dense(N_CLASSES),
    ]


def layer_shapes(arch: list[dict], input_shape: tuple[int, int, int]) -> list[tuple[int, ...]]:
    """Output shape (C, H, W) or (units,) after every layer."""
    shapes = []
    shape: tuple[int, ...] = tuple(input_shape)
    for spec in arch:
        kind = spec["type"]
        if kind == "conv":
            c, h, w = shape
            shape = (spec["filters"],
                     conv_output_size(h, spec["kernel"], spec["padding"], spec["stride"]),
                     conv_output_size(w, spec["kernel"], spec["padding"], spec["stride"]))
        elif kind == "maxpool":
            c, h, w = shape
            shape = (c, conv_output_size(h, spec["size"], 0, spec["stride"]),
                     conv_output_size(w, spec["size"], 0, spec["stride"]))
        elif kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif kind == "dense":
            if len(shape) != 1:
                raise ValueError("dense layer needs a flattened input")
            shape = (spec["units"],)
        elif kind != "relu":
            raise ValueError(f"unknown layer type {kind!r}")
        shapes.append(shape)
    return shapes


def validate_architecture(arch: list[dict], input_shape=(1, INPUT_SIZE, INPUT_SIZE), strict: bool = True) -> None:
    counts = {k: sum(1 for s in arch if s["type"] == k) for k in ("conv", "maxpool", "dense")}
    if strict and (counts["conv"], counts["maxpool"], counts["dense"]) != (6, 4, 2):
        raise ValueError(f"architecture must have 6 conv, 4 max-pool and 2 dense layers, got {counts}")
    shapes = layer_shapes(arch, input_shape)
    if shapes[-1] != (N_CLASSES,) and strict:
        raise ValueError("final layer must produce 3 class scores")


# ------------------------------------------------------------ primitives

def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    """``x`` is (C, N, H, W); returns a (C*k*k, N*Ho*Wo) column matrix."""
    c, n, h, w = x.shape
    ho = conv_output_size(h, k, pad, stride)
    wo = conv_output_size(w, k, pad, stride)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((c, k, k, n, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(c * k * k, n * ho * wo), ho, wo


def _col2im(dcols: np.ndarray, x_shape, k: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    c, n, h, w = x_shape
    d = dcols.reshape(c, k, k, n, ho, wo)
    dxp = np.zeros((c, n, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += d[:, i, j]
    return dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp


def conv_forward(x, weight, bias, stride, pad):
    """Convolution of a (C, N, H, W) tensor; returns (F, N, Ho, Wo)."""
    f, c, k, _ = weight.shape
    cols, ho, wo = _im2col(x, k, stride, pad)
    out = weight.reshape(f, -1) @ cols + bias[:, None]
    return out.reshape(f, x.shape[1], ho, wo), (cols, x.shape, ho, wo)


def conv_backward(dout, weight, cache, stride, pad):
    cols, x_shape, ho, wo = cache
    f, c, k, _ = weight.shape
    dmat = dout.reshape(f, -1)
    dw = (dmat @ cols.T).reshape(weight.shape)
    db = dmat.sum(axis=1)
    dx = _col2im(weight.reshape(f, -1).T @ dmat, x_shape, k, stride, pad, ho, wo)
    return dx, dw, db


def pool_forward(x, size, stride):
    c, n, h, w = x.shape
    ho = conv_output_size(h, size, 0, stride)
    wo = conv_output_size(w, size, 0, stride)
    best = None
    arg = np.zeros((c, n, ho, wo), dtype=np.int64)
    for t, (i, j) in enumerate((i, j) for i in range(size) for j in range(size)):
        view = x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
        if best is None:
            best = view.copy()
            continue
        better = view > best
        best = np.where(better, view, best)
        arg[better] = t
    return best, (x.shape, arg)


def pool_backward(dout, cache, size, stride):
    x_shape, arg = cache
    _, _, ho, wo = dout.shape
    dx = np.zeros(x_shape, dtype=dout.dtype)
    for t, (i, j) in enumerate((i, j) for i in range(size) for j in range(size)):
        dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.where(arg == t, dout, 0)
    return dx


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ----------------------------------------------------------------- model

@dataclass
class CnnModel:
    architecture: list[dict]
    params: list[dict]  # per layer: {"W": ..., "b": ...} or {}
    input_shape: tuple[int, int, int] = (1, INPUT_SIZE, INPUT_SIZE)
    seed: int = 0

    @property
    def dtype(self):
        for p in self.params:
            if p:
                return p["W"].dtype
        return np.float64

    def tensors(self) -> list[tuple[int, str, np.ndarray]]:
        return [(i, k, p[k]) for i, p in enumerate(self.params) for k in ("W", "b") if k in p]

    def copy(self) -> "CnnModel":
        return CnnModel([dict(s) for s in self.architecture], [{k: v.copy() for k, v in p.items()} for p in self.params],
                        self.input_shape, self.seed)

    def save(self, path) -> None:
        header = {
            "format": CNN_FORMAT,
            "architecture": self.architecture,
            "input_shape": list(self.input_shape),
            "seed": self.seed,
            "tensors": [{"layer": i, "name": k, "shape": list(t.shape)} for i, k, t in self.tensors()],
        }
        with open(path, "wb") as fh:
            fh.write(json.dumps(header).encode("ascii") + b"\n")
            for _, _, t in self.tensors():
                fh.write(np.ascontiguousarray(t, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "CnnModel":
        raw = Path(path).read_bytes()
        nl = raw.index(b"\n")
        header = json.loads(raw[:nl])
        if header.get("format") != CNN_FORMAT:
            raise ValueError(f"unsupported CNN format {header.get('format')!r}")
        params: list[dict] = [{} for _ in header["architecture"]]
        off = nl + 1
        for t in header["tensors"]:
            n = int(np.prod(t["shape"])) if t["shape"] else 1
            arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(t["shape"]).astype(np.float32)
            params[t["layer"]][t["name"]] = arr
            off += 4 * n
        if off != len(raw):
            raise ValueError("CNN payload length mismatch")
        return cls(header["architecture"], params, tuple(header["input_shape"]), header["seed"])


def init_model(arch: list[dict] | None = None, input_shape=(1, INPUT_SIZE, INPUT_SIZE), seed: int = 0,
               dtype=np.float32, strict: bool = True) -> CnnModel:
    """He-normal weights, zero biases."""
    arch = default_architecture() if arch is None else arch
    validate_architecture(arch, input_shape, strict=strict)
    rng = np.random.default_rng(seed)
    params: list[dict] = []
    shape: tuple[int, ...] = tuple(input_shape)
    for spec, out_shape in zip(arch, layer_shapes(arch, input_shape)):
        if spec["type"] == "conv":
            fan_in = shape[0] * spec["kernel"] ** 2
            w = rng.normal(0, math.sqrt(2.0 / fan_in), (spec["filters"], shape[0], spec["kernel"], spec["kernel"]))
            params.append({"W": w.astype(dtype), "b": np.zeros(spec["filters"], dtype=dtype)})
        elif spec["type"] == "dense":
            w = rng.normal(0, math.sqrt(2.0 / shape[0]), (spec["units"], shape[0]))
            params.append({"W": w.astype(dtype), "b": np.zeros(spec["units"], dtype=dtype)})
        else:
            params.append({})
        shape = out_shape
    return CnnModel(arch, params, tuple(input_shape), seed)


def _forward(model: CnnModel, x: np.ndarray):
    """``x`` is NCHW; activations are carried as CNHW internally."""
    x = np.ascontiguousarray(x.transpose(1, 0, 2, 3))
    caches = []
    for spec, p in zip(model.architecture, model.params):
        kind = spec["type"]
        if kind == "conv":
            x, cache = conv_forward(x, p["W"], p["b"], spec["stride"], spec["padding"])
        elif kind == "relu":
            cache = x > 0
            x = np.where(cache, x, 0)
        elif kind == "maxpool":
            x, cache = pool_forward(x, spec["size"], spec["stride"])
        elif kind == "flatten":
            cache = x.shape
            x = x.transpose(1, 0, 2, 3).reshape(x.shape[1], -1)
        else:
            cache = x
            x = x @ p["W"].T + p["b"]
        caches.append(cache)
    return x, caches


def _batch(model: CnnModel, images) -> np.ndarray:
    x = np.asarray(images, dtype=model.dtype)
    c, h, w = model.input_shape
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None] if c == 1 and x.shape[1:] == (h, w) else x[None]
    if x.shape[1:] != (c, h, w):
        raise ValueError(f"input shape {x.shape[1:]} does not match model input {(c, h, w)}")
    return x


def cnn_predict_proba(model: CnnModel, images, batch_size: int = 32) -> np.ndarray:
    x = _batch(model, images)
    out = []
    for i in range(0, len(x), batch_size):
        logits, _ = _forward(model, x[i:i + batch_size])
        if not np.all(np.isfinite(logits)):
            raise FloatingPointError("non-finite activations")
        out.append(softmax(logits.astype(np.float64)))
    return np.concatenate(out)


def cnn_forward(model: CnnModel, image) -> np.ndarray:
    """Class probabilities for one image with values in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.min() < 0 or img.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    return cnn_predict_proba(model, img)[0]


def cnn_loss_and_gradients(model: CnnModel, images, labels):
    """Mean softmax cross-entropy and its gradient for every parameter tensor."""
    x = _batch(model, images)
    y = np.asarray(labels, dtype=np.int64).ravel()
    if len(y) != len(x):
        raise ValueError("one label per image required")
    if np.any((y < 0) | (y >= N_CLASSES)):
        raise ValueError("labels must be in {0, 1, 2}")
    logits, caches = _forward(model, x)
    probs = softmax(logits)
    n = len(y)
    loss = float(-np.mean(np.log(np.clip(probs[np.arange(n), y], 1e-300, None))))
    grad = probs.copy()
    grad[np.arange(n), y] -= 1
    grad /= n
    grads: list[dict] = [{} for _ in model.params]
    for idx in range(len(model.architecture) - 1, -1, -1):
        spec, p, cache = model.architecture[idx], model.params[idx], caches[idx]
        kind = spec["type"]
        if kind == "dense":
            grads[idx] = {"W": grad.T @ cache, "b": grad.sum(axis=0)}
            grad = grad @ p["W"]
        elif kind == "flatten":
            c, n, h, w = cache
            grad = grad.reshape(n, c, h, w).transpose(1, 0, 2, 3)
        elif kind == "maxpool":
            grad = pool_backward(grad, cache, spec["size"], spec["stride"])
        elif kind == "relu":
            grad = np.where(cache, grad, 0)
        else:
            grad, dw, db = conv_backward(grad, p["W"], cache, spec["stride"], spec["padding"])
            grads[idx] = {"W": dw, "b": db}
    return loss, grads


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    learning_rate: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or not self.learning_rate > 0 or self.batch_size < 1:
            raise ValueError("epochs >= 1, learning_rate > 0 and batch_size >= 1 required")


@dataclass
class TrainHistory:
    initial_train_loss: float
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _dataset_loss(model: CnnModel, x, y, batch_size=32) -> float:
    total = 0.0
    for i in range(0, len(x), batch_size):
        p = cnn_predict_proba(model, x[i:i + batch_size])
        total += float(-np.log(np.clip(p[np.arange(len(p)), y[i:i + batch_size]], 1e-300, None)).sum())
    return total / len(x)


def cnn_train(model: CnnModel, dataset, cfg: TrainConfig = TrainConfig(), validation=None, callback=None):
    """SGD with momentum on ``(images, labels)``; returns the trained copy and its loss history.

    ``train_loss[e]`` is the mean minibatch loss over epoch ``e``.
    """
    images, labels = dataset
    x = _batch(model, images)
    y = np.asarray(labels, dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise ValueError("training data needs at least two classes")
    model = model.copy()
    rng = np.random.default_rng(cfg.seed)
    velocity = [{k: np.zeros_like(v) for k, v in p.items()} for p in model.params]
    hist = TrainHistory(_dataset_loss(model, x, y))
    if validation is not None:
        vx, vy = _batch(model, validation[0]), np.asarray(validation[1], dtype=np.int64)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(x))
        losses, sizes = [], []
        for i in range(0, len(x), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            loss, grads = cnn_loss_and_gradients(model, x[idx], y[idx])
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            losses.append(loss)
            sizes.append(len(idx))
            for p, g, v in zip(model.params, grads, velocity):
                for k in p:
                    v[k] *= cfg.momentum
                    v[k] -= cfg.learning_rate * g[k].astype(v[k].dtype)
                    p[k] += v[k]
        hist.train_loss.append(float(np.average(losses, weights=sizes)))
        if validation is not None:
            hist.val_loss.append(_dataset_loss(model, vx, vy))
            hist.val_accuracy.append(float(np.mean(np.argmax(cnn_predict_proba(model, vx), axis=1) == vy)))
        if callback is not None:
            callback(epoch, hist)
    return model, hist


def resample_roi(roi, size: int = INPUT_SIZE) -> np.ndarray:
    """Bilinear resampling of a 2-D crop onto a ``size`` x ``size`` grid."""
    roi = np.asarray(roi, dtype=np.float64)
    if roi.ndim != 2 or roi.size == 0:
        raise ValueError("ROI must be a non-empty 2-D array")
    h, w = roi.shape
    r = np.linspace(0, h - 1, size)
    c = np.linspace(0, w - 1, size)
    r0 = np.clip(np.floor(r).astype(int), 0, max(h - 2, 0))
    c0 = np.clip(np.floor(c).astype(int), 0, max(w - 2, 0))
    r1, c1 = np.minimum(r0 + 1, h - 1), np.minimum(c0 + 1, w - 1)
    fr, fc = (r - r0)[:, None], (c - c0)[None, :]
    out = ((1 - fr) * (1 - fc) * roi[np.ix_(r0, c0)] + (1 - fr) * fc * roi[np.ix_(r0, c1)]
           + fr * (1 - fc) * roi[np.ix_(r1, c0)] + fr * fc * roi[np.ix_(r1, c1)])
    return np.clip(out, 0.0, 1.0)


def classify_tumor(model: CnnModel, roi) -> TumorType:
    probs = cnn_forward(model, resample_roi(roi, model.input_shape[1]))
    return TumorType(int(np.argmax(probs)))
