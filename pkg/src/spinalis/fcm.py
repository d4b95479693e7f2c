"""Fuzzy c-means clustering (Bezdek alternating optimisation)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class FcmConfig:
    c: int = 4
    m: float = 2.0
    epsilon: float = 1e-5
    max_iter: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.c < 2:
            raise ValueError("c must be >= 2")
        if not self.m > 1:
            raise ValueError("fuzzifier m must be > 1")
        if not self.epsilon > 0 or self.max_iter < 1:
            raise ValueError("epsilon must be > 0 and max_iter >= 1")


@dataclass
class FcmModel:
    centroids: np.ndarray  # (c, d)
    memberships: np.ndarray | None  # (c, N)
    config: FcmConfig
    objective_history: list[float] = field(default_factory=list)
    iterations_run: int = 0
    converged: bool = False
    delta_history: list[float] = field(default_factory=list)

    @property
    def c(self) -> int:
        return self.centroids.shape[0]

    def to_dict(self) -> dict:
        return {
            "format": "spinalis-fcm/1",
            "config": asdict(self.config),
            "centroids": self.centroids.tolist(),
            "objective_history": list(self.objective_history),
            "iterations_run": self.iterations_run,
            "converged": self.converged,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FcmModel":
        return cls(
            centroids=np.asarray(d["centroids"], dtype=np.float64),
            memberships=None,
            config=FcmConfig(**d["config"]),
            objective_history=list(d["objective_history"]),
            iterations_run=int(d["iterations_run"]),
            converged=bool(d.get("converged", False)),
        )

    def save(self, path, memberships_path=None) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))
        if memberships_path is not None and self.memberships is not None:
            Path(memberships_path).write_bytes(np.ascontiguousarray(self.memberships, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "FcmModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _as_points(points) -> np.ndarray:
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValueError("points must be a 1-D or 2-D array")
    if not np.all(np.isfinite(x)):
        raise ValueError("points contain non-finite values")
    return x


def _sq_distances(x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """(c, N) squared Euclidean distances."""
    if x.shape[1] == 1:
        return (x[:, 0][None, :] - v[:, 0][:, None]) ** 2
    return ((x[None, :, :] - v[:, None, :]) ** 2).sum(axis=2)


def memberships_from_distances(d2: np.ndarray, m: float) -> np.ndarray:
    """u_ik = 1 / sum_j (d_ik / d_jk)^(2/(m-1)), with crisp rows where d_ik = 0.

    When several clusters sit at distance zero from a point, its unit mass
    is split evenly between them.
    """
    zero = d2 <= 0.0
    with np.errstate(divide="ignore"):
        w = np.where(zero, 0.0, d2 ** (-1.0 / (m - 1.0)))
    # rescale per point before normalising to avoid overflow for tiny distances
    wmax = w.max(axis=0, keepdims=True)
    wmax[wmax == 0] = 1.0
    w = w / wmax
    u = w / w.sum(axis=0, keepdims=True).clip(min=np.finfo(float).tiny)
    singular = zero.any(axis=0)
    if singular.any():
        z = zero[:, singular].astype(np.float64)
        u[:, singular] = z / z.sum(axis=0, keepdims=True)
    return u


def centroids_from_memberships(x: np.ndarray, u: np.ndarray, m: float) -> np.ndarray:
    um = u**m
    return (um @ x) / um.sum(axis=1, keepdims=True).clip(min=np.finfo(float).tiny)


def fcm_objective(points, centroids, u, m: float) -> float:
    """J_m = sum_i sum_k u_ik^m ||x_k - v_i||^2."""
    x = _as_points(points)
    v = np.asarray(centroids, dtype=np.float64)
    if v.ndim == 1:
        v = v[:, None]
    u = np.asarray(u, dtype=np.float64)
    if v.shape[1] != x.shape[1] or u.shape != (v.shape[0], x.shape[0]):
        raise ValueError(f"shape mismatch: points {x.shape}, centroids {v.shape}, memberships {u.shape}")
    return float(((u**m) * _sq_distances(x, v)).sum())


def random_memberships(n_points: int, c: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    u = rng.random((c, n_points))
    return u / u.sum(axis=0, keepdims=True)


def fcm_fit(points, cfg: FcmConfig = FcmConfig(), init_memberships: np.ndarray | None = None,
            callback: Callable[[int, np.ndarray, np.ndarray], None] | None = None) -> FcmModel:
    """Fit FCM by alternating centroid and membership updates.

    Each iteration computes centroids from the current memberships, then
    memberships from those centroids, and records J_m for the new pair.
    Stops once the largest membership change drops below ``cfg.epsilon``.

    ``callback(iteration, U, V)`` is invoked after every iteration.
    """
    x = _as_points(points)
    n = x.shape[0]
    if n < cfg.c:
        raise ValueError(f"need at least c={cfg.c} points, got {n}")
    if init_memberships is None:
        u = random_memberships(n, cfg.c, cfg.seed)
    else:
        u = np.array(init_memberships, dtype=np.float64)
        if u.shape != (cfg.c, n):
            raise ValueError("init_memberships must have shape (c, N)")
        u = u / u.sum(axis=0, keepdims=True)

    history: list[float] = []
    deltas: list[float] = []
    v = centroids_from_memberships(x, u, cfg.m)
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        v = centroids_from_memberships(x, u, cfg.m)
        d2 = _sq_distances(x, v)
        u_new = memberships_from_distances(d2, cfg.m)
        history.append(float(((u_new**cfg.m) * d2).sum()))
        delta = float(np.abs(u_new - u).max())
        deltas.append(delta)
        u = u_new
        if callback is not None:
            callback(it, u, v)
        if delta < cfg.epsilon:
            converged = True
            break
    return FcmModel(v, u, cfg, history, it, converged, deltas)


def fcm_predict(model: FcmModel, x) -> np.ndarray:
    """Memberships of one feature vector (or a batch, shape (N, d)) under frozen centroids."""
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim <= 1
    pts = arr.reshape(1, -1) if single else arr
    if model.centroids.shape[1] == 1 and arr.ndim == 1 and arr.size > 1:
        # a 1-D array of scalar samples
        pts, single = arr[:, None], False
    if pts.shape[1] != model.centroids.shape[1]:
        raise ValueError(f"feature dimension {pts.shape[1]} != model dimension {model.centroids.shape[1]}")
    u = memberships_from_distances(_sq_distances(_as_points(pts), model.centroids), model.config.m)
    return u[:, 0] if single else u


def defuzzify(u) -> np.ndarray:
    """Hard labels; argmax returns the lowest index on ties."""
    u = np.asarray(u)
    if u.ndim == 1:
        return np.int64(np.argmax(u))
    return np.argmax(u, axis=0)


def sort_clusters(model: FcmModel) -> FcmModel:
    """Reorder clusters by ascending first centroid coordinate."""
    order = np.argsort(model.centroids[:, 0], kind="stable")
    u = None if model.memberships is None else model.memberships[order]
    return FcmModel(model.centroids[order], u, model.config, list(model.objective_history),
                    model.iterations_run, model.converged, list(model.delta_history))
