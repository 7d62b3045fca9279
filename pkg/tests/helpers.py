"""Shared builders and the finite-difference oracle used across the test suite."""

from __future__ import annotations

import numpy as np

from weakrel.graph import BBox, DetectedObject, build_graph
from weakrel.model import ModelConfig, ModelParams

FD_STEP = 1e-5
FD_TOL = 1e-4


def random_objects(rng, n, num_classes=4, visual_shape=(4,), W=100.0, H=80.0, scores=False):
    objs = []
    for _ in range(n):
        w, h = rng.uniform(5, 40, size=2)
        x1, y1 = rng.uniform(0, W - w), rng.uniform(0, H - h)
        visual = rng.normal(size=visual_shape) if visual_shape != (0,) else None
        score = float(rng.uniform(0.3, 1.0)) if scores else 1.0
        objs.append(DetectedObject(BBox(x1, y1, x1 + w, y1 + h), int(rng.integers(num_classes)), score, visual))
    return objs


def random_graph(rng, n, visual_shape=(4,), subject_classes=None, **kw):
    return build_graph(random_objects(rng, n, visual_shape=visual_shape, **kw), 100.0, 80.0, subject_classes, visual_shape)


def small_params(seed=0, K=3, hidden=8, visual_mode="flat", visual_dim=4, pooling="max", **kw):
    cfg = ModelConfig(num_predicates=K, hidden=hidden, visual_mode=visual_mode, visual_dim=visual_dim, pooling=pooling, **kw)
    params = ModelParams.initialize(cfg, seed)
    # non-zero biases so that bias gradients are exercised as well
    rng = np.random.default_rng(seed + 1000)
    for name, w in params.weights.items():
        if name.endswith(".b") or name.endswith(".bias"):
            params.weights[name] = rng.normal(scale=0.1, size=w.shape)
    return params


def numeric_grad(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of scalar ``f`` with respect to array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    if x.size == 0:
        return g
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest absolute deviation relative to the largest gradient magnitude of the array."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale < 1e-7:
        return float(np.abs(analytic - numeric).max(initial=0.0))
    return float(np.abs(analytic - numeric).max() / scale)
