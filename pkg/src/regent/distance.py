"""State distances and their per-environment normalization into [0, 1]."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import DemoSet

METRICS = ("l2", "ssim")

SSIM_WINDOW = 7
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


class DimensionError(ValueError):
    pass


class CalibrationError(ValueError):
    pass


def l2_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(l2_to_many(a, b[None])[0])


def l2_to_many(query: np.ndarray, stack: np.ndarray) -> np.ndarray:
    """Euclidean distance from ``query`` to each row of ``stack`` (leading axis)."""
    diff = stack.reshape(len(stack), -1) - query.reshape(1, -1)
    return np.sqrt(np.sum(diff * diff, axis=1))


def _check_window(window: int, shape) -> None:
    if window < 1 or window % 2 == 0:
        raise ValueError(f"SSIM window must be a positive odd integer, got {window}")
    if window > shape[0] or window > shape[1]:
        raise DimensionError(f"window {window} larger than image {shape[:2]}")


def _as_hwc(img: np.ndarray) -> np.ndarray:
    if img.ndim == 2:
        return img[..., None]
    if img.ndim != 3:
        raise DimensionError(f"expected an H x W (x C) image, got shape {img.shape}")
    return img


def ssim_to_many(query, stack, window=SSIM_WINDOW, c1=SSIM_C1, c2=SSIM_C2) -> np.ndarray:
    """1 - mean SSIM between ``query`` (H, W, C) and every image in ``stack``.

    Uniform valid windows, computed per channel and averaged over all
    windows and channels.
    """
    q = _as_hwc(np.asarray(query, dtype=np.float64))
    s = np.asarray(stack, dtype=np.float64)
    if s.ndim == 3 and q.shape[-1] == 1 and s.shape[1:] == q.shape[:2]:
        s = s[..., None]
    if s.shape[1:] != q.shape:
        raise DimensionError(f"shape mismatch: {q.shape} vs {s.shape[1:]}")
    _check_window(window, q.shape)

    def wmean(x):
        # x: (..., H, W, C) -> (..., H-w+1, W-w+1, C)
        v = sliding_window_view(x, (window, window), axis=(-3, -2))
        return v.mean(axis=(-2, -1))

    mu_q = wmean(q)[None]
    mu_s = wmean(s)
    var_q = wmean(q * q)[None] - mu_q * mu_q
    var_s = wmean(s * s) - mu_s * mu_s
    cov = wmean(s * q[None]) - mu_s * mu_q
    num = (2.0 * mu_q * mu_s + c1) * (2.0 * cov + c2)
    den = (mu_q * mu_q + mu_s * mu_s + c1) * (var_q + var_s + c2)
    ssim = (num / den).reshape(len(s), -1).mean(axis=1)
    return np.clip(1.0 - ssim, 0.0, 2.0)


def ssim_distance(a, b, window=SSIM_WINDOW, c1=SSIM_C1, c2=SSIM_C2) -> float:
    a = _as_hwc(np.asarray(a, dtype=np.float64))
    b = _as_hwc(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(ssim_to_many(a, b[None], window, c1, c2)[0])


def check_metric(metric: str) -> str:
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")
    return metric


def distances_to(query, stack, metric: str) -> np.ndarray:
    """Raw distances from one state to a stack of states under ``metric``."""
    check_metric(metric)
    if metric == "l2":
        q = np.asarray(query, dtype=np.float64)
        s = np.asarray(stack, dtype=np.float64)
        if s.shape[1:] != q.shape:
            raise DimensionError(f"shape mismatch: {q.shape} vs {s.shape[1:]}")
        return l2_to_many(q, s)
    return ssim_to_many(query, stack)


def distance(a, b, metric: str) -> float:
    return float(distances_to(a, np.asarray(b, dtype=np.float64)[None], metric)[0])


@dataclass(frozen=True)
class Normalizer:
    env_id: str
    scale: float
    metric: str

    def __post_init__(self):
        check_metric(self.metric)
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError(f"normalizer scale must be positive and finite, got {self.scale}")

    def __call__(self, raw):
        return normalize(self, raw)


def normalize(norm: Normalizer, raw):
    """min(raw / scale, 1). Accepts scalars or arrays."""
    r = np.asarray(raw, dtype=np.float64)
    if np.any(r < 0) or np.any(np.isnan(r)):
        raise ValueError(f"distances must be non-negative, got {raw}")
    out = np.minimum(r / norm.scale, 1.0)
    return float(out) if out.ndim == 0 else out


def nearest_rank(values, q: float = 0.95) -> float:
    """Nearest-rank percentile: the ceil(q * m)-th smallest value (1-based)."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValueError("empty sample")
    rank = max(1, math.ceil(q * v.size))
    return float(v[rank - 1])


def scale_from_distances(dists) -> float:
    d = np.asarray(dists, dtype=np.float64)
    scale = nearest_rank(d, 0.95)
    if scale > 0:
        return scale
    positive = d[d > 0]
    return float(positive.min()) if positive.size else 1.0


def first_neighbor_distances(demoset: DemoSet, metric: str) -> np.ndarray:
    """Distance of every demo state to its closest legal retrieval state.

    A state may not be matched against states of its own demonstration.
    States with no legal neighbor are skipped.
    """
    retrieval = demoset.retrieval_demos()
    if not retrieval:
        raise CalibrationError("retrieval set is empty")
    stack = np.stack([s.state for d in retrieval for s in d.steps])
    owner = np.array([d.demo_id for d in retrieval for _ in d.steps])
    out = []
    for demo in demoset.demos:
        legal = owner != demo.demo_id
        if not legal.any():
            continue
        cand = stack[legal]
        for step in demo.steps:
            out.append(distances_to(step.state, cand, metric).min())
    return np.asarray(out, dtype=np.float64)


def calibrate(demoset: DemoSet, metric: str) -> Normalizer:
    check_metric(metric)
    dists = first_neighbor_distances(demoset, metric)
    if dists.size == 0:
        raise CalibrationError(
            f"{demoset.spec.env_id}: no state has a neighbor outside its own demonstration"
        )
    return Normalizer(demoset.spec.env_id, scale_from_distances(dists), metric)
