"""Retrieve-and-Play and the distance-weighted REGENT interpolation.

The interpolation weight is ``exp(-lambda * d)`` where ``d`` is the
normalized distance from the query to the closest retrieved state. At
``d = 0`` the policy plays the retrieved action outright; as ``d`` grows the
parametric output takes over.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import ContextDatapoint


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class InterpConfig:
    lam: float = 10.0
    l_scale: float = 10.0

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if not self.l_scale > 0:
            raise ValueError(f"L must be positive, got {self.l_scale}")

    def weight(self, d):
        return np.exp(-self.lam * np.asarray(d, dtype=np.float64))


def mixed_relu(x):
    """Identity clipped to [-1, 1]. NaN propagates."""
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x < -1.0, -1.0, np.where(x > 1.0, 1.0, x))
    return float(out) if out.ndim == 0 else out


def mixed_relu_relu_form(x):
    """The same function written as 2(ReLU((x+1)/2) - ReLU((x-1)/2)) - 1."""
    x = np.asarray(x, dtype=np.float64)
    relu = lambda v: np.maximum(v, 0.0)
    out = 2.0 * (relu((x + 1.0) / 2.0) - relu((x - 1.0) / 2.0)) - 1.0
    return float(out) if out.ndim == 0 else out


def rnp_action(ctx: ContextDatapoint):
    """Play the action of the closest retrieved state."""
    if not ctx.neighbors:
        raise ValueError("empty context")
    return ctx.neighbors[0].action


def rnp_distribution(a_prime: int, d: float, n_act: int) -> np.ndarray:
    """Softened R&P distribution: one-hot on ``a_prime`` at d=0, uniform at d=1."""
    if not 0.0 <= d <= 1.0:
        raise ValueError(f"distance {d} outside [0, 1]")
    if n_act < 2 or not 0 <= a_prime < n_act:
        raise ValueError(f"action {a_prime} invalid for {n_act} actions")
    p = np.full(n_act, d / n_act)
    p[a_prime] = (1.0 + (n_act - 1) * (1.0 - d)) / n_act
    return p


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def regent_discrete(logits, ctx: ContextDatapoint, cfg: InterpConfig = InterpConfig(), n_act=None) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if np.any(np.isnan(logits)):
        raise ValueError("NaN in logits")
    n_act = len(logits) if n_act is None else n_act
    if logits.shape != (n_act,):
        raise DimensionError(f"expected {n_act} logits, got shape {logits.shape}")
    d = ctx.dist_first
    w = math.exp(-cfg.lam * d)
    return w * rnp_distribution(int(ctx.first_action), d, n_act) + (1.0 - w) * softmax(logits)


def regent_continuous(raw_out, ctx: ContextDatapoint, cfg: InterpConfig = InterpConfig()) -> np.ndarray:
    raw_out = np.asarray(raw_out, dtype=np.float64)
    a_prime = np.asarray(ctx.first_action, dtype=np.float64)
    if raw_out.shape != a_prime.shape:
        raise DimensionError(f"output shape {raw_out.shape} vs retrieved action {a_prime.shape}")
    w = math.exp(-cfg.lam * ctx.dist_first)
    return w * a_prime + (1.0 - w) * cfg.l_scale * mixed_relu(raw_out)


def greedy(probs) -> int:
    """Argmax with ties to the lowest index."""
    return int(np.argmax(probs))
