"""Losses and gradients of differentiable objectives under a reduction profile.

An objective is any object exposing ``params`` (a ParamVector),
``with_values(values)`` and ``sample_gradients(data, profile)`` returning
per-sample losses (n,) and per-sample gradients (n, k). Per-sample terms are
produced by reverse-mode differentiation in the objective; this module only
owns how they are reduced across samples.
"""

from __future__ import annotations

import numpy as np

from .. import vhw
from ..errors import EmptySubset, NumericalOverflow


def _check_nonempty(data):
    if len(data) == 0:
        raise EmptySubset("dataset view is empty")


def loss(model, data, profile: vhw.VirtualHardwareProfile | None = None) -> float:
    """Mean per-sample loss, summed with ``profile`` (reference when None)."""
    _check_nonempty(data)
    losses = model.sample_losses(data, profile)
    total = vhw.reduce(losses, profile)
    if not np.isfinite(total):
        raise NumericalOverflow("loss")
    return total / len(data)


def gradient(model, data, profile: vhw.VirtualHardwareProfile | None = None) -> np.ndarray:
    """Mean gradient; per-sample gradients are reduced in the profile's order."""
    _check_nonempty(data)
    _, grads = model.sample_gradients(data, profile)
    g = vhw.reduce(grads, profile, axis=0) / len(data)
    if not np.all(np.isfinite(g)):
        raise NumericalOverflow("gradient")
    return g


def loss_and_gradient(model, data, profile=None) -> tuple[float, np.ndarray]:
    _check_nonempty(data)
    losses, grads = model.sample_gradients(data, profile)
    n = len(data)
    total = vhw.reduce(losses, profile) / n
    g = vhw.reduce(grads, profile, axis=0) / n
    if not (np.isfinite(total) and np.all(np.isfinite(g))):
        raise NumericalOverflow("gradient")
    return total, g


def finite_difference_gradient(f, theta: np.ndarray, rel_step: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` with step rel_step * (1 + |theta_j|)."""
    theta = np.asarray(theta, dtype=np.float64)
    out = np.empty_like(theta)
    for j in range(theta.shape[0]):
        h = rel_step * (1.0 + abs(theta[j]))
        tp = theta.copy()
        tm = theta.copy()
        tp[j] += h
        tm[j] -= h
        out[j] = (f(tp) - f(tm)) / (tp[j] - tm[j])
    return out


def relative_errors(a: np.ndarray, b: np.ndarray, floor_frac: float = 1e-3) -> np.ndarray:
    """|a - b| / max(|a|, |b|, floor_frac * max|b|, tiny), coordinate-wise.

    The floor keeps coordinates that are zero up to rounding from dominating
    the check when the rest of the vector is large.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor_frac * np.max(np.abs(b), initial=0.0))
    return np.abs(a - b) / np.maximum(scale, 1e-300)
