"""Reverse-mode differentiation for chains of dense layers.

The forward pass records each layer's input and pre-activation; the backward
pass runs the vector-Jacobian products in reverse, producing one gradient row
per sample. Parameters may be shared (k,) or per-sample (n, k); the latter is
what lets per-sample output Hessians be probed in a single vectorized sweep.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import vhw
from ..errors import NumericalOverflow
from .params import Layout

P_CLAMP = 1e-12
_LOG_LO = np.log(P_CLAMP)
_LOG_HI = np.log1p(-P_CLAMP)


@dataclass(frozen=True)
class DenseLayer:
    weight: str
    bias: str
    activation: str | None  # None for the output layer


def _act(kind, pre):
    if kind == "tanh":
        return np.tanh(pre)
    if kind == "relu":
        return np.maximum(pre, 0.0)
    raise ValueError(f"unknown activation {kind!r}")


def _act_grad(kind, pre, out):
    if kind == "tanh":
        return 1.0 - out * out
    # subgradient at 0 is 0
    return (pre > 0.0).astype(np.float64)


def forward(layers, layout: Layout, theta, x, profile=None):
    """Run the chain; returns (output (n, out), cache)."""
    a = np.asarray(x, dtype=np.float64)
    cache = []
    for i, layer in enumerate(layers):
        w = layout.view(theta, layer.weight)
        b = layout.view(theta, layer.bias)
        pre = vhw.affine_inputs(a, w, profile) + b
        out = pre if layer.activation is None else _act(layer.activation, pre)
        if not np.all(np.isfinite(out)):
            raise NumericalOverflow(f"layer{i}")
        cache.append((a, pre, out))
        a = out
    return a, cache


def backward(layers, layout: Layout, theta, cache, d_out) -> np.ndarray:
    """Per-sample gradients (n, k) of sum_j d_out[:, j] * output[:, j]."""
    delta = np.asarray(d_out, dtype=np.float64)
    n = delta.shape[0]
    grads = np.zeros((n, layout.size))
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        a_in, pre, out = cache[i]
        if layer.activation is not None:
            delta = delta * _act_grad(layer.activation, pre, out)
        wb = layout[layer.weight]
        bb = layout[layer.bias]
        grads[:, wb.offset:wb.stop] = (delta[:, :, None] * a_in[:, None, :]).reshape(n, -1)
        grads[:, bb.offset:bb.stop] = delta
        if i > 0:
            w = layout.view(theta, layer.weight)
            delta = delta @ w if w.ndim == 2 else np.einsum("no,noi->ni", delta, w)
    if not np.all(np.isfinite(grads)):
        raise NumericalOverflow("backward")
    return grads


def _log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    return np.exp(_log_sigmoid(z))


def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    s = z - z.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def head_probs(head: str, z: np.ndarray) -> np.ndarray:
    """Class-probability matrix (n, K); a sigmoid head gives (1 - f, f)."""
    if head == "sigmoid":
        f = sigmoid(z[:, 0])
        return np.stack([1.0 - f, f], axis=1)
    if head == "softmax":
        return softmax(z)
    raise ValueError(f"head {head!r} has no class probabilities")


def head_loss(head: str, z: np.ndarray, y: np.ndarray):
    """Per-sample loss and d loss / d output.

    Cross-entropy uses log p_y clamped to [log 1e-12, log(1 - 1e-12)]; where the
    clamp is active the loss is flat, so its derivative is zero there.
    """
    if head == "linear":
        r = z[:, 0] - y
        return 0.5 * r * r, r[:, None]
    if head == "sigmoid":
        zz = z[:, 0]
        logp = np.where(y == 1, _log_sigmoid(zz), _log_sigmoid(-zz))
        active = (logp > _LOG_LO) & (logp < _LOG_HI)
        g = (sigmoid(zz) - y) * active
        return -np.clip(logp, _LOG_LO, _LOG_HI), g[:, None]
    if head == "softmax":
        idx = np.arange(z.shape[0])
        s = z - z.max(axis=1, keepdims=True)
        logp_all = s - np.log(np.exp(s).sum(axis=1, keepdims=True))
        logp = logp_all[idx, y]
        active = (logp > _LOG_LO) & (logp < _LOG_HI)
        g = np.exp(logp_all)
        g[idx, y] -= 1.0
        g *= active[:, None]
        return -np.clip(logp, _LOG_LO, _LOG_HI), g
    raise ValueError(f"unknown head {head!r}")
