"""Hessian-vector products by central differences of the reference gradient."""

from __future__ import annotations

import warnings

import numpy as np

from ..errors import IllConditionedWarning, OracleTooLarge, ZeroDirection
from .eigen import LinearOperator
from .ops import gradient

RICHARDSON_RTOL = 1e-4
MAX_ORACLE_PARAMS = 512
_EPS = np.finfo(np.float64).eps


def fd_hvp_rows(grad_at, theta: np.ndarray, directions: np.ndarray, rtol: float = RICHARDSON_RTOL):
    """Directional derivatives of a gradient field, one per row of ``directions``.

    ``grad_at(P)`` maps parameter rows (m, k) to gradient rows (m, k);
    ``theta`` is shared (k,) or per-row (m, k). The step is
    h = eps^(1/3) (1 + ||theta||) / max(||v||, 1); the estimate at h/2 must
    agree with the one at h within ``rtol``. Returns the Richardson
    combination (4 D(h/2) - D(h)) / 3 and a boolean mask of rows that agreed.
    """
    v = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    vn = np.linalg.norm(v, axis=1)
    if np.any(vn == 0):
        raise ZeroDirection("Hessian-vector product along a zero direction")
    theta = np.asarray(theta, dtype=np.float64)
    tn = np.linalg.norm(theta, axis=-1)
    h = _EPS ** (1.0 / 3.0) * (1.0 + tn) / np.maximum(vn, 1.0)

    def central(step):
        gp = grad_at(theta + step[:, None] * v)
        gm = grad_at(theta - step[:, None] * v)
        mag = np.maximum(np.linalg.norm(gp, axis=1), np.linalg.norm(gm, axis=1))
        return (gp - gm) / (2.0 * step[:, None]), mag

    coarse, mag = central(h)
    fine, _ = central(h / 2.0)
    diff = np.linalg.norm(coarse - fine, axis=1)
    scale = np.maximum(np.linalg.norm(coarse, axis=1), np.linalg.norm(fine, axis=1))
    noise = 1e3 * _EPS * (1.0 + mag) / h
    ok = diff <= rtol * scale + noise
    return (4.0 * fine - coarse) / 3.0, ok


def hvp(model, data, v, rtol: float = RICHARDSON_RTOL) -> np.ndarray:
    """H v for the mean loss of ``model`` on ``data``, in reference precision.

    Emits IllConditionedWarning when the step-halving check fails.
    """
    theta = model.params.values

    def grad_at(rows):
        return np.stack([gradient(model.with_values(r), data) for r in rows])

    out, ok = fd_hvp_rows(grad_at, theta, np.asarray(v, dtype=np.float64)[None, :], rtol)
    if not ok[0]:
        warnings.warn("step-halving Hessian-vector estimates disagree", IllConditionedWarning, stacklevel=2)
    return out[0]


def hvp_operator(model, data) -> LinearOperator:
    k = len(model.params)

    def apply(v):
        if not np.any(v):
            return np.zeros(k)
        return hvp(model, data, v)

    return LinearOperator(k, apply)


def full_hessian(model, data, return_asymmetry: bool = False):
    """Dense k x k Hessian from k basis-vector HVPs, symmetrized.

    Test oracle only; refuses k > 512. With ``return_asymmetry`` also returns
    ||M - M^T||_F / ||M||_F of the raw column matrix.
    """
    k = len(model.params)
    if k > MAX_ORACLE_PARAMS:
        raise OracleTooLarge(f"full_hessian refuses k={k} > {MAX_ORACLE_PARAMS}")
    m = np.empty((k, k))
    eye = np.eye(k)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IllConditionedWarning)
        for j in range(k):
            m[:, j] = hvp(model, data, eye[j])
    sym = 0.5 * (m + m.T)
    if not return_asymmetry:
        return sym
    fro = np.linalg.norm(m)
    return sym, (np.linalg.norm(m - m.T) / fro if fro > 0 else 0.0)
