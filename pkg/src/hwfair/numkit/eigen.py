"""Algebraic-maximum eigenvalues of symmetric operators by shifted power iteration."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np


@dataclass(frozen=True)
class LinearOperator:
    dim: int
    apply: Callable[[np.ndarray], np.ndarray]

    def __matmul__(self, v):
        return self.apply(v)

    @classmethod
    def from_matrix(cls, a) -> "LinearOperator":
        a = np.array(a, dtype=np.float64)
        return cls(a.shape[0], lambda v: a @ v)


class EigenResult(NamedTuple):
    lambda_max: float
    iters: int
    converged: bool


def _start_vectors(seed: int, m: int, dim: int) -> np.ndarray:
    v = np.random.default_rng(seed).standard_normal((m, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _power(apply_rows, v0, shift, tol, max_iters, use_norm):
    """Lockstep power iteration on (A + shift I) for every row.

    Rows stop updating once their estimate's relative change drops below
    ``tol``. With ``use_norm`` the estimate is ||A v|| (spectral radius, robust
    to +-r pairs); otherwise the Rayleigh quotient.
    """
    m = v0.shape[0]
    v = v0.copy()
    est = np.full(m, np.nan)
    done = np.zeros(m, dtype=bool)
    iters = np.zeros(m, dtype=np.int64)
    for it in range(1, max_iters + 1):
        live = np.flatnonzero(~done)
        if live.size == 0:
            break
        w = apply_rows(v[live], live) + shift[live, None] * v[live]
        wn = np.linalg.norm(w, axis=1)
        new = wn if use_norm else np.einsum("ij,ij->i", v[live], w)
        old = est[live]
        zero = wn <= 1e-300
        with np.errstate(invalid="ignore"):
            conv = np.abs(new - old) <= tol * np.maximum(np.abs(new), 1e-300)
        conv |= zero
        est[live] = np.where(zero, 0.0, new)
        iters[live] = it
        safe = np.where(zero, 1.0, wn)
        v[live] = np.where(zero[:, None], v[live], w / safe[:, None])
        done[live[conv]] = True
    return est, iters, done


def max_eigenvalues(
    apply_rows: Callable[[np.ndarray, np.ndarray], np.ndarray],
    n_ops: int,
    dim: int,
    seed: int = 0,
    tol: float = 1e-10,
    max_iters: int = 20_000,
):
    """Algebraic maxima of ``n_ops`` independent symmetric operators at once.

    ``apply_rows(V, rows)`` must return ``A_r v_r`` for each row ``v_r`` of V,
    where ``rows`` holds the operator indices of V's rows. Returns arrays
    (lambda_max, iters, converged).

    First the spectral radius r of each operator is estimated; then the power
    iteration on A + r I (positive semi-definite) yields mu and lambda = mu - r.
    """
    v0 = _start_vectors(seed, n_ops, dim)
    zero = np.zeros(n_ops)
    radius, it1, ok1 = _power(apply_rows, v0, zero, tol, max_iters, use_norm=True)
    mu, it2, ok2 = _power(apply_rows, v0, radius, tol, max_iters, use_norm=False)
    return mu - radius, it1 + it2, ok1 & ok2


def max_eigenvalue(op: LinearOperator, seed: int = 0, tol: float = 1e-10, max_iters: int = 20_000) -> EigenResult:
    """Largest (algebraic, not largest-magnitude) eigenvalue of a symmetric operator.

    Deterministic given ``seed``. On non-convergence the last estimate is
    returned with ``converged=False``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")

    def apply_rows(vs, _rows):
        return np.asarray(op.apply(vs[0]), dtype=np.float64)[None, :]

    lam, iters, ok = max_eigenvalues(apply_rows, 1, op.dim, seed, tol, max_iters)
    return EigenResult(float(lam[0]), int(iters[0]), bool(ok[0]))
