from __future__ import annotations

import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from hwfair import models, numkit
from hwfair.data import GroupedDataset
from hwfair.errors import EmptySubset, LayoutError, OracleTooLarge, SchemaError, ZeroDirection
from hwfair.numkit import ParamVector
from hwfair.numkit.params import Layout

from .oracles import jacobi_eigenvalues, logistic_mean_loss


def dataset(x, y, groups=None, n_classes=2):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    g = np.zeros(len(x), dtype=int) if groups is None else np.asarray(groups)
    return GroupedDataset(x, g, np.asarray(y), int(g.max()) + 1, n_classes)


def logistic(w, b):
    spec = models.ArchSpec(len(w))
    return models.Model(spec, ParamVector(np.r_[w, b], spec.layout()))


# ------------------------------------------------------------ parameters


def test_layout_and_param_vector():
    lay = Layout.from_shapes([("a", (2, 3)), ("b", (4,))])
    assert lay.size == 10
    pv = ParamVector(np.arange(10.0), lay)
    assert pv.block("a").shape == (2, 3)
    assert np.array_equal(pv.block("b"), [6, 7, 8, 9])
    assert pv == pv.replace(np.arange(10.0))
    assert pv.sha256() == pv.replace(np.arange(10.0)).sha256()
    assert pv.distance(pv.replace(np.r_[np.arange(10.0)[:9], 9.0 + 5.0])) == 5.0
    with pytest.raises(LayoutError):
        ParamVector(np.zeros(9), lay)
    with pytest.raises(LayoutError):
        ParamVector(np.r_[np.zeros(9), np.nan], lay)
    with pytest.raises(LayoutError):
        pv.distance(ParamVector(np.zeros(10), Layout.from_shapes([("c", (10,))])))
    with pytest.raises(ValueError):
        pv.values[0] = 1.0


# ------------------------------------------------------------ loss / gradient


def test_loss_hand_computed_logistic():
    p = np.array([0.9, 0.8, 0.6])
    x = np.log(p / (1 - p))[:, None]
    ds = dataset(x, [1, 1, 0])
    expect = np.mean([-math.log(0.9), -math.log(0.8), -math.log(0.4)])
    assert numkit.loss(logistic([1.0], 0.0), ds) == pytest.approx(expect, rel=1e-12)


def test_loss_uniform_softmax_is_log_k():
    spec = models.ArchSpec(3, head="softmax", n_classes=4)
    m = models.zeros_model(spec)
    ds = dataset(np.random.default_rng(0).standard_normal((6, 3)), [0, 1, 2, 3, 0, 1], n_classes=4)
    assert numkit.loss(m, ds) == pytest.approx(math.log(4), rel=1e-14)


def test_loss_perfect_prediction_is_clamp_limited():
    ds = dataset([[1.0], [-1.0]], [1, 0])
    assert 0.0 <= numkit.loss(logistic([1e4], 0.0), ds) <= 1e-11


def test_loss_errors():
    ds = dataset([[1.0]], [1])
    with pytest.raises(EmptySubset):
        numkit.loss(logistic([1.0], 0.0), ds.subset([]))
    bad = GroupedDataset(np.zeros((1, 1)), [0], [2], 1, 3)
    with pytest.raises(SchemaError):
        numkit.loss(logistic([1.0], 0.0), bad)


def test_gradient_quadratic_probe():
    probe = models.QuadraticProbe.create(np.eye(2), [1.0, -2.0])
    ds = dataset([[0.0], [0.0]], [0, 0])
    assert np.allclose(numkit.gradient(probe, ds), [1.0, -2.0], atol=0)


def test_gradient_logistic_single_sample():
    g = numkit.gradient(logistic([0.0, 0.0], 0.0), dataset([[1.0, 0.0]], [1]))
    assert np.allclose(g[:2], [-0.5, 0.0], atol=1e-15)


@pytest.mark.parametrize("hidden,head,k", [((), "sigmoid", 2), (((5, "tanh"),), "sigmoid", 2),
                                          (((4, "relu"), (3, "tanh")), "softmax", 3), (((6, "tanh"),), "linear", 2)])
def test_gradient_matches_finite_differences(hidden, head, k):
    rng = np.random.default_rng(1)
    spec = models.ArchSpec(3, hidden, head, k)
    m = models.init_model(spec, 4)
    ds = dataset(rng.standard_normal((20, 3)), rng.integers(0, k, 20), n_classes=k)
    g = numkit.gradient(m, ds)
    fd = numkit.finite_difference_gradient(lambda th: numkit.loss(m.with_values(th), ds), m.params.values)
    assert np.max(numkit.relative_errors(g, fd)) < 1e-5


def test_gradient_against_direct_formula():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((30, 2))
    y = rng.integers(0, 2, 30)
    w, b = rng.standard_normal(2), 0.3
    ds = dataset(x, y)
    fd = numkit.finite_difference_gradient(lambda th: logistic_mean_loss(th[:2], th[2], x, y), np.r_[w, b])
    assert np.max(numkit.relative_errors(numkit.gradient(logistic(w, b), ds), fd)) < 1e-6
    assert numkit.loss(logistic(w, b), ds) == pytest.approx(logistic_mean_loss(w, b, x, y), rel=1e-12)


def test_loss_and_gradient_consistent():
    rng = np.random.default_rng(3)
    ds = dataset(rng.standard_normal((10, 2)), rng.integers(0, 2, 10))
    m = logistic([0.4, -0.2], 0.1)
    l, g = numkit.loss_and_gradient(m, ds)
    assert l == numkit.loss(m, ds)
    assert np.array_equal(g, numkit.gradient(m, ds))


@given(hnp.arrays(np.float64, 8, elements=st.floats(-1e3, 1e3)))
def test_relative_errors_zero_on_self(a):
    assert np.all(numkit.relative_errors(a, a) == 0.0)


# ------------------------------------------------------------ HVP / Hessian


def test_hvp_quadratic_probe():
    probe = models.QuadraticProbe.create(np.diag([3.0, 1.0]), [0.3, -0.7])
    hv = numkit.hvp(probe, dataset([[0.0]], [0]), [1.0, 1.0])
    assert np.allclose(hv, [3.0, 1.0], rtol=1e-8)


def test_hvp_zero_direction():
    probe = models.QuadraticProbe.create(np.eye(2), [0.0, 0.0])
    with pytest.raises(ZeroDirection):
        numkit.hvp(probe, dataset([[0.0]], [0]), [0.0, 0.0])


def test_full_hessian_quadratic_probe():
    a = np.array([[2.0, 0.5, 0.0], [0.5, 1.0, -0.3], [0.0, -0.3, 4.0]])
    probe = models.QuadraticProbe.create(a, [1.0, 2.0, 3.0])
    assert np.allclose(numkit.full_hessian(probe, dataset([[0.0]], [0])), a, atol=1e-7)


def test_full_hessian_logistic_single_sample():
    x = np.array([0.7, -1.2])
    m = logistic([0.3, 0.5], -0.1)
    p = 1.0 / (1.0 + np.exp(-(x @ [0.3, 0.5] - 0.1)))
    h = numkit.full_hessian(m, dataset([x], [1]))
    assert np.allclose(h[:2, :2], p * (1 - p) * np.outer(x, x), atol=1e-8)


def test_full_hessian_asymmetry_small():
    rng = np.random.default_rng(5)
    spec = models.ArchSpec(2, ((4, "tanh"),))
    m = models.init_model(spec, 1)
    ds = dataset(rng.standard_normal((15, 2)), rng.integers(0, 2, 15))
    _, asym = numkit.full_hessian(m, ds, return_asymmetry=True)
    assert asym < 1e-6


def test_full_hessian_refuses_large_models():
    spec = models.ArchSpec(2, ((200, "tanh"),))
    m = models.init_model(spec, 0)
    with pytest.raises(OracleTooLarge):
        numkit.full_hessian(m, dataset([[0.0, 0.0]], [0]))


def test_hvp_operator_matches_dense():
    rng = np.random.default_rng(6)
    spec = models.ArchSpec(2, ((3, "tanh"),))
    m = models.init_model(spec, 2)
    ds = dataset(rng.standard_normal((12, 2)), rng.integers(0, 2, 12))
    h = numkit.full_hessian(m, ds)
    op = numkit.hvp_operator(m, ds)
    v = rng.standard_normal(len(m.params))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert np.allclose(op @ v, h @ v, atol=1e-6)
    assert np.array_equal(op @ np.zeros(len(m.params)), np.zeros(len(m.params)))


# ------------------------------------------------------------ eigenvalues


def test_eigen_diagonal_examples():
    r = numkit.max_eigenvalue(numkit.LinearOperator.from_matrix(np.diag([3.0, 1.0])), tol=1e-12)
    assert r.converged and abs(r.lambda_max - 3.0) < 1e-9
    r = numkit.max_eigenvalue(numkit.LinearOperator.from_matrix(np.diag([-5.0, 2.0])), tol=1e-12)
    assert r.converged and abs(r.lambda_max - 2.0) < 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_eigen_matches_jacobi_oracle(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((20, 20))
    a = 0.5 * (a + a.T)
    if seed % 2:
        a -= 8.0 * np.eye(20)
    r = numkit.max_eigenvalue(numkit.LinearOperator.from_matrix(a), seed=seed, tol=1e-13, max_iters=100_000)
    assert abs(r.lambda_max - jacobi_eigenvalues(a)[-1]) < 1e-6


def test_jacobi_oracle_agrees_with_lapack():
    a = np.random.default_rng(9).standard_normal((8, 8))
    a = a + a.T
    assert np.allclose(jacobi_eigenvalues(a), np.linalg.eigvalsh(a), atol=1e-10)


def test_eigen_deterministic_and_flags_nonconvergence():
    a = np.diag([1.0, 0.999999, -1.0])
    op = numkit.LinearOperator.from_matrix(a)
    r1 = numkit.max_eigenvalue(op, seed=3, tol=1e-15, max_iters=5)
    r2 = numkit.max_eigenvalue(op, seed=3, tol=1e-15, max_iters=5)
    assert r1 == r2
    assert not r1.converged
    with pytest.raises(ValueError):
        numkit.max_eigenvalue(op, tol=0.0)


@given(hnp.arrays(np.float64, (4, 4), elements=st.floats(-10, 10)))
def test_eigen_never_exceeds_spectral_radius(m):
    a = 0.5 * (m + m.T)
    r = numkit.max_eigenvalue(numkit.LinearOperator.from_matrix(a), tol=1e-10)
    w = np.linalg.eigvalsh(a)
    assert r.lambda_max <= w[-1] + 1e-8 * (1 + np.max(np.abs(w)))
    assert r.lambda_max >= w[0] - 1e-8 * (1 + np.max(np.abs(w)))


def test_batched_eigenvalues_lockstep():
    mats = [np.diag([1.0, 4.0]), np.diag([-3.0, -1.0]), np.array([[0.0, 2.0], [2.0, 0.0]])]

    def apply_rows(vs, rows):
        return np.stack([mats[r] @ v for v, r in zip(vs, rows)])

    lam, _, ok = numkit.max_eigenvalues(apply_rows, 3, 2, seed=0, tol=1e-13)
    assert ok.all()
    assert np.allclose(lam, [4.0, -1.0, 2.0], atol=1e-8)
