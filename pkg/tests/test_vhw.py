from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hwfair import vhw
from hwfair.errors import ShapeError

SEQ32 = vhw.VirtualHardwareProfile("s32", "sequential", "binary32", "binary32")
PAIR32 = vhw.VirtualHardwareProfile("p32", "pairwise", "binary32", "binary32")
U32 = 2.0 ** -24


def gamma(n: int) -> float:
    return n * U32 / (1 - n * U32)


def exact_sum_f32(x) -> float:
    return math.fsum(np.asarray(x, dtype=np.float32).astype(np.float64))


def test_absorption_binary32_sequential():
    assert vhw.reduce([1e8, 1.0, -1e8], SEQ32) == 0.0
    assert math.fsum([1e8, 1.0, -1e8]) == 1.0
    assert vhw.reduce([1e8, 1.0, -1e8]) == 1.0


@given(st.lists(st.integers(-10**6, 10**6), min_size=1, max_size=200), st.randoms(use_true_random=False))
def test_integer_sums_are_order_free_in_reference(xs, rnd):
    ys = list(xs)
    rnd.shuffle(ys)
    assert vhw.reduce(xs) == vhw.reduce(ys) == float(sum(xs))


@pytest.mark.parametrize("policy,kw", [("sequential", {}), ("pairwise", {}), ("permuted", {"seed": 3}), ("chunked_tree", {"chunk_size": 4})])
@given(xs=st.lists(st.integers(-1000, 1000), min_size=1, max_size=100))
def test_every_policy_exact_on_small_integers(policy, kw, xs):
    p = vhw.VirtualHardwareProfile("t", policy, "binary64", "binary64", **kw)
    assert vhw.reduce(xs, p) == float(sum(xs))


def test_pairwise_error_bound_on_uniform_vector():
    x = np.random.default_rng(0).uniform(0, 1, 10_000)
    exact = exact_sum_f32(x)
    bound = math.ceil(math.log2(x.size)) * U32 * float(np.sum(np.abs(x)))
    assert abs(vhw.reduce(x, PAIR32) - exact) <= bound


@pytest.mark.parametrize("seed", range(5))
def test_sequential_and_pairwise_error_bounds(seed):
    x = np.random.default_rng(seed).standard_normal(10_000)
    exact = exact_sum_f32(x)
    s = float(np.sum(np.abs(np.asarray(x, dtype=np.float32))))
    assert abs(vhw.reduce(x, SEQ32) - exact) <= gamma(x.size - 1) * s
    assert abs(vhw.reduce(x, PAIR32) - exact) <= gamma(math.ceil(math.log2(x.size))) * s


def test_chunked_tree_plan_matches_hand_composition():
    x = np.random.default_rng(1).standard_normal(100).astype(np.float32)
    p = vhw.VirtualHardwareProfile("w", "chunked_tree", "binary32", "binary32", chunk_size=32)
    padded = np.concatenate([x, np.zeros(28, np.float32)]).reshape(4, 32)
    partial = [np.float32(0)] * 4
    for i in range(4):
        acc = np.float32(0)
        for v in padded[i]:
            acc = np.float32(acc + v)
        partial[i] = acc
    expect = np.float32(np.float32(partial[0] + partial[1]) + np.float32(partial[2] + partial[3]))
    assert vhw.reduce(x, p) == float(expect)


def test_permuted_plan_is_sequential_fold_of_seeded_permutation():
    x = np.random.default_rng(2).standard_normal(257)
    p = vhw.VirtualHardwareProfile("q", "permuted", "binary32", "binary32", seed=7)
    perm = np.random.default_rng(7).permutation(x.size)
    assert vhw.reduce(x, p) == vhw.reduce(x[perm], SEQ32)


def test_sequential_is_a_left_fold():
    x = np.random.default_rng(3).standard_normal(50)
    acc = np.float32(0)
    for v in x.astype(np.float32):
        acc = np.float32(acc + v)
    assert vhw.reduce(x, SEQ32) == float(acc)


def test_reduce_is_deterministic_and_axis_aware():
    x = np.random.default_rng(4).standard_normal((7, 300))
    for p in vhw.builtin_profiles():
        a = vhw.reduce(x, p, axis=1)
        assert np.array_equal(a, vhw.reduce(x, p, axis=1))
        assert np.array_equal(a, [vhw.reduce(r, p) for r in x])
        assert np.array_equal(vhw.reduce(x.T, p, axis=0), a)


def test_reduce_rejects_empty():
    with pytest.raises(ShapeError):
        vhw.reduce([])


def test_overflow_gives_inf():
    assert vhw.reduce([3e38, 3e38], SEQ32) == math.inf


def test_dot_examples():
    y = np.random.default_rng(5).standard_normal(16)
    for p in vhw.builtin_profiles():
        assert vhw.dot(y, np.zeros(16), p) == 0.0
        for i in range(16):
            e = np.zeros(16)
            e[i] = 1.0
            assert vhw.dot(e, y, p) == float(y[i].astype(p.element_dtype))


def test_dot_cancellation_binary32_vs_binary64():
    x = [1e8, 1.0, -1e8]
    y = [1.0, 1.0, 1.0]
    ref = vhw.dot(x, y)
    low = vhw.dot(x, y, SEQ32)
    assert abs(low - ref) / abs(ref) > 1e-3


def test_dot_length_mismatch():
    with pytest.raises(ShapeError):
        vhw.dot([1.0, 2.0], [1.0])


def test_affine_inputs_matches_dot():
    rng = np.random.default_rng(6)
    a = rng.standard_normal((5, 9))
    w = rng.standard_normal((3, 9))
    out = vhw.affine_inputs(a, w, PAIR32)
    assert out.shape == (5, 3)
    for i in range(5):
        for j in range(3):
            assert out[i, j] == vhw.dot(a[i], w[j], PAIR32)


def test_builtin_catalog():
    reg = vhw.builtin_profiles()
    assert len(reg) == 5
    assert reg.reference_id == "hw_ref"
    assert reg.ids == ["hw_ref", "hw_seq32", "hw_pair32", "hw_perm32_s7", "hw_warp32"]
    assert reg.reference.is_exact_reference
    for p in reg:
        assert vhw.reduce(np.zeros(100), p) == 0.0


def test_seq32_and_pair32_differ_on_uniform_vector():
    x = np.random.default_rng(0).uniform(0, 1, 10_000)
    reg = vhw.builtin_profiles()
    assert vhw.reduce(x, reg["hw_seq32"]) != vhw.reduce(x, reg["hw_pair32"])


def test_registry_round_trip_and_validation():
    reg = vhw.builtin_profiles()
    again = vhw.ProfileRegistry.from_dict(reg.to_dict())
    assert again == reg
    sub = vhw.ProfileRegistry.from_dict({"ids": ["hw_seq32", "hw_ref"], "reference": "hw_ref"})
    assert sub.ids == ["hw_seq32", "hw_ref"]
    with pytest.raises(KeyError):
        vhw.ProfileRegistry.from_dict({"ids": ["nope"]})
    with pytest.raises(ValueError):
        vhw.ProfileRegistry((vhw.REFERENCE, vhw.REFERENCE), "hw_ref")
    with pytest.raises(ValueError):
        vhw.VirtualHardwareProfile("x", "permuted")
    with pytest.raises(ValueError):
        vhw.VirtualHardwareProfile("x", "chunked_tree", chunk_size=1)
    with pytest.raises(ValueError):
        vhw.VirtualHardwareProfile("x", accumulator_precision="binary16")
