from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hwfair import models, vhw
from hwfair.data import GroupedDataset
from hwfair.errors import LayoutError, ShapeError


def test_arch_spec_layout():
    spec = models.ArchSpec(3, ((4, "tanh"), (2, "relu")), "softmax", 3)
    assert spec.widths == [3, 4, 2, 3]
    assert spec.n_params == 3 * 4 + 4 + 4 * 2 + 2 + 2 * 3 + 3
    assert [b.name for b in spec.layout().blocks] == [
        "layer0.weight", "layer0.bias", "layer1.weight", "layer1.bias", "layer2.weight", "layer2.bias"]
    assert models.ArchSpec.from_dict(spec.to_dict()) == spec


@pytest.mark.parametrize("kw", [
    {"input_dim": 0}, {"input_dim": 2, "hidden": ((0, "tanh"),)}, {"input_dim": 2, "hidden": ((3, "gelu"),)},
    {"input_dim": 2, "head": "probit"}, {"input_dim": 2, "head": "softmax", "n_classes": 1},
    {"input_dim": 2, "head": "sigmoid", "n_classes": 3},
])
def test_arch_spec_validation(kw):
    with pytest.raises(ValueError):
        models.ArchSpec(**kw)


def test_init_model_deterministic_and_bounded():
    spec = models.ArchSpec(64, ((64, "tanh"),))
    a, b = models.init_model(spec, 7), models.init_model(spec, 7)
    assert a.params.sha256() == b.params.sha256()
    assert a.params.sha256() != models.init_model(spec, 8).params.sha256()
    w = a.params.block("layer0.weight")
    bound = np.sqrt(6.0 / 128)
    assert np.all(np.abs(w) <= bound)
    assert np.max(np.abs(w)) > 0.9 * bound
    for blk in spec.layout().blocks:
        if blk.name.endswith(".bias"):
            assert np.all(a.params.block(blk.name) == 0.0)


def test_zero_models_give_uniform_outputs():
    x = np.random.default_rng(0).standard_normal((5, 3))
    assert np.all(models.predict_proba(models.zeros_model(models.ArchSpec(3)), x) == 0.5)
    assert models.predict_proba(models.zeros_model(models.ArchSpec(3)), x[0]) == 0.5
    p = models.predict_proba(models.zeros_model(models.ArchSpec(3, head="softmax", n_classes=4)), x)
    assert np.allclose(p, 0.25, atol=0)


def test_predict_proba_clamps_and_sums_to_one():
    spec = models.ArchSpec(2, ((5, "tanh"),), "softmax", 3)
    m = models.init_model(spec, 1).with_values(models.init_model(spec, 1).params.values * 50)
    x = np.random.default_rng(1).standard_normal((40, 2)) * 10
    p = models.predict_proba(m, x)
    assert np.all((p >= 1e-12) & (p <= 1 - 1e-12))
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-9)


def test_softmax_translation_invariance():
    spec = models.ArchSpec(2, (), "softmax", 3)
    m = models.init_model(spec, 2)
    x = np.random.default_rng(2).standard_normal((10, 2))
    vals = m.params.values.copy()
    vals[spec.layout()["layer0.bias"].offset:spec.layout()["layer0.bias"].stop] += 7.5
    assert np.allclose(models.predict_proba(m, x), models.predict_proba(m.with_values(vals), x), atol=1e-12)


def test_reference_vs_binary32_forward_envelope():
    reg = vhw.builtin_profiles()
    x = np.random.default_rng(3).standard_normal((200, 4))
    for hidden in ((), ((8, "tanh"),), ((16, "relu"), (8, "tanh"))):
        m = models.init_model(models.ArchSpec(4, hidden), 0)
        ref = models.predict_proba(m, x)
        assert np.array_equal(ref, models.predict_proba(m, x))
        for pid in ("hw_seq32", "hw_pair32", "hw_perm32_s7", "hw_warp32"):
            assert np.max(np.abs(ref - models.predict_proba(m, x, reg[pid]))) <= 1e-3


def test_input_shape_checked():
    m = models.init_model(models.ArchSpec(3), 0)
    with pytest.raises(ShapeError):
        m.probs(np.zeros((2, 4)))


def test_layout_mismatch_rejected():
    spec = models.ArchSpec(3)
    with pytest.raises(LayoutError):
        models.Model(spec, models.init_model(models.ArchSpec(2, ((1, "tanh"),)), 0).params)


def test_output_gradients_logistic_closed_form():
    m = models.init_model(models.ArchSpec(2), 4)
    x = np.random.default_rng(4).standard_normal((6, 2))
    f, gz = m.output_gradients(x)
    xt = np.c_[x, np.ones(6)]
    assert np.allclose(gz, xt, atol=0)
    f2, gf = m.output_gradients(x, kind="probability")
    assert np.array_equal(f, f2)
    assert np.allclose(gf, (f * (1 - f))[:, None] * xt, atol=1e-15)
    with pytest.raises(ShapeError):
        models.init_model(models.ArchSpec(2, head="softmax", n_classes=3), 0).output_gradients(x)


def test_checkpoint_round_trip(tmp_path):
    spec = models.ArchSpec(3, ((4, "relu"),), "softmax", 3)
    m = models.init_model(spec, 5)
    path = tmp_path / "m.bin"
    models.save_checkpoint(path, m, {"run": "x"})
    m2, header = models.load_checkpoint(path)
    assert m2.spec == spec
    assert m2.params == m.params
    assert header["run"] == "x" and header["param_sha256"] == m.params.sha256()
    (tmp_path / "junk.bin").write_bytes(b"nope")
    with pytest.raises(ValueError):
        models.load_checkpoint(tmp_path / "junk.bin")
    raw = path.read_bytes()
    (tmp_path / "short.bin").write_bytes(raw[:-8])
    with pytest.raises(LayoutError):
        models.load_checkpoint(tmp_path / "short.bin")


@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3))
def test_quadratic_probe_loss(theta):
    a = np.diag([1.0, 2.0, 3.0])
    probe = models.QuadraticProbe.create(a, theta)
    ds = GroupedDataset(np.zeros((2, 1)), [0, 0], [0, 0], 1, 2)
    th = np.asarray(theta)
    assert np.allclose(probe.sample_losses(ds), 0.5 * th @ a @ th)
