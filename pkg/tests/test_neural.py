import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from acereloc.errors import BadMagic, ChecksumMismatch, DimensionMismatch, VersionMismatch
from acereloc.neural import (BackboneNet, OptimState, RegressionHead, adamw_step, f16_roundtrip,
                             head_backward, head_forward, load_map, map_bytes, map_from_bytes,
                             one_cycle_lr, save_map)

from . import oracles
from .gradcheck import check_gradient


def small_head(seed=0, homogeneous=True, n_hidden=8, width=16, in_dim=12, dtype=np.float32):
    rng = np.random.default_rng(seed)
    h = RegressionHead.init(in_dim, width, n_hidden, homogeneous, rng=rng, dtype=dtype, output_scale=0.3)
    # non-zero biases keep finite differences away from ReLU kinks at exactly 0
    h.biases = [(0.1 + 0.1 * rng.random(b.shape)).astype(dtype) for b in h.biases]
    return h


def test_default_architecture():
    h = RegressionHead.init(128, rng=0)
    assert h.n_hidden == 8 and h.width == 512 and h.out_dim == 4
    assert h.skips == (3, 6)
    assert RegressionHead.init(128, homogeneous=False, rng=0).out_dim == 3


def test_zero_head_outputs_zero(rng):
    h = small_head()
    h.weights = [np.zeros_like(w) for w in h.weights]
    h.biases = [np.zeros_like(b) for b in h.biases]
    assert not head_forward(h, rng.normal(size=(5, 12))).any()


def test_identity_single_layer():
    h = RegressionHead([np.eye(3, dtype=np.float32)], [np.zeros(3, np.float32)], homogeneous=False)
    v = np.array([[1.5, -2.0, 0.25]], dtype=np.float32)
    assert np.array_equal(head_forward(h, v), v)


def test_two_layer_head_matches_hand_matmul():
    h = RegressionHead.init(4, 5, 1, homogeneous=False, rng=np.random.default_rng(0), output_scale=1.0)
    h.biases = [np.random.default_rng(1).normal(size=b.shape).astype(np.float32) for b in h.biases]
    e1 = np.eye(4, dtype=np.float32)[:1]
    want = oracles.mlp_forward([w.T.tolist() for w in h.weights], [b.tolist() for b in h.biases], e1[0])
    assert np.allclose(head_forward(h, e1)[0], want, atol=1e-6)


def test_skip_connections_match_reference(rng):
    h = small_head(3)
    x = rng.normal(size=12).astype(np.float32)
    want = oracles.mlp_forward([w.T.tolist() for w in h.weights], [b.tolist() for b in h.biases], x, h.skips)
    assert np.allclose(head_forward(h, x[None])[0], want, rtol=1e-4, atol=1e-6)


def test_dimension_mismatch(rng):
    h = small_head()
    with pytest.raises(DimensionMismatch):
        head_forward(h, rng.normal(size=(2, 11)))
    out, cache = head_forward(h, rng.normal(size=(2, 12)), return_cache=True)
    with pytest.raises(DimensionMismatch):
        head_backward(h, cache, np.zeros((2, 3)))


def test_zero_output_grad_gives_zero_grads(rng):
    h = small_head()
    _, cache = head_forward(h, rng.normal(size=(4, 12)), return_cache=True)
    grads, gin = head_backward(h, cache, np.zeros((4, 4)), need_input_grad=True)
    assert all(not g.any() for g in grads) and not gin.any()


def test_linear_layer_weight_grad_is_input_column_sums(rng):
    h = RegressionHead([rng.normal(size=(5, 3)).astype(np.float64)], [np.zeros(3)], homogeneous=False)
    x = rng.normal(size=(7, 5))
    _, cache = head_forward(h, x, return_cache=True)
    (gW, gb), _ = head_backward(h, cache, np.ones((7, 3)))
    assert np.allclose(gW, np.outer(x.sum(axis=0), np.ones(3)))
    assert np.allclose(gb, 7)


@pytest.mark.parametrize("homogeneous", [True, False])
def test_head_backward_matches_finite_differences(homogeneous, rng):
    h = small_head(5, homogeneous, n_hidden=7, width=6, in_dim=4, dtype=np.float64)
    x = rng.normal(size=(3, 4))
    proj = rng.normal(size=(3, h.out_dim))
    _, cache = head_forward(h, x, return_cache=True)
    grads, gin = head_backward(h, cache, proj, need_input_grad=True)

    def f():
        out, (_, masks) = head_forward(h, x, return_cache=True)
        return float((out * proj).sum()), masks

    worst, checked, skipped = check_gradient(f, h.params() + [x], grads + [gin], eps=1e-4)
    assert worst < 1e-4
    assert checked > 10 * max(skipped, 1)

def test_adamw_zero_grad_no_decay_is_noop():
    p = [np.array([1.0, -2.0])]
    st_ = OptimState.for_params(p, weight_decay=0.0)
    adamw_step(p, [np.zeros(2)], st_, 1e-3)
    assert np.array_equal(p[0], [1.0, -2.0]) and st_.step == 1


def test_adamw_first_step_is_lr_sign():
    p = [np.array([0.5])]
    adamw_step(p, [np.array([1.0])], OptimState.for_params(p, weight_decay=0.0), 1e-3)
    assert abs(p[0][0] - (0.5 - 1e-3)) < 1e-9


def test_adamw_decoupled_decay():
    p = [np.array([1.0])]
    adamw_step(p, [np.zeros(1)], OptimState.for_params(p, weight_decay=0.01), 0.1)
    assert p[0][0] == pytest.approx(0.999, abs=1e-12)


def test_one_cycle_examples():
    assert one_cycle_lr(0, 5e-4, 5e-3) == pytest.approx(5e-4)
    assert one_cycle_lr(0.5, 5e-4, 5e-3) == pytest.approx(5e-3)
    assert one_cycle_lr(1, 5e-4, 5e-3) == pytest.approx(5e-4)
    assert one_cycle_lr(0.25, 1.0, 3.0) == pytest.approx(2.0)


def test_one_cycle_unimodal_and_continuous():
    t = np.linspace(0, 1, 2001)
    lr = np.array([one_cycle_lr(x, 1e-4, 1e-2) for x in t])
    peak = int(np.argmax(lr))
    assert t[peak] == pytest.approx(0.5)
    assert np.all(np.diff(lr[:peak + 1]) >= 0) and np.all(np.diff(lr[peak:]) <= 0)
    assert np.max(np.abs(np.diff(lr))) < 1e-4


def test_f16_examples():
    assert f16_roundtrip(1.0) == 1.0
    assert f16_roundtrip(0.1) == np.float32(0.0999755859375)
    assert f16_roundtrip(0.0) == 0.0
    assert f16_roundtrip(1e6) == 65504.0


@given(st.floats(2**-14, 65504, allow_nan=False) | st.floats(-65504, -2**-14, allow_nan=False))
def test_f16_matches_struct_and_relative_error(x):
    x32 = float(np.float32(x))
    got = float(f16_roundtrip(x32))
    assert got == oracles.f16(x32)
    assert abs(got - x32) <= 2**-11 * abs(x32)


def test_map_roundtrip_bit_exact(tmp_path, rng):
    h = small_head(2)
    h.mean_translation = np.array([1.0, -2.0, 0.5], dtype=np.float32)
    save_map(h, tmp_path / "m.acem")
    back = load_map(tmp_path / "m.acem")
    x = rng.normal(size=(50, 12)).astype(np.float32)
    assert np.array_equal(head_forward(back, x), head_forward(h.quantized(), x))
    assert np.array_equal(back.mean_translation, h.mean_translation)
    assert map_bytes(back) == map_bytes(h)


def test_map_header_layout():
    h = small_head(homogeneous=False, n_hidden=2, width=4, in_dim=3)
    data = map_bytes(h)
    magic, version, homog, in_dim, width, n_hidden = struct.unpack_from("<4sHBIII", data)
    assert (magic, version, homog, in_dim, width, n_hidden) == (b"ACEM", 1, 0, 3, 4, 2)


def test_map_errors():
    data = map_bytes(small_head())
    with pytest.raises(ChecksumMismatch):
        map_from_bytes(data[:-10])
    with pytest.raises(BadMagic):
        map_from_bytes(b"XXXX" + data[4:])
    bumped = bytearray(data[:-4])
    bumped[4:6] = struct.pack("<H", 9)
    import zlib
    with pytest.raises(VersionMismatch):
        map_from_bytes(bytes(bumped) + struct.pack("<I", zlib.crc32(bytes(bumped))))


def test_backbone_net_shapes(rng):
    net = BackboneNet.init(32, rng=0, widths=(4, 8, 8, 16))
    out = net.forward(rng.normal(size=(1, 1, 40, 56)))
    assert out.shape == (1, 32, 5, 7)


def test_backbone_net_backward_matches_finite_differences(rng):
    net = BackboneNet.init(3, rng=1, dtype=np.float64, widths=(2, 2, 3, 3))
    for b in net.params()[1::2]:
        b[:] = 0.1 + 0.1 * rng.random(b.shape)
    x = rng.normal(size=(1, 1, 16, 16))
    out, caches = net.forward(x, return_cache=True)
    proj = rng.normal(size=out.shape)
    grads = net.backward(caches, proj)

    def f():
        y, c = net.forward(x, return_cache=True)
        masks = [m for entry in c[:-1] for m in entry if isinstance(m, np.ndarray) and m.dtype == bool]
        return float((y * proj).sum()), masks

    worst, checked, _ = check_gradient(f, net.params(), grads, eps=1e-5, max_entries=6, rng=rng)
    assert worst < 1e-4 and checked >= 40
