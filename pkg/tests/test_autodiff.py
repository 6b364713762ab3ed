"""Tape, gradients, optimizer and checkpoint container."""

import struct

import numpy as np
import pytest

from miniflow import autodiff as ad


# ---------------------------------------------------------------------------
# reference: plain AdamW recurrence, written independently of the class

def adamw_ref(p0, grads, rates, b1=0.9, b2=0.999, eps=1e-8, wd=0.0):
    p = p0.astype(np.float64).copy()
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, (g, lr) in enumerate(zip(grads, rates), start=1):
        g = g.astype(np.float64)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        p = p - lr * (mh / (np.sqrt(vh) + eps) + wd * p)
    return p


def test_var_arithmetic_values():
    t = ad.Tape()
    x = t.leaf(np.array([1.0, 2.0]), name="x")
    y = t.leaf(np.array([3.0, -1.0]), name="y")
    np.testing.assert_array_equal((x + y).val, [4.0, 1.0])
    np.testing.assert_array_equal((x * y).val, [3.0, -2.0])
    np.testing.assert_array_equal((2.0 * x).val, [2.0, 4.0])
    np.testing.assert_array_equal((x * 3.0).val, [3.0, 6.0])


def test_backward_product_rule():
    t = ad.Tape()
    x = t.leaf(np.array([1.5, -2.0, 0.5]), name="x")
    loss = ad.sum_all(ad.mul(x, x))
    g = t.backward(loss)
    np.testing.assert_allclose(g["x"], 2 * x.val, rtol=1e-15)


def test_backward_fan_out_accumulates():
    t = ad.Tape()
    x = t.leaf(np.array([2.0]), name="x")
    y = ad.add(ad.mul(x, x), ad.scale(x, 3.0))  # x^2 + 3x -> 2x + 3 = 7
    g = t.backward(ad.sum_all(y))
    np.testing.assert_allclose(g["x"], [7.0])


def test_duplicate_parameter_name_rejected():
    t = ad.Tape()
    t.leaf(np.zeros(2), name="w")
    with pytest.raises(ValueError, match="duplicate"):
        t.leaf(np.zeros(3), name="w")


def test_backward_requires_scalar_loss():
    t = ad.Tape()
    x = t.leaf(np.zeros(4), name="x")
    with pytest.raises(ValueError, match="scalar"):
        t.backward(ad.mul(x, x))


def test_unreached_parameter_gets_zeros():
    t = ad.Tape()
    x = t.leaf(np.ones(3), name="x")
    u = t.leaf(np.ones((2, 2)), name="unused")
    g = t.backward(ad.sum_all(x))
    assert g["unused"].shape == (2, 2)
    assert not g["unused"].any()
    np.testing.assert_array_equal(g["x"], np.ones(3))


def test_const_subgraph_carries_no_gradient_work():
    t = ad.Tape()
    c = t.const(np.full(3, 5.0))
    x = t.leaf(np.ones(3), name="x")
    g = t.backward(ad.sum_all(ad.mul(x, ad.relu(c))))
    np.testing.assert_array_equal(g["x"], np.full(3, 5.0))


def test_check_finite_names_the_op():
    t = ad.Tape(check_finite=True)
    x = t.leaf(np.array([1000.0]), name="x")
    with np.errstate(over="ignore"), pytest.raises(ad.NumericalError, match="exp"):
        ad.pointwise(x, "exp")


def test_finite_diff_check_accepts_true_gradient():
    def build(t, lv):
        return ad.sum_all(ad.mul(lv["x"], lv["x"]))

    err = ad.finite_diff_check(build, {"x": np.array([0.3, -1.2, 2.0])})
    assert err < 1e-9


def test_finite_diff_check_catches_wrong_gradient():
    # an op whose vjp is deliberately off by 10% must be flagged loudly
    def bad_square(x):
        def vjp(g, needs):
            return (2.2 * x.val * g,)
        return x.tape.apply(x.val * x.val, (x,), vjp, "bad_square")

    def build(t, lv):
        return ad.sum_all(bad_square(lv["x"]))

    err = ad.finite_diff_check(build, {"x": np.array([0.7, -0.4])})
    assert err > 1e-2


def test_finite_diff_direction_accepts_true_gradient():
    def build(t, lv):
        return ad.sum_all(ad.mul(lv["x"], lv["x"]))

    err = ad.finite_diff_direction(build, {"x": np.array([0.3, -1.2, 2.0])})
    assert err < 1e-8


def test_finite_diff_direction_catches_wrong_gradient():
    def bad_square(x):
        def vjp(g, needs):
            return (2.2 * x.val * g,)
        return x.tape.apply(x.val * x.val, (x,), vjp, "bad_square")

    def build(t, lv):
        return ad.sum_all(bad_square(lv["x"]))

    err = ad.finite_diff_direction(build, {"x": np.array([0.7, -0.4]),
                                           "y": np.array([1.0])})
    assert err > 1e-2


@pytest.mark.parametrize("fn", ["sigmoid", "tanh", "relu"])
def test_pointwise_gradients(fn):
    rng = np.random.default_rng(1)
    x = rng.standard_normal(32)
    x = np.where(np.abs(x) < 0.05, 0.3, x)  # keep relu away from its kink

    def build(t, lv):
        return ad.sum_all(ad.mul(ad.pointwise(lv["x"], fn), lv["x"]))

    assert ad.finite_diff_check(build, {"x": x}) < 1e-6


def test_structural_op_gradients():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((1, 3, 4, 4))
    b = rng.standard_normal((1, 2, 4, 4))
    g = rng.standard_normal((1, 2, 4, 4))

    def build(t, lv):
        cat = ad.concat_channels([lv["a"], lv["b"]])
        mid = ad.slice_channels(cat, 1, 3)
        sm = ad.softmax_channel(ad.concat_channels([mid, lv["b"]]))
        picked = ad.slice_channels(sm, 2, 4)
        return ad.sum_all(ad.mul(picked, t.const(g)))

    assert ad.finite_diff_check(build, {"a": a, "b": b}) < 1e-6


def test_conv_avgpool_gradients():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 6, 6))
    w = rng.standard_normal((3, 2, 3, 3)) * 0.5
    b = rng.standard_normal(3) * 0.1
    g = rng.standard_normal((3, 3, 3))

    def build(t, lv):
        y = ad.conv2d(lv["x"], lv["w"], lv["b"], stride=1, pad=1)
        p = ad.avg_pool2d(y, 2)
        return ad.sum_all(ad.mul(p, t.const(g)))

    assert ad.finite_diff_check(build, {"x": x, "w": w, "b": b}) < 1e-6


class TestStandardize:
    def test_moments(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2, 3, 5, 7)) * 4.0 + 9.0
        tape = ad.Tape()
        y = ad.standardize(tape.const(x)).val
        assert y.shape == x.shape
        np.testing.assert_allclose(y.mean(axis=(-2, -1)), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=(-2, -1)), 1.0, atol=1e-4)

    def test_offset_and_scale_invariance(self):
        # the op's whole purpose: per-channel affine changes wash out
        rng = np.random.default_rng(6)
        x = rng.standard_normal((3, 6, 6))
        shifted = x * 3.0 + np.array([5.0, -2.0, 0.5])[:, None, None]
        tape = ad.Tape()
        a = ad.standardize(tape.const(x)).val
        b = ad.standardize(tape.const(shifted)).val
        np.testing.assert_allclose(a, b, atol=1e-5)

    def test_constant_channel_maps_to_zero(self):
        tape = ad.Tape()
        y = ad.standardize(tape.const(np.full((1, 4, 4), 3.25))).val
        assert np.abs(y).max() == 0.0

    def test_gradients(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((2, 5, 5)) * 2.0 + 1.0
        g = rng.standard_normal((2, 5, 5))

        def build(t, lv):
            return ad.sum_all(ad.mul(ad.standardize(lv["x"]), t.const(g)))

        assert ad.finite_diff_check(build, {"x": x}) < 1e-6


def test_mul_rejects_broadcast():
    t = ad.Tape()
    a = t.leaf(np.zeros((3, 3)), name="a")
    b = t.leaf(np.zeros((1, 3, 3)), name="b")
    with pytest.raises(ValueError, match="shape"):
        ad.mul(a, b)


def test_l1_mean_gradient_and_value():
    rng = np.random.default_rng(6)
    p = rng.standard_normal((2, 5))
    q = rng.standard_normal((2, 5))
    t = ad.Tape()
    pv = t.leaf(p, name="p")
    loss = ad.l1_mean(pv, t.const(q))
    assert np.isclose(loss.val, np.abs(p - q).mean())
    g = t.backward(loss)
    np.testing.assert_allclose(g["p"], np.sign(p - q) / p.size, atol=1e-15)


# ---------------------------------------------------------------------------
# schedule / optimizer

def test_one_cycle_shape():
    sch = ad.OneCycle(1e-3, 100)
    rates = [sch.rate(s) for s in range(100)]
    assert all(r > 0 for r in rates)
    assert max(rates) == pytest.approx(1e-3)
    assert rates[4] == pytest.approx(1e-3)          # warmup tops out at 5% of steps
    assert rates[-1] == pytest.approx(1e-3 / 25)    # decays back to max/25
    assert all(b >= a for a, b in zip(rates[:5], rates[1:5]))
    assert all(b <= a for a, b in zip(rates[4:], rates[5:]))
    with pytest.raises(ValueError):
        sch.rate(100)


def test_one_cycle_single_step():
    sch = ad.OneCycle(2e-4, 1)
    assert sch.rate(0) == pytest.approx(2e-4)


def test_adamw_matches_reference_recurrence():
    rng = np.random.default_rng(8)
    p0 = rng.standard_normal(6).astype(np.float32)
    grads = [rng.standard_normal(6).astype(np.float32) for _ in range(5)]
    sch = ad.OneCycle(1e-2, 5)
    params = {"w": p0.copy()}
    opt = ad.AdamW(params, sch, weight_decay=0.01)
    for g in grads:
        opt.step({"w": g})
    want = adamw_ref(p0, grads, [sch.rate(t) for t in range(5)], wd=0.01)
    np.testing.assert_allclose(params["w"], want, rtol=1e-5)


def test_adamw_decay_is_decoupled():
    # zero gradient: the only movement is -lr*wd*p, no moment contamination
    params = {"w": np.array([2.0], dtype=np.float32)}
    sch = ad.OneCycle(1e-2, 1)
    opt = ad.AdamW(params, sch, weight_decay=0.1)
    opt.step({"w": np.zeros(1, dtype=np.float32)})
    want = 2.0 - sch.rate(0) * 0.1 * 2.0
    np.testing.assert_allclose(params["w"], [want], rtol=1e-6)


def test_adamw_rejects_shape_mismatch():
    params = {"w": np.zeros(3, dtype=np.float32)}
    opt = ad.AdamW(params, ad.OneCycle(1e-3, 2))
    with pytest.raises(ValueError, match="w"):
        opt.step({"w": np.zeros(4, dtype=np.float32)})


def test_clip_grad_norm_global():
    g = {"a": np.array([3.0], dtype=np.float32), "b": np.array([4.0], dtype=np.float32)}
    norm = ad.clip_grad_norm(g, 1.0)
    assert norm == pytest.approx(5.0)
    np.testing.assert_allclose(g["a"], [0.6], rtol=1e-6)
    np.testing.assert_allclose(g["b"], [0.8], rtol=1e-6)
    g2 = {"a": np.array([0.3], dtype=np.float32)}
    norm2 = ad.clip_grad_norm(g2, 1.0)
    assert norm2 == pytest.approx(0.3)
    np.testing.assert_array_equal(g2["a"], np.array([0.3], dtype=np.float32))


# ---------------------------------------------------------------------------
# checkpoint container

def test_checkpoint_round_trip_bitwise(tmp_path):
    rng = np.random.default_rng(10)
    params = {
        "alpha": np.array([1.0], dtype=np.float32),
        "enc.w0": rng.standard_normal((4, 3, 7, 7)).astype(np.float32),
        "enc.b0": rng.standard_normal(4).astype(np.float32),
    }
    path = tmp_path / "m.ckpt"
    ad.save_checkpoint(path, params)
    back = ad.load_checkpoint(path)
    assert sorted(back) == sorted(params)
    for k in params:
        assert back[k].dtype == np.float32
        assert back[k].shape == params[k].shape
        assert back[k].tobytes() == params[k].tobytes()


def test_checkpoint_byte_layout(tmp_path):
    # one param "a" of shape (2,): magic, u32 name len, name, u32 rank,
    # u32 extent, two little-endian f32 payload values
    path = tmp_path / "one.ckpt"
    ad.save_checkpoint(path, {"a": np.array([1.5, -2.0], dtype=np.float32)})
    blob = path.read_bytes()
    want = (ad.CKPT_MAGIC + struct.pack("<I", 1) + b"a" + struct.pack("<I", 1)
            + struct.pack("<I", 2) + struct.pack("<2f", 1.5, -2.0))
    assert blob == want


def test_checkpoint_sorted_name_order(tmp_path):
    path = tmp_path / "two.ckpt"
    ad.save_checkpoint(path, {"zz": np.zeros(1, np.float32), "aa": np.ones(1, np.float32)})
    blob = path.read_bytes()
    assert blob.find(b"aa") < blob.find(b"zz")


def test_checkpoint_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTACKPT00" + b"\x00" * 16)
    with pytest.raises(ValueError, match="magic"):
        ad.load_checkpoint(path)


def test_checkpoint_truncation_rejected(tmp_path):
    path = tmp_path / "t.ckpt"
    ad.save_checkpoint(path, {"w": np.arange(8, dtype=np.float32)})
    blob = path.read_bytes()
    path.write_bytes(blob[:-5])
    with pytest.raises(ValueError):
        ad.load_checkpoint(path)
