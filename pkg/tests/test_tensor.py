import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgekit import tensor as T
from edgekit.errors import ConfigError, NumericError, ShapeError, UsageError
from edgekit.gradcheck import check_op
from edgekit.tensor import Tensor

rng = np.random.default_rng(1234)


def test_matmul_identity():
    eye = Tensor(np.eye(2))
    out = T.matmul(eye, eye)
    assert np.array_equal(out.data, np.eye(2))


def test_matmul_hand_case():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[1.0], [1.0]])
    assert np.array_equal((a @ b).data, [[3.0], [7.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(3, 4\).*\(3, 2\)"):
        T.matmul(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 2))))


def test_matmul_gradcheck_vs_finite_differences():
    r = check_op(lambda a, b: T.matmul(a, b),
                 [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))], rng)
    assert r.max_rel_err < 1e-6


def test_softmax_uniform_row():
    out = T.softmax(Tensor(np.zeros((1, 4))))
    assert np.allclose(out.data, 0.25, atol=1e-15)


def test_softmax_large_values_no_overflow():
    out = T.softmax(Tensor([[1000.0, 0.0]]))
    assert np.isfinite(out.data).all()
    assert np.allclose(out.data, [[1.0, 0.0]])


def test_softmax_rows_sum_to_one():
    out = T.softmax(Tensor(rng.normal(size=(5, 5))))
    assert np.abs(out.data.sum(axis=-1) - 1.0).max() < 1e-12


def test_softmax_nan_rejected():
    bad = np.zeros((2, 2))
    bad[0, 0] = np.nan
    with pytest.raises(NumericError):
        T.softmax(Tensor(bad))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8),
       st.floats(-100, 100))
def test_softmax_shift_invariance(row, shift):
    x = np.array([row])
    a = T.softmax(Tensor(x)).data
    b = T.softmax(Tensor(x + shift)).data
    assert np.abs(a.sum(axis=-1) - 1.0).max() < 1e-12
    assert np.abs(a - b).max() < 1e-12


def test_conv2d_identity_kernel():
    x = rng.normal(size=(1, 1, 5, 5))
    w = np.ones((1, 1, 1, 1))
    out = T.conv2d(Tensor(x), Tensor(w))
    assert np.array_equal(out.data, x)


def test_conv2d_one_hot_box():
    x = np.zeros((1, 1, 5, 5))
    x[0, 0, 2, 2] = 1.0
    w = np.ones((1, 1, 3, 3))
    out = T.conv2d(Tensor(x), Tensor(w), padding=1).data[0, 0]
    expect = np.zeros((5, 5))
    expect[1:4, 1:4] = 1.0
    assert np.array_equal(out, expect)


def test_conv2d_output_extent_formula():
    out = T.conv2d(Tensor(np.zeros((1, 1, 10, 7))), Tensor(np.zeros((1, 1, 3, 3))),
                   stride=2, padding=1)
    assert out.shape == (1, 1, (10 + 2 - 3) // 2 + 1, (7 + 2 - 3) // 2 + 1)


def test_conv2d_kernel_too_large():
    with pytest.raises(ShapeError, match="larger than padded input"):
        T.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))


def test_conv2d_gradcheck():
    r = check_op(lambda x, w, b: T.conv2d(x, w, b, stride=1, padding=1),
                 [rng.normal(size=(1, 2, 6, 6)), rng.normal(size=(3, 2, 3, 3)),
                  rng.normal(size=3)], rng)
    assert r.max_rel_err < 1e-5


def test_deconv2d_extent():
    out = T.deconv2d(Tensor(np.zeros((1, 2, 6, 4))), Tensor(np.zeros((2, 2, 4, 4))),
                     stride=2)
    assert out.shape == (1, 2, 2 * 6 + 2, 2 * 4 + 2)


def test_deconv2d_matches_conv_input_gradient():
    x = Tensor(rng.normal(size=(1, 2, 5, 5)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 2, 3, 3)))
    y = rng.normal(size=(1, 3, 2, 2))
    with T.fresh_tape():
        out = T.conv2d(x, w, stride=2)
        T.backward(T.tensor_sum(T.mul(out, y)))
    via_deconv = T.deconv2d(Tensor(y), w, stride=2).data
    assert np.allclose(x.grad, via_deconv, atol=1e-12)


def test_deconv2d_adjoint_inner_product():
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    y = rng.normal(size=(1, 3, 2, 2))
    lhs = (T.conv2d(Tensor(x), Tensor(w), stride=2).data * y).sum()
    rhs = (x * T.deconv2d(Tensor(y), Tensor(w), stride=2).data).sum()
    assert abs(lhs - rhs) < 1e-9


def test_deconv2d_bad_stride():
    with pytest.raises(ConfigError):
        T.deconv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 2, 2))),
                   stride=0)


def test_deconv2d_gradcheck():
    r = check_op(lambda x, w: T.deconv2d(x, w, stride=2),
                 [rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(2, 3, 4, 4))],
                 rng)
    assert r.max_rel_err < 1e-5


def test_layer_norm_constant_row_maps_to_bias():
    x = np.full((2, 6), 3.7)
    bias = rng.normal(size=6)
    out = T.layer_norm(Tensor(x), Tensor(np.ones(6)), Tensor(bias))
    assert np.allclose(out.data, np.broadcast_to(bias, (2, 6)), atol=1e-9)


def test_layer_norm_two_point_row():
    out = T.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
    assert np.allclose(out.data, [[1.0, -1.0]], atol=1e-5)


def test_layer_norm_needs_two_features():
    with pytest.raises(ShapeError):
        T.layer_norm(Tensor(np.zeros((3, 1))), Tensor(np.ones(1)), Tensor(np.zeros(1)))


def test_layer_norm_gradcheck():
    r = check_op(lambda x, g, b: T.layer_norm(x, g, b),
                 [rng.normal(size=(4, 6)), rng.normal(size=6), rng.normal(size=6)],
                 rng)
    assert r.max_rel_err < 1e-5


def test_batch_norm_eval_fresh_state_is_affine_identity():
    x = rng.normal(size=(2, 3, 4, 4))
    gain = rng.normal(size=3)
    bias = rng.normal(size=3)
    out = T.batch_norm(Tensor(x), Tensor(gain), Tensor(bias),
                       np.zeros(3), np.ones(3), training=False)
    expect = x * gain[None, :, None, None] / np.sqrt(1 + 1e-5) + bias[None, :, None, None]
    assert np.allclose(out.data, expect, atol=1e-12)


def test_batch_norm_training_normalizes():
    x = rng.normal(loc=3.0, scale=2.5, size=(4, 3, 8, 8))
    out = T.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)),
                       np.zeros(3), np.ones(3), training=True)
    mean = out.data.mean(axis=(0, 2, 3))
    var = out.data.var(axis=(0, 2, 3))
    assert np.abs(mean).max() < 1e-6
    assert np.abs(var - 1.0).max() < 1e-3


def test_batch_norm_updates_running_moments():
    x = rng.normal(loc=2.0, size=(2, 1, 4, 4))
    rm, rv = np.zeros(1), np.ones(1)
    T.batch_norm(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)),
                 rm, rv, training=True)
    assert abs(rm[0] - 0.1 * x.mean()) < 1e-12
    n = x.size
    assert abs(rv[0] - (0.9 + 0.1 * x.var() * n / (n - 1))) < 1e-12


def test_batch_norm_needs_two_samples():
    with pytest.raises(ShapeError):
        T.batch_norm(Tensor(np.zeros((1, 2, 1, 1))), Tensor(np.ones(2)),
                     Tensor(np.zeros(2)), np.zeros(2), np.ones(2), training=True)


def test_batch_norm_gradcheck_training():
    r = check_op(lambda x, g, b: T.batch_norm(x, g, b, np.zeros(3), np.ones(3),
                                              training=True),
                 [rng.normal(size=(2, 3, 4, 4)), rng.normal(size=3),
                  rng.normal(size=3)], rng)
    assert r.max_rel_err < 1e-4


def test_backward_sum_gives_ones():
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    with T.fresh_tape():
        T.backward(T.tensor_sum(x))
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_backward_quadratic():
    x = Tensor(rng.normal(size=(5,)), requires_grad=True)
    with T.fresh_tape():
        T.backward(T.tensor_sum(T.mul(x, x)))
    assert np.allclose(x.grad, 2 * x.data, atol=1e-12)


def test_backward_rejects_non_scalar():
    x = Tensor(np.zeros((2, 2)), requires_grad=True)
    with T.fresh_tape():
        y = T.mul(x, 2.0)
        with pytest.raises(UsageError):
            T.backward(y)


def test_backward_accumulates_on_repeat():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.fresh_tape():
        loss = T.tensor_sum(x)
        T.backward(loss)
        T.backward(loss)
    assert np.array_equal(x.grad, 2 * np.ones(3))


def test_intermediate_tensors_receive_grads():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.fresh_tape():
        mid = T.mul(x, 3.0)
        T.backward(T.tensor_sum(mid))
    assert np.array_equal(mid.grad, np.ones(3))
    assert np.array_equal(x.grad, 3 * np.ones(3))


def test_no_grad_suppresses_recording():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.fresh_tape() as tape:
        with T.no_grad():
            y = T.mul(x, 2.0)
        assert len(tape) == 0
        assert not y.requires_grad


def test_determinism_bit_identical():
    def run():
        r = np.random.default_rng(99)
        a = Tensor(r.normal(size=(8, 8)))
        return T.softmax(T.matmul(a, a)).data.copy()

    assert np.array_equal(run(), run())


def test_clip_gradient_zero_outside():
    x = Tensor(np.array([-1.0, 0.0, 1.0]), requires_grad=True)
    with T.fresh_tape():
        T.backward(T.tensor_sum(T.clip(x, -0.5, 0.5)))
    assert np.array_equal(x.grad, [0.0, 1.0, 0.0])


def test_concat_and_crop_round_trip():
    a = rng.normal(size=(1, 2, 3, 3))
    b = rng.normal(size=(1, 2, 3, 3))
    cat = T.concat([Tensor(a), Tensor(b)], axis=1)
    assert cat.shape == (1, 4, 3, 3)
    crop = T.crop2d(Tensor(a), 1, 1, 2, 2)
    assert np.array_equal(crop.data, a[:, :, 1:3, 1:3])


def test_bilinear_resize_constant_preserved():
    x = np.full((1, 1, 4, 4), 2.5)
    out = T.bilinear_resize(Tensor(x), (9, 7))
    assert np.allclose(out.data, 2.5, atol=1e-12)
