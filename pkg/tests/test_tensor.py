import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import signal

from fplive import tensor as T
from fplive.tensor import SGD, NumericalError, RngStream, ShapeError, Tensor, cosine_lr, sgd_step

from gradcheck import CASES, REL_TOL, run_case


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradient_matches_central_differences(name):
    worst, _ = run_case(name, instances=20)
    assert worst < REL_TOL


# ------------------------------------------------------------- elementwise


def test_relu_sigmoid_add_examples():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    assert T.sigmoid(Tensor([0.0])).data[0] == 0.5
    np.testing.assert_array_equal(T.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4, 6])


def test_storage_is_float32_and_float64_is_kept():
    assert Tensor([1, 2]).dtype == np.float32
    assert T.mul(Tensor(np.ones(2)), Tensor(np.ones(2))).dtype == np.float64


def test_no_broadcasting_beyond_scalars():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((1, 3))))
    np.testing.assert_array_equal(T.mul(Tensor(np.ones((2, 2))), 3.0).data, np.full((2, 2), 3.0))


def test_log_and_div_reject_undefined_inputs():
    with pytest.raises(ValueError):
        T.log(Tensor([0.0, 1.0]))
    with pytest.raises(ZeroDivisionError):
        T.div(Tensor([1.0]), Tensor([0.0]))


def test_non_finite_results_raise():
    with pytest.raises(NumericalError):
        T.exp(Tensor([1000.0]))


# ------------------------------------------------------------------ matmul


def test_matmul_examples():
    eye = Tensor([[1.0, 0.0], [0.0, 1.0]])
    b = Tensor([[5.0, 6.0], [7.0, 8.0]])
    np.testing.assert_array_equal(T.matmul(eye, b).data, b.data)
    np.testing.assert_array_equal(T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]])).data, [[3], [7]])
    np.testing.assert_array_equal(T.matmul(b, Tensor(np.zeros((2, 3)))).data, np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5))
def test_matmul_shape_algebra(m, k, n):
    assert T.matmul(Tensor(np.ones((m, k))), Tensor(np.ones((k, n)))).shape == (m, n)


# -------------------------------------------------------------------- conv


def _loop_conv(x, w, stride, padding):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding : padding + h, padding : padding + wd] = x
    ho, wo = (h + 2 * padding - kh) // stride + 1, (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for b in range(n):
        for o in range(f):
            for i in range(ho):
                for j in range(wo):
                    win = xp[b, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[b, o, i, j] = (win * w[o]).sum()
    return out


def test_conv_identity_and_counting_examples():
    x = np.random.default_rng(0).normal(size=(1, 1, 5, 5)).astype(np.float32)
    np.testing.assert_array_equal(T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1)))).data, x)
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    np.testing.assert_array_equal(out.data, [[[[9.0]]]])


def test_conv_stride2_matches_sliding_window_oracle(rng):
    x, w = rng.normal(size=(1, 1, 4, 4)), rng.normal(size=(1, 1, 2, 2))
    np.testing.assert_allclose(T.conv2d(Tensor(x), Tensor(w), stride=2).data, _loop_conv(x, w, 2, 0), atol=1e-12)


def test_conv_matches_scipy_correlate(rng):
    x, w = rng.normal(size=(1, 1, 7, 6)), rng.normal(size=(1, 1, 3, 3))
    ref = signal.correlate2d(x[0, 0], w[0, 0], mode="same")
    np.testing.assert_allclose(T.conv2d(Tensor(x), Tensor(w), padding=1).data[0, 0], ref, atol=1e-12)


@given(
    st.integers(1, 2), st.integers(1, 3), st.integers(1, 3), st.integers(3, 7), st.integers(3, 7),
    st.integers(1, 3), st.integers(1, 2), st.integers(0, 2), st.integers(0, 10**6),
)
def test_conv_fast_path_agrees_with_reference(n, c, f, h, w, k, stride, pad, seed):
    if k > h + 2 * pad or k > w + 2 * pad:
        return
    r = np.random.default_rng(seed)
    x = r.normal(size=(n, c, h, w)).astype(np.float32)
    wt = r.normal(size=(f, c, k, k)).astype(np.float32)
    fast = T.conv2d(Tensor(x), Tensor(wt), stride, pad).data
    ref = T.conv2d_reference(x, wt, stride, pad)
    assert fast.shape == (n, f, T.conv_output_size(h, k, stride, pad), T.conv_output_size(w, k, stride, pad))
    assert fast.shape[2] == (h + 2 * pad - k) // stride + 1
    np.testing.assert_allclose(fast, ref, atol=1e-5)
    np.testing.assert_allclose(ref, _loop_conv(x.astype(np.float64), wt.astype(np.float64), stride, pad), atol=1e-4)


def test_conv_rejects_invalid_geometry():
    x, w = Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2)))
    with pytest.raises(ValueError):
        T.conv2d(x, w, stride=0)
    with pytest.raises(ValueError):
        T.conv2d(x, w, padding=-1)
    with pytest.raises(ValueError):
        T.conv2d(x, Tensor(np.zeros((1, 1, 5, 5))))


# ----------------------------------------------------------------- pooling


def test_pool_examples():
    np.testing.assert_allclose(T.global_avg_pool(Tensor(np.full((2, 3, 4, 4), 0.7))).data, np.full((2, 3), 0.7), rtol=1e-6)
    assert T.pool2d(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]), "max", 2).data.item() == 4.0
    with pytest.raises(ShapeError):
        T.pool2d(Tensor(np.zeros((1, 1, 2, 2))), "max", 3)
    with pytest.raises(ValueError):
        T.pool2d(Tensor(np.zeros((1, 1, 2, 2))), "median", 2)


def test_avg_pool_gradient_sums_to_upstream(rng):
    x = Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
    up = rng.normal(size=(1, 2, 2, 2))
    T.sum(T.mul(T.pool2d(x, "avg", 2), Tensor(up))).backward()
    assert math.isclose(x.grad.sum(), up.sum(), rel_tol=1e-12)


def test_max_pool_routes_gradient_to_first_maximum():
    x = Tensor(np.array([[[[1.0, 1.0], [0.0, 1.0]]]]), requires_grad=True)
    T.sum(T.pool2d(x, "max", 2)).backward()
    np.testing.assert_array_equal(x.grad, [[[[1.0, 0.0], [0.0, 0.0]]]])


# ---------------------------------------------------------------- backward


def test_backward_examples():
    x = Tensor([3.0], requires_grad=True, dtype=np.float64)
    unused = Tensor([1.0, 2.0], requires_grad=True)
    T.sum(T.mul(x, x)).backward()
    assert x.grad[0] == 6.0
    assert unused.grad is None or not unused.grad.any()


def test_fan_out_accumulates():
    x = Tensor([2.0], requires_grad=True, dtype=np.float64)
    T.sum(T.add(T.mul(x, x), x)).backward()
    assert x.grad[0] == 5.0


def test_backward_needs_scalar():
    with pytest.raises(ShapeError):
        T.mul(Tensor([1.0, 2.0], requires_grad=True), 2.0).backward()


# --------------------------------------------------------------------- sgd


def test_sgd_zero_lr_leaves_params():
    p = Tensor([1.0, -2.0], requires_grad=True)
    p.grad = np.array([5.0, 5.0], np.float32)
    sgd_step([p], lr=0.0, momentum=0.9, weight_decay=0.0)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert p.grad is None


def test_sgd_plain_step():
    p = Tensor([1.0, -2.0], requires_grad=True, dtype=np.float64)
    p.grad = np.array([0.5, 1.0])
    sgd_step([p], lr=0.1)
    np.testing.assert_allclose(p.data, [0.95, -2.1])


def test_sgd_on_square_follows_closed_form():
    x = Tensor([1.0], requires_grad=True, dtype=np.float64)
    opt = SGD([x], lr=0.1, momentum=0.0)
    for _ in range(10):
        T.sum(T.square(x)).backward()
        opt.step()
    assert math.isclose(x.data[0], 0.8**10, rel_tol=1e-12)
    assert math.isclose(x.data[0], 0.1074, abs_tol=1e-4)


def test_sgd_momentum_and_weight_decay_recurrence():
    x = Tensor([1.0], requires_grad=True, dtype=np.float64)
    opt = SGD([x], lr=0.1, momentum=0.9, weight_decay=0.01)
    v, ref = 0.0, 1.0
    for _ in range(5):
        T.sum(T.square(x)).backward()
        opt.step()
        v = 0.9 * v + 2 * ref + 0.01 * ref
        ref = ref - 0.1 * v
    assert math.isclose(x.data[0], ref, rel_tol=1e-12)


def test_cosine_schedule_endpoints():
    assert cosine_lr(0.05, 0, 100) == 0.05
    assert math.isclose(cosine_lr(0.05, 50, 100), 0.025)
    assert abs(cosine_lr(0.05, 100, 100)) < 1e-15


# --------------------------------------------------------------------- rng


def test_rng_is_a_pure_function_of_seed_stream_counter():
    a = RngStream(5, 3).normal(size=8)
    b = RngStream(5, 3)
    other = RngStream(5, 4)
    other.normal(size=100)  # interleaved use of another stream
    np.testing.assert_array_equal(a, b.normal(size=8))
    assert not np.array_equal(a, RngStream(5, 4).normal(size=8))


def test_rng_counter_resumes_sequence():
    full = RngStream(9, 1).random(12)
    # one counter step is one Philox block of four doubles
    np.testing.assert_array_equal(RngStream(9, 1, counter=2).random(4), full[8:])


def test_rng_child_streams_differ():
    base = RngStream(1, 0)
    assert not np.array_equal(base.child(1).random(4), base.child(2).random(4))
    np.testing.assert_array_equal(base.child(1).random(4), RngStream(1, 0).child(1).random(4))


@given(st.lists(st.integers(1, 4), min_size=1, max_size=3))
def test_reshape_flatten_shape_algebra(shape):
    x = Tensor(np.zeros(shape))
    assert T.flatten(Tensor(np.zeros([2] + shape))).shape == (2, int(np.prod(shape)))
    assert T.reshape(x, (int(np.prod(shape)),)).shape == (int(np.prod(shape)),)
    assert T.sum(x).shape == ()
