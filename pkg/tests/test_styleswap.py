import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fplive.styleswap import EPS, batch_style_swap, compute_stats, style_swap
from fplive.tensor import RngStream


def _with_stats(rng, mu, sigma, shape=(16, 16)):
    z = rng.normal(size=shape)
    z = (z - z.mean()) / z.std()
    return z * sigma + mu


def test_constant_image_stats():
    s = compute_stats(np.full((4, 4), 0.3))
    np.testing.assert_allclose(s.mean, [0.3])
    np.testing.assert_array_equal(s.std, [EPS])


def test_two_pixel_channel_uses_population_std():
    s = compute_stats(np.array([[0.0, 1.0]]))
    assert s.mean[0] == 0.5 and s.std[0] == 0.5


def test_stats_ignore_pixel_order(rng):
    x = rng.normal(size=(3, 5, 5))
    perm = rng.permutation(25)
    y = x.reshape(3, 25)[:, perm].reshape(3, 5, 5)
    a, b = compute_stats(x), compute_stats(y)
    np.testing.assert_allclose(a.mean, b.mean, rtol=1e-12)
    np.testing.assert_allclose(a.std, b.std, rtol=1e-12)


def test_stats_reject_tiny_images():
    with pytest.raises(ValueError):
        compute_stats(np.zeros((1, 1)))


def test_swap_fixed_point(rng):
    a = rng.uniform(size=(8, 8))
    a2, b2 = style_swap(a, a.copy())
    np.testing.assert_allclose(a2, a, atol=1e-6)
    np.testing.assert_allclose(b2, a, atol=1e-6)


def test_swap_forced_moments(rng):
    a, b = _with_stats(rng, 0.2, 0.1), _with_stats(rng, 0.7, 0.3)
    a2, b2 = style_swap(a, b)
    sa, sb = compute_stats(a2), compute_stats(b2)
    np.testing.assert_allclose([sa.mean[0], sa.std[0]], [0.7, 0.3], atol=1e-9)
    np.testing.assert_allclose([sb.mean[0], sb.std[0]], [0.2, 0.1], atol=1e-9)


@given(st.integers(0, 2**31 - 1), st.integers(1, 3))
def test_moment_transfer_and_involution(seed, channels):
    r = np.random.default_rng(seed)
    a = (r.normal(size=(channels, 12, 12)) * r.uniform(0.05, 2, (channels, 1, 1)) + r.normal(size=(channels, 1, 1))).astype(np.float32)
    b = (r.normal(size=(channels, 12, 12)) * r.uniform(0.05, 2, (channels, 1, 1)) + r.normal(size=(channels, 1, 1))).astype(np.float32)
    a2, b2 = style_swap(a, b)
    for got, want in ((compute_stats(a2), compute_stats(b)), (compute_stats(b2), compute_stats(a))):
        np.testing.assert_allclose(got.mean, want.mean, atol=1e-5)
        np.testing.assert_allclose(got.std, want.std, atol=1e-5)
    a3, b3 = style_swap(a2, b2)
    np.testing.assert_allclose(a3, a, atol=1e-5)
    np.testing.assert_allclose(b3, b, atol=1e-5)


def test_swap_shape_mismatch():
    with pytest.raises(ValueError):
        style_swap(np.zeros((4, 4)), np.zeros((4, 5)))


def test_output_is_not_clamped(rng):
    a, b = _with_stats(rng, 0.5, 0.1), _with_stats(rng, 0.9, 0.4)
    a2, _ = style_swap(a, b)
    assert a2.max() > 1.0


# -------------------------------------------------------------------- batch


def test_no_partner_across_labels(rng):
    batch = rng.uniform(size=(2, 8, 8))
    out, pairs = batch_style_swap(batch, np.array([1, 0]), 1.0, RngStream(0))
    assert pairs == []
    np.testing.assert_array_equal(out, batch)


def test_zero_probability_keeps_batch(rng):
    batch = rng.uniform(size=(6, 8, 8))
    out, pairs = batch_style_swap(batch, np.zeros(6), 0.0, RngStream(0))
    assert pairs == []
    np.testing.assert_array_equal(out, batch)


def test_pairing_audit_never_crosses_labels(rng):
    batch = rng.uniform(size=(16, 1, 8, 8)).astype(np.float32)
    labels = np.array([0, 1] * 8)
    swaps = crossed = 0
    for seed in range(1000):
        out, pairs = batch_style_swap(batch, labels, 0.5, RngStream(seed, 2))
        swaps += len(pairs)
        crossed += sum(labels[i] != labels[j] for i, j in pairs)
        touched = {k for p in pairs for k in p}
        assert len(touched) == 2 * len(pairs)
        for k in set(range(16)) - touched:
            np.testing.assert_array_equal(out[k], batch[k])
    assert crossed == 0 and swaps > 1000


def test_batch_swap_applies_pairwise_moments(rng):
    batch = rng.normal(size=(4, 1, 6, 6)) * rng.uniform(0.2, 2, (4, 1, 1, 1))
    out, pairs = batch_style_swap(batch, np.ones(4), 1.0, RngStream(7))
    assert len(pairs) == 2
    for i, j in pairs:
        np.testing.assert_allclose(compute_stats(out[i]).std, compute_stats(batch[j]).std, rtol=1e-9)


def test_empty_batch():
    with pytest.raises(ValueError):
        batch_style_swap(np.zeros((0, 4, 4)), np.zeros(0), 0.5, RngStream(0))
