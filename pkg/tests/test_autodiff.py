"""Autodiff engine: forward values, backward rules, finite differences."""

import numpy as np
import pytest

from owdet import autodiff as ad
from owdet.autodiff import Tensor


@pytest.fixture(autouse=True)
def fresh_tape():
    ad.reset_tape()
    yield
    ad.reset_tape()


def test_forward_values_match_numpy():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    assert np.allclose(ad.add(Tensor(a), Tensor(b)).values, a + b)
    assert np.allclose(ad.mul(Tensor(a), Tensor(b)).values, a * b)
    assert np.allclose(ad.sub(Tensor(a), Tensor(b)).values, a - b)


def test_sigmoid_at_zero():
    out = ad.sigmoid(Tensor(np.zeros(3)))
    assert np.allclose(out.values, 0.5)


def test_softmax_uniform_on_equal_logits():
    out = ad.softmax_lastdim(Tensor(np.zeros((2, 2))))
    assert np.allclose(out.values, 0.5)
    big = ad.softmax_lastdim(Tensor(np.array([1000.0, 1000.0])))
    assert np.allclose(big.values, 0.5)  # stability under large logits


def test_matmul_against_triple_loop():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(3, 5))
    b = rng.normal(size=(5, 2))
    out = ad.matmul(Tensor(a), Tensor(b)).values
    ref = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(5):
                ref[i, j] += a[i, k] * b[k, j]
    assert np.allclose(out, ref)


def test_grad_of_sum_is_ones():
    x = Tensor(np.arange(6, dtype=float).reshape(2, 3), requires_grad=True)
    ad.backward(ad.tsum(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_grad_of_sum_of_squares():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    ad.backward(ad.tsum(ad.mul(x, x)))
    assert np.allclose(x.grad, [2.0, 4.0, 6.0])


def test_leaf_used_twice_accumulates():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = ad.add(ad.mul(x, x), x)  # y = x^2 + x, dy/dx = 2x + 1 = 7
    ad.backward(ad.tsum(y))
    assert np.allclose(x.grad, [7.0])


def test_backward_accumulates_across_calls():
    x = Tensor(np.array([2.0]), requires_grad=True)
    loss = ad.tsum(ad.mul(x, x))
    ad.backward(loss)
    ad.backward(loss)
    assert np.allclose(x.grad, [8.0])  # two passes of 2x = 4


def test_div_by_near_zero_is_clamped():
    num = Tensor(np.array([1.0]), requires_grad=True)
    den = Tensor(np.array([0.0]))
    out = ad.div(num, den)
    assert np.isfinite(out.values).all()
    ad.backward(ad.tsum(out))
    assert np.isfinite(num.grad).all()


def test_log_of_zero_is_clamped():
    x = Tensor(np.array([0.0]), requires_grad=True)
    out = ad.log(x)
    assert np.isfinite(out.values).all()
    ad.backward(ad.tsum(out))
    assert np.isfinite(x.grad).all()


def test_gather_rows_backward_scatters_with_accumulation():
    x = Tensor(np.arange(8, dtype=float).reshape(4, 2), requires_grad=True)
    picked = ad.gather_rows(x, [1, 1, 3])
    ad.backward(ad.tsum(picked))
    expect = np.zeros((4, 2))
    expect[1] = 2.0
    expect[3] = 1.0
    assert np.array_equal(x.grad, expect)


def test_take_flat_roundtrip_gradient():
    x = Tensor(np.arange(6, dtype=float).reshape(2, 3), requires_grad=True)
    perm = [5, 4, 3, 2, 1, 0]
    out = ad.take_flat(x, perm, (2, 3))
    assert np.array_equal(out.values.reshape(-1), np.arange(6, dtype=float)[::-1])
    ad.backward(ad.tsum(ad.mul(out, out)))
    assert np.allclose(x.grad, 2.0 * x.values)


def test_concat_rows_splits_gradient():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    b = Tensor(np.array([[3.0, 4.0], [5.0, 6.0]]), requires_grad=True)
    out = ad.concat_rows([a, b])
    assert out.values.shape == (3, 2)
    ad.backward(ad.tsum(ad.mul(out, out)))
    assert np.allclose(a.grad, 2.0 * a.values)
    assert np.allclose(b.grad, 2.0 * b.values)


def test_shape_mismatch_raises():
    with pytest.raises(ad.ShapeError):
        ad.add(Tensor(np.zeros(2)), Tensor(np.zeros(3)))
    with pytest.raises(ad.ShapeError):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_backward_requires_scalar_root():
    x = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(ad.ShapeError):
        ad.backward(ad.mul(x, x))


def _composite(x):
    """Exercises most primitives in one graph."""
    s = ad.sigmoid(x)
    p = ad.softmax_lastdim(x)
    mixed = ad.add(ad.mul(s, p), ad.exp(ad.scale(x, 0.1)))
    mixed = ad.add(mixed, ad.log(ad.add(ad.square(x), 1.0)))
    mixed = ad.add(mixed, ad.absolute(ad.add(x, 0.3)))
    mixed = ad.maximum(mixed, ad.scale(x, 0.5))
    return ad.tmean(mixed)


def test_finite_differences_on_composite_graph():
    rng = np.random.default_rng(7)
    for trial in range(10):
        x = rng.normal(size=(2, 4))
        err = ad.finite_difference_check(_composite, x)
        assert err < 1e-3, f"trial {trial}: rel err {err}"


def test_finite_differences_matmul_chain():
    rng = np.random.default_rng(11)
    w = rng.normal(size=(4, 3))
    v = rng.normal(size=3)

    def f(x):
        h = ad.relu(ad.add_rowvec(ad.matmul(x, Tensor(w)), Tensor(v)))
        return ad.tsum(ad.mul(h, h))

    for trial in range(5):
        x = rng.normal(size=(2, 4)) + 0.05  # keep away from relu kinks
        err = ad.finite_difference_check(f, x)
        assert err < 1e-3, f"trial {trial}: rel err {err}"


def test_reset_tape_drops_history():
    x = Tensor(np.ones(2), requires_grad=True)
    y = ad.mul(x, x)
    ad.reset_tape()
    assert len(ad.active_tape()) == 0
    # y's producing node is gone, so gradient cannot reach x anymore.
    ad.backward(ad.tsum(y))
    assert x.grad is None
