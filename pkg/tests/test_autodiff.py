import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fatnn import autodiff as ad
from fatnn.autodiff import Jet2, jet_activate, jet_affine, jet_lift


def d1_fd(f, x, h=1e-4):
    c = lambda h: (f(x + h) - f(x - h)) / (2 * h)
    return (4 * c(h / 2) - c(h)) / 3


def d2_fd(f, x, h=1e-3):
    c = lambda h: (f(x + h) - 2 * f(x) + f(x - h)) / h**2
    return (4 * c(h / 2) - c(h)) / 3


def rel(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-6 * max(1.0, np.max(np.abs(b))))))


# -- lifting -------------------------------------------------------------------


def test_lift_active():
    assert jet_lift(3.0, True).as_tuple() == (3.0, 1.0, 0.0)


def test_lift_constant():
    assert jet_lift(3.0, False).as_tuple() == (3.0, 0.0, 0.0)


def test_lift_then_identity_layer_unchanged():
    j = jet_lift(3.0, True)
    lifted = Jet2(np.array([j.v]), np.array([j.d1]), np.array([j.d2]))
    out = jet_affine(np.eye(1), np.zeros(1), lifted)
    assert [float(x[0]) for x in out.as_tuple()] == [3.0, 1.0, 0.0]


def test_lift_rejects_nonfinite():
    with pytest.raises(ValueError):
        jet_lift(math.nan, True)


# -- activations ---------------------------------------------------------------


def test_tanh_at_origin():
    out = jet_activate("tanh", Jet2(0.0, 1.0, 0.0))
    assert out.as_tuple() == pytest.approx((0.0, 1.0, 0.0))


def test_trigblend_at_origin():
    out = jet_activate("trigblend", Jet2(0.0, 1.0, 0.0))
    assert out.as_tuple() == pytest.approx((0.5, 0.5, -0.5))


def test_unknown_activation():
    with pytest.raises(ValueError):
        jet_activate("relu", Jet2(0.0, 1.0, 0.0))


@pytest.mark.parametrize("kind", ["tanh", "trigblend", "sin", "cos"])
def test_activation_jets_match_finite_differences(kind, rng):
    for _ in range(20):
        w, b = rng.normal(size=2)
        x = rng.uniform(-1, 1)
        f = lambda s: ad.activation(kind, 0, w * s + b)
        out = jet_activate(kind, Jet2(w * x + b, w, 0.0))
        assert rel(out.d1, d1_fd(f, x)) < 1e-6
        assert rel(out.d2, d2_fd(f, x)) < 1e-6


def test_activation_derivative_table_consistency(rng):
    v = rng.normal(size=50)
    for kind in ad.ACTIVATIONS:
        top = 3
        table = ad.activation_table(kind, v, top)
        for n in range(top):
            fd = d1_fd(lambda s: ad.activation(kind, n, s), v, 1e-3)
            assert rel(table[n + 1], fd) < 1e-7


def test_want_limits_orders():
    out = jet_activate("tanh", Jet2(0.3, 1.0, 0.0), want=1)
    assert out.d2 is None and out.d1 is not None
    out = jet_activate("tanh", Jet2(0.3, None, None))
    assert out.d1 is None


# -- affine layers -------------------------------------------------------------


def test_affine_identity():
    j = Jet2(np.array([1.0, 2.0]), np.array([0.5, -1.0]), np.array([0.1, 0.2]))
    out = jet_affine(np.eye(2), np.zeros(2), j)
    for a, b in zip(out.as_tuple(), j.as_tuple()):
        np.testing.assert_array_equal(a, b)


def test_affine_zero_weights():
    j = Jet2(np.array([1.0, 2.0]), np.array([0.5, -1.0]), np.array([0.1, 0.2]))
    b = np.array([3.0, -4.0, 5.0])
    out = jet_affine(np.zeros((2, 3)), b, j)
    np.testing.assert_array_equal(out.v, b)
    np.testing.assert_array_equal(out.d1, 0.0)
    np.testing.assert_array_equal(out.d2, 0.0)


def test_affine_shape_mismatch():
    with pytest.raises(ValueError):
        jet_affine(np.zeros((3, 2)), np.zeros(2), Jet2(np.zeros(2), np.zeros(2), np.zeros(2)))


def test_random_layer_vs_finite_differences(rng):
    w1, b1 = rng.normal(size=(1, 6)), rng.normal(size=6)
    w2, b2 = rng.normal(size=(6, 3)), rng.normal(size=3)

    def net(s):
        h = np.tanh(np.array([s]) @ w1 + b1)
        return h @ w2 + b2

    x = 0.37
    j = jet_affine(w1, b1, Jet2(np.array([x]), np.array([1.0]), np.array([0.0])))
    j = jet_affine(w2, b2, jet_activate("tanh", j))
    assert rel(j.d1, d1_fd(net, x)) < 1e-6
    assert rel(j.d2, d2_fd(net, x)) < 1e-6


def test_two_layer_width_one_hand_chain():
    # f(s) = tanh(2 s + 1) * 3 - 1, hand-differentiated
    s = 0.2
    j = jet_affine(np.array([[2.0]]), np.array([1.0]), Jet2(np.array([s]), np.array([1.0]), np.array([0.0])))
    j = jet_affine(np.array([[3.0]]), np.array([-1.0]), jet_activate("tanh", j))
    t = math.tanh(2 * s + 1)
    assert float(j.v[0]) == pytest.approx(3 * t - 1, rel=1e-14)
    assert float(j.d1[0]) == pytest.approx(6 * (1 - t * t), rel=1e-14)
    assert float(j.d2[0]) == pytest.approx(3 * 4 * (-2 * t * (1 - t * t)), rel=1e-14)


# -- reverse mode --------------------------------------------------------------


def test_grad_single_parameter():
    tape = ad.Tape()
    p = tape.leaf([1.0, 2.0, 3.0])
    root = ad.total(ad.mul(p, np.array([0.0, 1.0, 0.0])))
    g = ad.grad_of_scalar(tape, root, [p]).data
    np.testing.assert_array_equal(g, [0.0, 1.0, 0.0])


def test_grad_square():
    val, g = ad.value_and_grad(lambda p: ad.total(ad.square(p)), np.array([3.0]))
    assert val == 9.0 and g[0] == 6.0


def test_unused_leaf_gets_zero():
    tape = ad.Tape()
    p, q = tape.leaf(2.0), tape.leaf([1.0, 1.0])
    g = ad.grad_of_scalar(tape, ad.mul(p, p), [p, q]).data
    np.testing.assert_array_equal(g, [4.0, 0.0, 0.0])


def test_nonfinite_loss_raises():
    tape = ad.Tape()
    p = tape.leaf(np.inf)
    with pytest.raises(ad.NonFiniteError):
        ad.grad_of_scalar(tape, ad.mul(p, 1.0), [p])


def test_mixed_tapes_rejected():
    a, b = ad.Tape().leaf(1.0), ad.Tape().leaf(1.0)
    with pytest.raises(ValueError):
        ad.add(a, b)


def test_nonscalar_root_rejected():
    tape = ad.Tape()
    p = tape.leaf([1.0, 2.0])
    with pytest.raises(ValueError):
        tape.backward(p)


def test_ops_broadcast_gradients(rng):
    A = rng.normal(size=(4, 3))
    b = rng.normal(size=3)

    def fn(p):
        x = ad.reshape(p, (2, 2, 3))
        y = ad.bmm(x, ad.reshape(ad.mul(p, 0.5), (2, 3, 2)))
        z = ad.add(ad.matmul(ad.reshape(p, (4, 3)), b), ad.total(ad.square(y)))
        return ad.mean(ad.sub(ad.square(z), ad.mul(A[0, 0], z)))

    assert ad.finite_diff_check(fn, rng.normal(size=12), 1e-5) < 1e-7


# -- finite differences --------------------------------------------------------


def test_fd_check_quadratic(rng):
    Q = rng.normal(size=(5, 5))
    Q = Q @ Q.T
    fn = lambda p: ad.total(ad.mul(p, ad.matmul(Q, p))) if isinstance(p, ad.Var) else p @ Q @ p
    assert ad.finite_diff_check(fn, rng.normal(size=5)) < 1e-9


def test_fd_check_zero_function():
    assert ad.finite_diff_check(lambda p: ad.mul(ad.total(p), 0.0), np.ones(4)) == 0.0


def _selector(total, lo, n):
    """Matrix picking ``p[lo:lo+n]``; slicing is expressed as a product so it stays on the tape."""
    m = np.zeros((n, total))
    m[np.arange(n), lo + np.arange(n)] = 1.0
    return m


def test_fd_check_tanh_subnetwork(rng):
    x = rng.uniform(-1, 1, size=(8, 1))
    y = np.sin(3 * x[:, 0])
    shapes = [(1, 6), (6,), (6, 1), (1,)]
    sizes = [int(np.prod(s)) for s in shapes]
    offsets = np.cumsum([0] + sizes[:-1])
    total = sum(sizes)

    def fn(p):
        W1, b1, W2, b2 = (ad.reshape(ad.matmul(_selector(total, lo, n), p), s)
                          for s, lo, n in zip(shapes, offsets, sizes))
        h = ad.act("tanh", 0, ad.add(ad.matmul(x, W1), b1))
        out = ad.reshape(ad.add(ad.matmul(h, W2), b2), (-1,))
        return ad.mean(ad.square(ad.sub(out, y)))

    assert ad.finite_diff_check(fn, rng.normal(size=total), 1e-5) < 1e-5


def test_fd_step_must_be_positive():
    with pytest.raises(ValueError):
        ad.finite_diff_check(lambda p: ad.total(p), np.ones(2), 0.0)


def test_richardson_beats_plain_central():
    f = lambda p: float(np.sum(np.sin(5 * p)))
    p = np.array([0.3, 1.1])
    exact = 5 * np.cos(5 * p)
    plain = ad.central_differences(f, p, 1e-2)
    rich = ad.richardson_differences(f, p, 1e-2)
    assert np.max(np.abs(rich - exact)) < np.max(np.abs(plain - exact)) / 100


@given(st.lists(st.floats(-3, 3), min_size=1, max_size=6))
def test_gradient_of_sum_of_squares(xs):
    p = np.array(xs)
    _, g = ad.value_and_grad(lambda q: ad.total(ad.square(q)), p)
    np.testing.assert_allclose(g, 2 * p, rtol=0, atol=1e-12)


@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2))
def test_jet_chain_rule_composes(w, b, x):
    # activating an affine jet equals the derivative of the composite
    j = jet_activate("tanh", Jet2(w * x + b, w, 0.0))
    t = math.tanh(w * x + b)
    assert j.d1 == pytest.approx(w * (1 - t * t), abs=1e-12)
    assert j.d2 == pytest.approx(w * w * (-2 * t * (1 - t * t)), abs=1e-12)
