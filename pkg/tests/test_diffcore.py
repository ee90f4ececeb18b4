import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uotm import diffcore as dc


def central(f, x, h=1e-5):
    return (f(x + h) - f(x - h)) / (2 * h)


# ---------------------------------------------------------------- record


def test_record_add_value_and_partials():
    t = dc.Tape()
    a, b = t.leaf(2.0), t.leaf(3.0)
    out = dc.add(a, b)
    assert out.item() == 5.0
    adj = dc.backward(t, out)
    assert (adj[a.id], adj[b.id]) == (1.0, 1.0)


def test_record_mul_value_and_partials():
    t = dc.Tape()
    a, b = t.leaf(2.0), t.leaf(3.0)
    out = dc.mul(a, b)
    assert out.item() == 6.0
    adj = dc.backward(t, out)
    assert (adj[a.id], adj[b.id]) == (3.0, 2.0)


def test_record_exp_at_zero():
    t = dc.Tape()
    a = t.leaf(0.0)
    out = dc.exp(a)
    assert out.item() == 1.0
    assert dc.backward(t, out)[a.id] == 1.0


def test_record_appends_dense_ids():
    t = dc.Tape()
    a, b = t.leaf(1.0), t.leaf(2.0)
    nid = t.record("add", [a.id, b.id], np.array(3.0))
    assert nid == 2 == len(t) - 1
    assert dc.backward(t, nid)[a.id] == 1.0


def test_record_unknown_input_fails():
    t = dc.Tape()
    t.leaf(1.0)
    with pytest.raises(dc.TapeError):
        t.record("add", [0, 7], np.array(0.0))


def test_backward_unknown_root_fails():
    with pytest.raises(dc.TapeError):
        dc.backward(dc.Tape(), 3)


# ---------------------------------------------------------------- backward


def test_backward_square():
    t = dc.Tape()
    x = t.leaf(3.0)
    assert dc.backward(t, dc.pow2(x))[x.id] == pytest.approx(6.0)


def test_backward_exp_neg():
    t = dc.Tape()
    x = t.leaf(0.0)
    assert dc.backward(t, dc.exp(-x))[x.id] == pytest.approx(-1.0)


def test_backward_kl_conjugate_of_neg_potential():
    f = lambda v: math.expm1(-v)
    t = dc.Tape()
    v = t.leaf(0.5)
    g = dc.backward(t, dc.exp(-v) - 1.0)[v.id]
    assert g == pytest.approx(central(f, 0.5), abs=1e-8)
    assert g == pytest.approx(-0.6065, abs=1e-4)


def test_backward_root_adjoint_is_one():
    t = dc.Tape()
    x = t.leaf(np.array([1.0, 2.0]))
    r = dc.sum(dc.exp(x))
    assert dc.backward(t, r)[r.id] == 1.0


def test_backward_unreached_nodes_are_none():
    t = dc.Tape()
    x, y = t.leaf(1.0), t.leaf(2.0)
    assert dc.backward(t, dc.exp(x))[y.id] is None


def test_backward_is_additive_over_contributions():
    rng = np.random.default_rng(0)
    xv = rng.normal(size=5)
    parts = [lambda x: dc.exp(x), lambda x: dc.tanh(x) * 3.0, lambda x: dc.pow2(x)]
    t = dc.Tape()
    x = t.leaf(xv)
    total = dc.sum(parts[0](x)) + dc.sum(parts[1](x)) + dc.sum(parts[2](x))
    combined = dc.backward(t, total)[x.id]
    separate = np.zeros(5)
    for p in parts:
        t2 = dc.Tape()
        x2 = t2.leaf(xv)
        separate += dc.backward(t2, dc.sum(p(x2)))[x2.id]
    np.testing.assert_allclose(combined, separate, rtol=1e-12)


def test_constant_receives_no_gradient():
    t = dc.Tape()
    c = t.constant(2.0)
    x = t.leaf(1.0)
    adj = dc.backward(t, c * x)
    assert adj[c.id] is None and adj[x.id] == 2.0


def test_second_derivative_via_create_graph():
    t = dc.Tape()
    x = t.leaf(1.5)
    (g,) = dc.grad(x * x * x, [x], create_graph=True)
    assert g.item() == pytest.approx(3 * 1.5 ** 2)
    (h,) = dc.grad(g, [x])
    assert float(h) == pytest.approx(6 * 1.5)


def test_broadcast_add_reduces_adjoint():
    t = dc.Tape()
    a = t.leaf(np.ones((4, 3)))
    b = t.leaf(np.zeros(3))
    adj = dc.backward(t, dc.sum(a + b))
    np.testing.assert_array_equal(adj[b.id], np.full(3, 4.0))


def test_dot_gradients_match_matrix_calculus():
    rng = np.random.default_rng(1)
    A, B = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    G = rng.normal(size=(3, 2))
    t = dc.Tape()
    a, b = t.leaf(A), t.leaf(B)
    adj = dc.backward(t, dc.sum(dc.dot(a, b) * t.constant(G)))
    np.testing.assert_allclose(adj[a.id], G @ B.T)
    np.testing.assert_allclose(adj[b.id], A.T @ G)


# ---------------------------------------------------------------- op-wise finite differences

UNARY = {
    "neg": (dc.neg, lambda x: -x, (-3, 3)),
    "exp": (dc.exp, np.exp, (-3, 3)),
    "log": (dc.log, np.log, (0.1, 5)),
    "pow2": (dc.pow2, np.square, (-3, 3)),
    "sqrt": (dc.sqrt, np.sqrt, (0.1, 5)),
    "tanh": (dc.tanh, np.tanh, (-3, 3)),
    "sigmoid": (dc.sigmoid, lambda x: 1 / (1 + np.exp(-x)), (-5, 5)),
    "silu": (dc.silu, lambda x: x / (1 + np.exp(-x)), (-5, 5)),
    "relu": (dc.relu, lambda x: np.maximum(x, 0), (-3, 3)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_op_matches_central_difference(name):
    op, ref, (lo, hi) = UNARY[name]
    rng = np.random.default_rng(hash(name) % 2 ** 32)
    x = rng.uniform(lo, hi, 100)
    if name == "relu":
        x = x[np.abs(x) > 1e-3]
    t = dc.Tape()
    xn = t.leaf(x)
    out = op(xn)
    np.testing.assert_allclose(out.value, ref(x), rtol=1e-12, atol=1e-12)
    auto = dc.backward(t, dc.sum(out))[xn.id]
    fd = central(ref, x)
    assert np.max(np.abs(auto - fd) / np.maximum(1, np.abs(fd))) < 1e-4


BINARY = {
    "add": (dc.add, lambda a, b: a + b),
    "sub": (dc.sub, lambda a, b: a - b),
    "mul": (dc.mul, lambda a, b: a * b),
    "div": (dc.div, lambda a, b: a / b),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_op_matches_central_difference(name):
    op, ref = BINARY[name]
    rng = np.random.default_rng(len(name))
    a = rng.uniform(-3, 3, 100)
    b = rng.uniform(0.5, 3, 100) * rng.choice([-1, 1], 100)
    t = dc.Tape()
    an, bn = t.leaf(a), t.leaf(b)
    adj = dc.backward(t, dc.sum(op(an, bn)))
    fa = central(lambda u: ref(u, b), a)
    fb = central(lambda u: ref(a, u), b)
    assert np.max(np.abs(adj[an.id] - fa) / np.maximum(1, np.abs(fa))) < 1e-4
    assert np.max(np.abs(adj[bn.id] - fb) / np.maximum(1, np.abs(fb))) < 1e-4


def test_sum_and_dot_match_central_difference():
    rng = np.random.default_rng(5)
    for _ in range(100):
        w = rng.normal(size=(3, 1))
        x = rng.normal(size=(1, 3))
        t = dc.Tape()
        xn = t.leaf(x)
        g = dc.backward(t, dc.sum(dc.tanh(dc.dot(xn, t.constant(w)))))[xn.id]
        f = lambda xx: float(np.sum(np.tanh(xx @ w)))
        fd = np.array([(f(x + h) - f(x - h)) / 2e-5 for h in 1e-5 * np.eye(3)[:, None, :]])
        assert np.max(np.abs(g.ravel() - fd.ravel()) / np.maximum(1, np.abs(fd.ravel()))) < 1e-4


def test_op_set_is_covered():
    for name in dc.OPS:
        assert hasattr(dc, name)


# ---------------------------------------------------------------- grad_norm_sq


def test_grad_norm_sq_linear():
    t = dc.Tape()
    y = t.leaf(0.7)
    assert dc.grad_norm_sq(t, y * 3.0, [y]).item() == pytest.approx(9.0)


def test_grad_norm_sq_square():
    t = dc.Tape()
    y = t.leaf(2.0)
    assert dc.grad_norm_sq(t, dc.pow2(y), [y]).item() == pytest.approx(16.0)


def test_grad_norm_sq_penalty_derivative_at_saddle():
    # tanh stands in for a smooth odd function with unit slope at 0
    def penalty(y0):
        t = dc.Tape()
        y = t.leaf(y0)
        return t, y, dc.grad_norm_sq(t, dc.tanh(y), [y])

    t, y, p = penalty(0.0)
    assert p.item() == pytest.approx(1.0)
    g = dc.backward(t, p)[y.id]
    fd = central(lambda s: penalty(s)[2].item(), 0.0)
    assert g == pytest.approx(0.0, abs=1e-12)
    assert fd == pytest.approx(0.0, abs=1e-8)


def test_grad_norm_sq_rejects_non_leaf():
    t = dc.Tape()
    y = t.leaf(1.0)
    h = dc.exp(y)
    with pytest.raises(dc.TapeError):
        dc.grad_norm_sq(t, dc.pow2(h), [h])


def test_grad_norm_sq_rejects_vector_root():
    t = dc.Tape()
    y = t.leaf(np.ones(3))
    with pytest.raises(dc.TapeError):
        dc.grad_norm_sq(t, dc.exp(y), [y])


def _two_layer_penalty(params, y):
    w1, b1, w2 = params
    t = dc.Tape()
    yn = t.leaf(y)
    nodes = [t.leaf(p) for p in (w1, b1, w2)]
    h = dc.silu(dc.add(dc.dot(yn, nodes[0]), nodes[1]))
    v = dc.sum(dc.dot(h, nodes[2]))
    pen = dc.grad_norm_sq(t, v, [yn])
    return t, nodes, pen


def test_second_order_parameter_gradient_matches_finite_difference():
    rng = np.random.default_rng(11)
    worst = 0.0
    for trial in range(5):
        params = [rng.normal(size=(1, 6)), rng.normal(size=6), rng.normal(size=(6, 1))]
        y = rng.normal(size=(8, 1))
        t, nodes, pen = _two_layer_penalty(params, y)
        adj = dc.backward(t, pen)
        for k in range(3):
            for idx in np.ndindex(params[k].shape):
                def f(s):
                    p = [q.copy() for q in params]
                    p[k][idx] += s
                    return _two_layer_penalty(p, y)[2].item()
                fd = central(f, 0.0)
                worst = max(worst, abs(adj[nodes[k].id][idx] - fd) / max(1.0, abs(fd)))
    assert worst < 1e-3


# ---------------------------------------------------------------- properties


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-4, 4), min_size=1, max_size=8))
def test_chain_rule_property(xs):
    x = np.array(xs)
    t = dc.Tape()
    xn = t.leaf(x)
    g = dc.backward(t, dc.sum(dc.tanh(dc.exp(xn) * 0.3)))[xn.id]
    ref = (1 - np.tanh(0.3 * np.exp(x)) ** 2) * 0.3 * np.exp(x)
    np.testing.assert_allclose(g, ref, rtol=1e-10, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3))
def test_operator_overloads_agree_with_functions(a, b):
    t = dc.Tape()
    x, y = t.leaf(a), t.leaf(b)
    assert (x * y - x).item() == pytest.approx(dc.sub(dc.mul(x, y), x).item())
    assert (2.0 - x).item() == pytest.approx(2.0 - a)
    assert (np.float64(2.0) * x).item() == pytest.approx(2.0 * a)
