import gc
import math
import weakref
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from da_bias import autodiff as ad
from da_bias.autodiff import DimensionError, Tensor

import gradcheck


def leaf(x):
    return Tensor(x, requires_grad=True)


def test_matmul_identity_and_projection():
    eye = Tensor(np.eye(2))
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.matmul(eye, m).data, m.data)
    out = ad.matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[5.0], [7.0]]))
    np.testing.assert_array_equal(out.data, [[5.0], [0.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    a, b = leaf(rng.uniform(-1, 1, (3, 4))), leaf(rng.uniform(-1, 1, (4, 2)))
    err = gradcheck.check(lambda: ad.sum_all(ad.matmul(a, b)), [a, b], probes=12)
    assert err <= 1e-6


def test_matmul_backward_rules():
    rng = np.random.default_rng(2)
    A, B, G = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=(3, 2))
    a, b = leaf(A), leaf(B)
    with ad.Tape():
        ad.backward(ad.dot(ad.matmul(a, b), Tensor(G)))
    np.testing.assert_allclose(a.grad, G @ B.T, rtol=1e-13)
    np.testing.assert_allclose(b.grad, A.T @ G, rtol=1e-13)


def test_softmax_examples():
    np.testing.assert_array_equal(ad.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    big = ad.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(big)) and big[0] == pytest.approx(1.0) and big[1] < 1e-300
    # exact rational-exponent oracle via mpmath-free extended precision
    import mpmath

    mpmath.mp.dps = 40
    es = [mpmath.e ** k for k in (1, 2, 3)]
    oracle = [float(e / sum(es)) for e in es]
    np.testing.assert_allclose(ad.softmax(Tensor([1.0, 2.0, 3.0])).data, oracle, rtol=0, atol=1e-12)


def test_softmax_empty_input():
    with pytest.raises(DimensionError):
        ad.softmax(Tensor(np.zeros(0)))


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, st.integers(1, 12), elements=st.floats(-30, 30)),
       st.floats(-50, 50))
def test_softmax_normalized_and_shift_invariant(x, c):
    y = ad.softmax(Tensor(x)).data
    assert np.all(y > 0)
    assert abs(math.fsum(y) - 1.0) <= 1e-12
    assert np.max(np.abs(ad.softmax(Tensor(x + c)).data - y)) <= 1e-12


def test_elementwise_examples():
    np.testing.assert_array_equal(ad.elementwise("relu", Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    assert ad.elementwise("tanh", Tensor(0.0)).item() == 0.0
    x = leaf([0.0])
    with ad.Tape():
        ad.backward(ad.sum_all(ad.elementwise("sigmoid", x)))
    assert x.grad[0] == 0.25
    err = gradcheck.check(lambda: ad.sum_all(ad.sigmoid(x)), [x], probes=1)
    assert err <= 1e-8


def test_elementwise_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.elementwise("add", Tensor([1.0, 2.0]), Tensor([1.0]))
    with pytest.raises(DimensionError):
        ad.elementwise("mul", Tensor([1.0, 2.0]), Tensor([[1.0, 2.0]]))


@pytest.mark.parametrize("kind", ["relu", "tanh", "sigmoid"])
def test_unary_gradients(kind):
    rng = np.random.default_rng(3)
    x = leaf(rng.uniform(-1, 1, 25))
    w = Tensor(rng.uniform(-1, 1, 25))
    assert gradcheck.check(lambda: ad.dot(ad.elementwise(kind, x), w), [x], probes=20) <= 1e-4


@pytest.mark.parametrize("kind", ["add", "mul"])
def test_binary_gradients(kind):
    rng = np.random.default_rng(4)
    x, y = leaf(rng.uniform(-1, 1, 10)), leaf(rng.uniform(-1, 1, 10))
    w = Tensor(rng.uniform(-1, 1, 10))
    assert gradcheck.check(lambda: ad.dot(ad.elementwise(kind, x, y), w), [x, y], probes=10) <= 1e-4


def test_concat_examples():
    np.testing.assert_array_equal(ad.concat(Tensor([1.0, 2.0]), Tensor([3.0])).data, [1, 2, 3])
    assert ad.concat(Tensor(np.zeros(192)), Tensor(np.zeros(64))).shape == (256,)
    a, b = leaf(np.zeros(3)), leaf(np.zeros(2))
    with ad.Tape():
        ad.backward(ad.sum_all(ad.concat(a, b)))
    np.testing.assert_array_equal(a.grad, np.ones(3))
    np.testing.assert_array_equal(b.grad, np.ones(2))
    with pytest.raises(DimensionError):
        ad.concat(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3))), axis=1)


def test_embedding_lookup():
    np.testing.assert_array_equal(ad.embedding_lookup(Tensor(np.eye(3)), 1).data, [0, 1, 0])
    table = leaf(np.zeros((4, 2)))
    with ad.Tape():
        total = ad.add(ad.sum_all(ad.embedding_lookup(table, 2)), ad.sum_all(ad.embedding_lookup(table, 2)))
        ad.backward(total)
    expect = np.zeros((4, 2))
    expect[2] = 2.0
    np.testing.assert_array_equal(table.grad, expect)
    with pytest.raises(IndexError, match="7.*V=4"):
        ad.embedding_lookup(table, 7)


def test_embedding_gradient_finite_differences():
    rng = np.random.default_rng(5)
    table = leaf(rng.uniform(-1, 1, (5, 3)))
    w = Tensor(rng.uniform(-1, 1, 3))
    err = gradcheck.check(lambda: ad.dot(ad.tanh(ad.embedding_lookup(table, 3)), w), [table], probes=15)
    assert err <= 1e-4


def test_backward_examples():
    x = leaf(np.arange(6.0).reshape(2, 3))
    with ad.Tape():
        ad.backward(ad.sum_all(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))
    X, Y = np.array([1.0, -2.0, 3.0]), np.array([0.5, 4.0, -1.0])
    x, y = leaf(X), leaf(Y)
    with ad.Tape():
        ad.backward(ad.dot(x, y))
    np.testing.assert_array_equal(x.grad, Y)
    np.testing.assert_array_equal(y.grad, X)


def test_backward_rejects_vector_loss():
    x = leaf([1.0, 2.0])
    with ad.Tape():
        y = ad.tanh(x)
        with pytest.raises(ad.ContractError):
            ad.backward(y)


def test_unreachable_gradients_untouched():
    x, z = leaf([1.0]), leaf([2.0])
    z.grad = np.array([42.0])
    with ad.Tape():
        _ = ad.tanh(z)
        ad.backward(ad.sum_all(ad.mul(x, x)))
    assert z.grad[0] == 42.0
    assert x.grad[0] == 2.0


def test_release_frees_graph_without_cyclic_gc():
    x = leaf(np.ones((50, 50)))
    gc.disable()
    try:
        tape = ad.Tape()
        with tape:
            mid = ad.tanh(x)
            loss = ad.sum_all(ad.mul(mid, mid))
        ad.backward(loss)
        ref = weakref.ref(mid.data)
        del mid, loss
        assert ref() is not None      # still reachable through the tape records
        tape.release()
        assert len(tape) == 0 and ref() is None
    finally:
        gc.enable()
    assert x.grad is not None


def test_backward_is_additive():
    rng = np.random.default_rng(6)
    x = leaf(rng.uniform(-1, 1, (3, 3)))
    w = Tensor(rng.uniform(-1, 1, (3, 3)))

    def l1():
        return ad.sum_all(ad.tanh(ad.matmul(x, w)))

    def l2():
        return ad.dot(ad.sigmoid(x), w)

    g1 = gradcheck.tape_grads(l1, [x])[0]
    g2 = gradcheck.tape_grads(l2, [x])[0]
    g12 = gradcheck.tape_grads(lambda: ad.add(l1(), l2()), [x])[0]
    np.testing.assert_array_equal(g12, g1 + g2)


def test_ops_deterministic():
    rng = np.random.default_rng(7)
    X = rng.normal(size=(4, 5, 6))
    w_ih, w_hh, b = rng.normal(size=(6, 12)), rng.normal(size=(3, 12)), rng.normal(size=12)
    runs = []
    for _ in range(2):
        x = leaf(X)
        with ad.Tape():
            ad.backward(ad.sum_all(ad.lstm_sequence(x, Tensor(w_ih), Tensor(w_hh), Tensor(b))))
        runs.append(x.grad.tobytes())
    assert runs[0] == runs[1]


def _lstm_reference(X, w_ih, w_hh, b):
    """Unrolled elementwise LSTM built from primitive tape ops."""
    Bn, T, _ = X.shape
    H = w_hh.shape[0]
    h = Tensor(np.zeros((Bn, H)))
    c = Tensor(np.zeros((Bn, H)))
    outs = []
    for t in range(T):
        z = ad.add(ad.linear(ad.take(X, (slice(None), t)), w_ih, b), ad.matmul(h, w_hh))
        i = ad.sigmoid(ad.take(z, (slice(None), slice(0, H))))
        f = ad.sigmoid(ad.take(z, (slice(None), slice(H, 2 * H))))
        g = ad.tanh(ad.take(z, (slice(None), slice(2 * H, 3 * H))))
        o = ad.sigmoid(ad.take(z, (slice(None), slice(3 * H, 4 * H))))
        c = ad.add(ad.mul(f, c), ad.mul(i, g))
        h = ad.mul(o, ad.tanh(c))
        outs.append(h)
    return outs


def test_fused_lstm_matches_unrolled_reference():
    rng = np.random.default_rng(8)
    X = leaf(rng.uniform(-1, 1, (2, 4, 3)))
    w_ih, w_hh, b = leaf(rng.uniform(-1, 1, (3, 8))), leaf(rng.uniform(-1, 1, (2, 8))), leaf(rng.uniform(-1, 1, 8))
    W = rng.uniform(-1, 1, (2, 4, 2))
    fused = gradcheck.tape_grads(lambda: ad.dot(ad.lstm_sequence(X, w_ih, w_hh, b), Tensor(W)), [X, w_ih, w_hh, b])

    def ref_loss():
        outs = _lstm_reference(X, w_ih, w_hh, b)
        total = ad.dot(outs[0], Tensor(W[:, 0]))
        for t in range(1, 4):
            total = ad.add(total, ad.dot(outs[t], Tensor(W[:, t])))
        return total

    ref = gradcheck.tape_grads(ref_loss, [X, w_ih, w_hh, b])
    with ad.no_tape():
        hs = ad.lstm_sequence(X, w_ih, w_hh, b).data
        ref_hs = np.stack([o.data for o in _lstm_reference(X, w_ih, w_hh, b)], axis=1)
    np.testing.assert_allclose(hs, ref_hs, rtol=0, atol=1e-14)
    for g1, g2 in zip(fused, ref):
        np.testing.assert_allclose(g1, g2, rtol=1e-12, atol=1e-14)


def test_lstm_sequence_gradient():
    rng = np.random.default_rng(9)
    X = leaf(rng.uniform(-1, 1, (2, 5, 3)))
    params = [leaf(rng.uniform(-1, 1, (3, 8))), leaf(rng.uniform(-1, 1, (2, 8))), leaf(rng.uniform(-1, 1, 8))]
    W = Tensor(rng.uniform(-1, 1, (2, 5, 2)))
    err = gradcheck.check(lambda: ad.dot(ad.lstm_sequence(X, *params), W), [X, *params], probes=20)
    assert err <= 1e-4


def test_log_softmax_and_outer_add_gradients():
    rng = np.random.default_rng(10)
    a, b = leaf(rng.uniform(-1, 1, (2, 3, 4))), leaf(rng.uniform(-1, 1, (2, 2, 4)))
    W = Tensor(rng.uniform(-1, 1, (2, 3, 2, 4)))
    err = gradcheck.check(lambda: ad.dot(ad.log_softmax(ad.outer_add(a, b)), W), [a, b], probes=16)
    assert err <= 1e-4


def test_masked_softmax_gradient():
    rng = np.random.default_rng(11)
    x = leaf(rng.uniform(-1, 1, (3, 5)))
    mask = np.array([[1, 1, 0, 1, 0]] * 3, dtype=bool)
    W = Tensor(rng.uniform(-1, 1, (3, 5)))
    y = ad.softmax(x, mask).data
    assert np.all(y[:, ~mask[0]] == 0)
    np.testing.assert_allclose(y.sum(-1), 1.0, atol=1e-12)
    assert gradcheck.check(lambda: ad.dot(ad.softmax(x, mask), W), [x], probes=15) <= 1e-4


def test_no_implicit_broadcasting():
    with pytest.raises(DimensionError):
        ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(3)))
    out = ad.scale(Tensor([1.0, 2.0]), 3.0)
    np.testing.assert_array_equal(out.data, [3.0, 6.0])


def test_values_are_flat_and_shape_consistent():
    t = Tensor(np.arange(6.0).reshape(2, 3))
    assert t.values.shape == (6,)
    assert int(np.prod(t.shape)) == len(t.values)
    assert Fraction(t.values[5]) == 5
