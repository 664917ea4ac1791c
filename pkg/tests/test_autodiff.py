import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from semiseg import autodiff as ad
from semiseg.autodiff import Tape, Tensor, gradcheck

RNG = np.random.default_rng(1234)


def rand(*shape, lo=-1.0, hi=1.0):
    return RNG.uniform(lo, hi, shape)


UNARY = {
    "exp": (ad.exp, lambda: rand(3, 4)),
    "log": (ad.log, lambda: rand(3, 4, lo=0.2, hi=2.0)),
    "sigmoid": (ad.sigmoid, lambda: rand(3, 4, lo=-4, hi=4)),
    "softplus": (ad.softplus, lambda: rand(3, 4, lo=-4, hi=4)),
    "tanh": (ad.tanh, lambda: rand(3, 4)),
    "relu": (ad.relu, lambda: rand(3, 4, lo=0.1, hi=1) * RNG.choice([-1, 1], (3, 4))),
    "huber": (lambda x: ad.huber(x, 1.0), lambda: rand(3, 4, lo=0.1, hi=0.9) * RNG.choice([-1, 3], (3, 4))),
    "softmax": (lambda x: ad.softmax(x, axis=-1), lambda: rand(3, 4)),
    "log_softmax": (lambda x: ad.log_softmax(x, axis=0), lambda: rand(3, 4)),
    "normalize": (lambda x: ad.normalize(x, axis=-1), lambda: rand(3, 4)),
    "l2_norm": (lambda x: ad.l2_norm(x, axis=0), lambda: rand(3, 4)),
    "power": (lambda x: ad.power(x, 3.0), lambda: rand(3, 4)),
    "transpose": (lambda x: ad.transpose(x, (1, 0)), lambda: rand(3, 4)),
    "reshape": (lambda x: ad.reshape(x, (2, 6)), lambda: rand(3, 4)),
    "getitem": (lambda x: x[np.array([0, 2, 0]), 1:3], lambda: rand(3, 4)),
    "repeat": (lambda x: ad.repeat(x, 2, axis=1), lambda: rand(3, 4)),
    "broadcast_to": (lambda x: ad.broadcast_to(x, (2, 3, 4)), lambda: rand(3, 4)),
    "mean": (lambda x: ad.mean(x, axis=1, keepdims=True), lambda: rand(3, 4)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_ops_match_finite_differences(name):
    op, gen = UNARY[name]
    weights = rand(*op(Tensor(gen())).shape)

    def f(x):
        return (op(x) * weights).sum()

    assert gradcheck(f, [gen()]) < 1e-4


BINARY = {
    "add": (ad.add, (3, 4), (4,)),
    "sub": (ad.sub, (3, 1), (1, 4)),
    "mul": (ad.mul, (2, 3, 4), (3, 1)),
    "div": (ad.div, (3, 4), (3, 4)),
    "matmul": (ad.matmul, (3, 4), (4, 5)),
    "batched_matmul": (ad.matmul, (2, 3, 4), (4, 2)),
    "vec_matmul": (ad.matmul, (4,), (4, 3)),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_ops_broadcast_and_match_finite_differences(name):
    op, sa, sb = BINARY[name]
    a, b = rand(*sa), rand(*sb, lo=0.5, hi=1.5)
    weights = rand(*op(Tensor(a), Tensor(b)).shape)
    assert gradcheck(lambda x, y: (op(x, y) * weights).sum(), [a, b]) < 1e-4


def test_concat_and_neighborhoods_gradients():
    a, b = rand(2, 3), rand(2, 2)
    w = rand(2, 5)
    assert gradcheck(lambda x, y: (ad.concat([x, y], axis=1) * w).sum(), [a, b]) < 1e-4
    x = rand(2, 4, 5, 3)
    for dil in (1, 2):
        wn = rand(2, 4, 5, 27)
        assert gradcheck(lambda t: (ad.neighborhoods(t, 3, dil) * wn).sum(), [x]) < 1e-4


def test_neighborhoods_matches_explicit_loop():
    x = rand(1, 4, 4, 2)
    out = ad.neighborhoods(Tensor(x), 3, 1).data
    pad = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    for r in range(4):
        for c in range(4):
            expect = np.concatenate([pad[0, r + i, c + j] for i in range(3) for j in range(3)])
            np.testing.assert_allclose(out[0, r, c], expect, rtol=1e-6)


def test_doc_example_and_accumulation():
    x = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        y = (x * x).sum() + x.sum()
    tape.backward(y)
    assert float(x.grad[0]) == pytest.approx(7.0)


def test_tape_records_in_execution_order():
    x = Tensor(rand(3), requires_grad=True)
    with Tape() as tape:
        a = ad.exp(x)
        b = a * 2.0
        c = b.sum()
    outs = [n.out for n in tape.nodes]
    assert outs.index(a) < outs.index(b) < outs.index(c)


def test_backward_needs_scalar():
    x = Tensor(rand(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ad.ShapeError):
        tape.backward(y)


def test_non_finite_raises():
    with pytest.raises(ad.NonFiniteError):
        ad.exp(Tensor([1e5]))
    with pytest.raises(Exception):
        ad.log(Tensor([0.0]))


def test_shape_error_names_both_shapes():
    with pytest.raises(ad.ShapeError, match=r"\(3, 4\).*\(5, 2\)|\(5, 2\).*\(3, 4\)"):
        ad.matmul(Tensor(rand(3, 4)), Tensor(rand(5, 2)))


def test_no_grad_records_nothing():
    x = Tensor(rand(3), requires_grad=True)
    with Tape() as tape:
        with ad.no_grad():
            y = ad.exp(x).sum()
    assert tape.nodes == []
    assert y._tape is None


def test_default_dtype_is_float32_and_precision_switches():
    assert Tensor([1.0]).data.dtype == np.float32
    with ad.precision(np.float64):
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32


def test_normalize_clamps_zero_vectors():
    out = ad.normalize(Tensor(np.zeros((2, 3))), axis=-1)
    assert np.all(np.isfinite(out.data))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=6))
def test_softmax_is_a_distribution(values):
    p = ad.softmax(Tensor(np.array(values)), axis=-1).data
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) < 1e-5
    with ad.precision(np.float64):
        lp = ad.log_softmax(Tensor(np.array(values)), axis=-1).data
    np.testing.assert_allclose(np.exp(lp).sum(), 1.0, rtol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.floats(-50, 50))
def test_softplus_and_sigmoid_stable(v):
    with ad.precision(np.float64):
        sp = float(ad.softplus(Tensor([v])).data[0])
        sg = float(ad.sigmoid(Tensor([v])).data[0])
    assert sp == pytest.approx(np.logaddexp(0.0, v), rel=1e-9, abs=1e-12)
    assert 0.0 <= sg <= 1.0
