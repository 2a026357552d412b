import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from picomaml import tensor as T
from picomaml.errors import LabelIndexError, NumericError, ShapeError, SupervisionError, VocabularyError
from picomaml.tensor import Tape, Tensor, backward, finite_diff_check, no_grad

import oracles

RNG = np.random.default_rng(1234)


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def test_matmul_examples():
    eye = t64(np.eye(2))
    assert np.array_equal((eye @ eye).data, np.eye(2))
    out = t64([[1, 2], [3, 4]]) @ t64([[1], [1]])
    assert np.array_equal(out.data, [[3], [7]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        t64(np.ones((2, 3))) @ t64(np.ones((2, 3)))


def test_matmul_grad_matches_numeric_oracle():
    a, b = RNG.normal(size=(3, 4)), RNG.normal(size=(4, 2))
    at = t64(a, True)
    with Tape() as tape:
        loss = T.tsum(at @ t64(b))
    backward(loss, tape)
    num = oracles.central_diff(lambda x: float(np.sum(x @ b)), a)
    assert np.allclose(at.grad, num, rtol=1e-6, atol=1e-8)
    assert np.allclose(at.grad, np.ones((3, 2)) @ b.T)


def test_logsumexp_rows_examples():
    assert T.logsumexp_rows(t64([[0.0, 0.0]])).data[0] == pytest.approx(math.log(2), abs=1e-12)
    big = T.logsumexp_rows(t64([[1000.0, 1000.0]])).data[0]
    assert big == pytest.approx(1000 + math.log(2), abs=1e-9)
    assert T.logsumexp_rows(t64([[1.0, 2.0, 3.0]])).data[0] == pytest.approx(
        oracles.naive_logsumexp([1, 2, 3]), abs=1e-10)


def test_logsumexp_rows_empty_is_shape_error():
    with pytest.raises(ShapeError):
        T.logsumexp_rows(t64(np.zeros((2, 0))))


@given(arrays(np.float64, (3, 5), elements=st.floats(-1e4, 1e4)), st.floats(-1e3, 1e3))
def test_logsumexp_shift_invariance(x, c):
    a = T.logsumexp_rows(t64(x)).data
    b = T.logsumexp_rows(t64(x + c)).data
    assert np.allclose(b, a + c, rtol=0, atol=1e-10 * max(1.0, np.abs(x).max() + abs(c)))


def test_cross_entropy_examples():
    assert T.cross_entropy_from_logits(t64(np.zeros((1, 4))), [0]).data == pytest.approx(math.log(4))
    val = float(T.cross_entropy_from_logits(t64([[10.0, -10.0]]), [0]).data)
    assert val == pytest.approx(math.log1p(math.exp(-20)), rel=1e-6)
    assert val == pytest.approx(2.06e-9, rel=1e-2)
    logits = RNG.normal(size=(2, 3))
    both = T.cross_entropy_from_logits(t64(logits), [1, -100], ignore_index=-100).data
    single = T.cross_entropy_from_logits(t64(logits[:1]), [1]).data
    assert both == pytest.approx(single)


def test_cross_entropy_errors():
    with pytest.raises(SupervisionError, match="no supervised positions"):
        T.cross_entropy_from_logits(t64(np.zeros((2, 3))), [-1, -1], ignore_index=-1)
    with pytest.raises(LabelIndexError):
        T.cross_entropy_from_logits(t64(np.zeros((2, 3))), [0, 3])


def test_backward_examples_and_accumulation():
    x = t64([1.0, 2.0], True)
    with Tape() as tape:
        loss = T.tsum(x * x)
    backward(loss, tape)
    assert np.array_equal(x.grad, [2.0, 4.0])
    backward(loss, tape)
    assert np.array_equal(x.grad, [4.0, 8.0])

    y = t64(RNG.normal(size=(3, 2)), True)
    with Tape() as tape:
        s = T.tsum(y)
    backward(s, tape)
    assert np.array_equal(y.grad, np.ones((3, 2)))


def test_backward_rejects_non_scalar():
    x = t64([1.0, 2.0], True)
    with Tape() as tape:
        y = x * x
    with pytest.raises(ShapeError):
        backward(y, tape)


def test_tape_replays_in_reverse_order():
    x = t64([0.5, -1.0], True)
    with Tape() as tape:
        y = T.exp(x)
        z = T.tsum(y * y)
    assert tape.ops() == ["exp", "mul", "sum"]
    seen = []
    for rec in tape.records:
        fn = rec.backward
        rec.backward = (lambda f, op: (lambda g: (seen.append(op), f(g))[1]))(fn, rec.op)
    backward(z, tape)
    assert seen == ["sum", "mul", "exp"]
    assert np.allclose(x.grad, 2 * np.exp(2 * x.data))


def test_no_grad_records_nothing():
    x = t64([1.0], True)
    with Tape() as tape:
        with no_grad():
            y = T.exp(x)
        z = T.tsum(y)
    assert tape.ops() == []
    assert not y.requires_grad and not z.requires_grad


def test_narrow_broadcasting_only():
    a = t64(np.ones((2, 3)))
    assert (a + t64(np.ones(3))).shape == (2, 3)
    with pytest.raises(ShapeError):
        a + t64(np.ones((2, 1)))


def test_embedding_out_of_range():
    with pytest.raises(VocabularyError):
        T.embedding(t64(np.ones((4, 2))), np.array([0, 4]))


def test_finite_diff_check_contract():
    x = t64(RNG.normal(size=5))
    assert finite_diff_check(lambda v: T.tsum(v), x) < 1e-8
    assert finite_diff_check(lambda v: T.logsumexp(v, axis=-1), x, eps=1e-5) < 1e-6
    with pytest.raises(NumericError), np.errstate(divide="ignore"):
        finite_diff_check(lambda v: T.log(T.scale(T.tsum(v), 0.0)), x)


def test_finite_diff_check_detects_wrong_gradient():
    def bad_square(v):
        return T.apply_op("bad", (v,), v.data ** 2, lambda g: (g * v.data,))  # should be 2*g*v

    x = t64(RNG.normal(size=4) + 2.0)
    assert finite_diff_check(lambda v: T.tsum(bad_square(v)), x) > 0.1


# every differentiable primitive at 64-bit on N(0,1) inputs, eps = 1e-5
W = RNG.normal(size=(4, 3))
GAIN = RNG.normal(size=4)
IDS = np.array([0, 2, 2, 1])
PRIMITIVES = {
    "add": lambda x: T.tsum(T.mul(x + t64(W.T[0]), x)),
    "sub": lambda x: T.tsum(T.mul(x - t64(np.ones(4)), x)),
    "mul": lambda x: T.tsum(x * x * x),
    "matmul": lambda x: T.tsum(T.exp(T.reshape(x, (1, 4)) @ t64(W))),
    "exp": lambda x: T.tsum(T.exp(x)),
    "log": lambda x: T.tsum(T.log(T.exp(x) + t64(np.ones(4)))),
    "sigmoid": lambda x: T.tsum(T.sigmoid(x) * x),
    "silu": lambda x: T.tsum(T.silu(x) * x),
    "logsumexp": lambda x: T.logsumexp(x, axis=-1),
    "softmax": lambda x: T.tsum(T.softmax(x, axis=-1) * t64(W[:, 0])),
    "embedding": lambda x: T.tsum(T.exp(T.embedding(T.reshape(x, (2, 2)), IDS[:3] % 2))),
    "cross_entropy": lambda x: T.cross_entropy_from_logits(T.reshape(x, (2, 2)), [1, 0]),
    "rms_norm": lambda x: T.tsum(T.rms_norm(x, t64(GAIN), 1e-6) * t64(W[:, 1])),
    "swiglu": lambda x: T.tsum(T.swiglu_gate(x, T.scale(x, 0.7)) * t64(W[:, 2])),
    "mean": lambda x: T.mean(x * x),
    "transpose": lambda x: T.tsum(T.transpose(T.reshape(x, (2, 2)), (1, 0)) @ t64(W[:2, :2])),
    "repeat": lambda x: T.tsum(T.exp(T.repeat(T.reshape(x, (2, 2)), 2, axis=0))),
    "concat": lambda x: T.tsum(T.exp(T.concat([x, T.scale(x, 2.0)], axis=0))),
    "index": lambda x: T.tsum(T.exp(T.index(x, np.array([0, 0, 3])))),
    "rope": lambda x: T.tsum(T.rope(T.reshape(x, (2, 2)), [1, 3], 10.0) * t64(W[:2, :2])),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    x = t64(np.random.default_rng(sorted(PRIMITIVES).index(name)).normal(size=4))
    assert finite_diff_check(PRIMITIVES[name], x, eps=1e-5) < 1e-4


@given(st.integers(0, 2**31 - 1))
def test_random_three_deep_compositions(seed):
    rng = np.random.default_rng(seed)
    unary = [T.exp, T.sigmoid, T.silu, lambda v: T.softmax(v, axis=-1), lambda v: T.scale(v, 0.5)]
    picks = [unary[i] for i in rng.integers(0, len(unary), size=3)]
    w = t64(rng.normal(size=4))

    def f(x):
        for op in picks:
            x = op(x)
        return T.tsum(x * w)

    x0 = rng.normal(size=4)
    xt = t64(x0, True)
    with Tape() as tape:
        out = f(xt)
    backward(out, tape)
    num = oracles.central_diff(lambda a: float(f(t64(a)).data), x0)
    assert np.allclose(xt.grad, num, rtol=1e-5, atol=1e-8)
