import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedload.diffcore import (
    LayoutError,
    NumericError,
    ParamTree,
    ShapeError,
    finite_difference_gradient,
    flatten,
    matmul,
    max_relative_error,
    relative_error,
    sigmoid,
    softmax,
    tanh_act,
    unflatten,
)

finite = st.floats(-700, 700, allow_nan=False)


def triple_loop(a, b):
    m, k = a.shape
    _, n = b.shape
    c = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            c[i][j] = s
    return np.array(c)


def test_matmul_identity_and_scalar():
    M = np.random.default_rng(0).normal(size=(3, 3))
    np.testing.assert_array_equal(matmul(np.eye(3), M), M)
    assert matmul([[2.0]], [[3.0]]).tolist() == [[6.0]]


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
    assert np.max(np.abs(matmul(a, b) - triple_loop(a, b))) < 1e-12


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_sigmoid_values():
    assert sigmoid(0.0) == 0.5
    assert abs(sigmoid(math.log(3)) - 0.75) < 1e-15
    x = np.linspace(-50, 50, 101)
    np.testing.assert_allclose(sigmoid(x) + sigmoid(-x), 1.0, atol=1e-15)


def test_sigmoid_saturates_without_nan():
    with np.errstate(all="raise"):
        out = sigmoid(np.array([-1e6, -800.0, 800.0, 1e6]))
    assert np.all(np.isfinite(out))
    assert out[0] == 0.0 and out[-1] == 1.0


def test_tanh_properties():
    assert tanh_act(0.0) == 0.0
    x = np.random.default_rng(2).normal(size=20)
    np.testing.assert_array_equal(tanh_act(-x), -tanh_act(x))
    assert abs(tanh_act(25.0) - 1.0) < 1e-9


def test_softmax_examples():
    np.testing.assert_allclose(softmax(np.full(5, 2.5)), np.full(5, 0.2), atol=1e-15)
    np.testing.assert_allclose(softmax(np.log([1.0, 2.0, 3.0])), [1 / 6, 2 / 6, 3 / 6], atol=1e-15)
    s = np.array([0.3, -1.2, 4.0])
    np.testing.assert_allclose(softmax(s + 17.0), softmax(s), atol=1e-15)


def test_softmax_empty():
    with pytest.raises(ValueError):
        softmax(np.array([]))


@given(arrays(np.float64, st.integers(1, 12), elements=finite))
def test_softmax_sums_to_one(x):
    p = softmax(x)
    assert p.shape == x.shape
    assert abs(p.sum() - 1.0) <= 1e-12
    assert np.all(p >= 0)


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)), elements=st.floats(-50, 50)))
def test_elementwise_ops_preserve_shape(x):
    for fn in (sigmoid, tanh_act):
        y = fn(x)
        assert y.shape == x.shape and np.all(np.isfinite(y))


def _tree(seed=0):
    rng = np.random.default_rng(seed)
    return ParamTree({"b.w": rng.normal(size=(2, 3)), "a": rng.normal(size=4), "c.x.y": rng.normal(size=(1,))})


def test_paramtree_sorted_and_immutable():
    p = _tree()
    assert list(p) == ["a", "b.w", "c.x.y"]
    with pytest.raises(ValueError):
        p["a"][0] = 1.0


def test_flatten_round_trip_bit_exact():
    p = _tree(3)
    layout, v = flatten(p)
    assert v.shape == (1, p.size)
    q = unflatten(layout, v)
    assert q == p
    for k in p:
        assert p[k].tobytes() == q[k].tobytes()


def test_flatten_empty_and_deterministic():
    layout, v = flatten(ParamTree())
    assert v.shape == (1, 0)
    a, b = _tree(4), _tree(4)
    np.testing.assert_array_equal(flatten(a)[1], flatten(b)[1])
    assert flatten(a)[0] == flatten(b)[0]


def test_unflatten_length_mismatch():
    layout, v = flatten(_tree())
    with pytest.raises(LayoutError):
        unflatten(layout, v[:, :-1])


@settings(max_examples=25)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=30))
def test_flatten_is_bijection_on_fixed_layout(vals):
    layout = ParamTree({"x": np.zeros(len(vals))}).layout()
    v = np.array(vals)
    np.testing.assert_array_equal(flatten(unflatten(layout, v))[1][0], v)


def test_fd_gradient_simple_cases():
    p = ParamTree({"theta": np.array([3.0])})
    g = finite_difference_gradient(lambda q: float(np.sum(q["theta"] ** 2)), p)
    assert abs(g["theta"][0] - 6.0) < 1e-8
    g0 = finite_difference_gradient(lambda q: 4.2, _tree())
    assert all(np.all(g0[k] == 0) for k in g0)


def test_fd_gradient_reports_non_finite_path():
    p = ParamTree({"w": np.array([0.0, 1.0])})

    def f(q):
        return float("nan") if q["w"][1] > 1.0 else 0.0

    with pytest.raises(NumericError, match=r"w\[1\]"):
        finite_difference_gradient(f, p)


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1e-10, 0.0) == pytest.approx(1e-2)
    assert max_relative_error(_tree(), _tree()) == 0.0
