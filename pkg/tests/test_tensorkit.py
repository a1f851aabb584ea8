import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from casa_lab import tensorkit as tk
from casa_lab.errors import ContractError, ShapeError
from casa_lab.tensorkit import Tensor

from conftest import fd_grad

floats = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def test_matmul_examples():
    assert np.array_equal((T([[1, 0], [0, 1]]) @ T([[3, 4], [5, 6]])).data, [[3, 4], [5, 6]])
    assert np.array_equal((T([[1, 2]]) @ T([[3], [4]])).data, [[11]])


def test_matmul_triple_loop_oracle(rng):
    a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
    ref = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            for k in range(7):
                ref[i, j] += a[i, k] * b[k, j]
    assert np.abs((T(a) @ T(b)).data - ref).max() < 1e-12


def test_matmul_shape_error_names_both():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        T(np.ones((2, 3))) @ T(np.ones((4, 5)))


def test_softmax_examples():
    assert np.allclose(tk.softmax_lastdim(T([0, 0, 0, 0])).data, 0.25)
    p = tk.softmax_lastdim(T([1000.0, 0.0])).data
    assert p[0] == 1.0 and p[1] < 1e-30
    assert np.allclose(tk.softmax_lastdim(T([1, 2, 3])).data, [0.09003057, 0.24472847, 0.66524096], atol=1e-8)


def test_softmax_infinities_and_degenerate():
    p = tk.softmax_lastdim(T([[np.inf, 0.0, -np.inf], [-np.inf, -np.inf, -np.inf]]))
    assert np.array_equal(p.data[0], [1.0, 0.0, 0.0])
    assert np.allclose(p.data[1], 1 / 3)
    assert list(p.meta["degenerate"]) == [1]


def test_layernorm_examples(rng):
    one, zero = T(np.ones(2)), T(np.zeros(2))
    assert np.array_equal(tk.layernorm(T([5.0, 5.0]), one, zero).data, [0.0, 0.0])
    assert np.allclose(tk.layernorm(T([1.0, 3.0]), one, zero, eps=0.0).data, [-1, 1])
    x = rng.standard_normal(9) * 4 + 2
    y = tk.layernorm(T(x), T(np.ones(9)), T(np.zeros(9)), eps=0.0).data
    m = sum(y) / len(y)
    v = sum((e - m) ** 2 for e in y) / len(y)
    assert abs(m) < 1e-12 and abs(v - 1) < 1e-12


def test_backward_basic():
    x = T(np.arange(6.0).reshape(2, 3), grad=True)
    tk.backward(tk.tsum(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))
    tk.backward(tk.tsum(x * x) * 0.5)
    assert np.allclose(x.grad, x.data)


def test_backward_requires_scalar():
    with pytest.raises(ContractError):
        tk.backward(T(np.ones(3), grad=True) * 2.0)


@given(hnp.arrays(np.float64, (3, 4), elements=floats), hnp.arrays(np.float64, (4, 2), elements=floats))
def test_matmul_gelu_grad_matches_fd(a, b):
    A, B = T(a.copy(), True), T(b.copy(), True)
    w = np.linspace(-1, 1, 6).reshape(3, 2)

    def f():
        return float(tk.tsum(tk.gelu(A @ B) * T(w)).data)

    tk.backward(tk.tsum(tk.gelu(A @ B) * T(w)))
    assert np.allclose(A.grad, fd_grad(f, A.data), atol=1e-6)
    assert np.allclose(B.grad, fd_grad(f, B.data), atol=1e-6)


@given(hnp.arrays(np.float64, (2, 5), elements=floats))
def test_softmax_layernorm_grad_matches_fd(x):
    X = T(x.copy(), True)
    g, b = T(np.linspace(0.5, 1.5, 5), True), T(np.linspace(-1, 1, 5), True)
    w = np.arange(10.0).reshape(2, 5) / 10

    def loss():
        return tk.tsum(tk.softmax_lastdim(tk.layernorm(X, g, b)) * T(w))

    tk.backward(loss())
    for t in (X, g, b):
        assert np.allclose(t.grad, fd_grad(lambda: float(loss().data), t.data), atol=1e-6)


def test_take_scatter_concat_rope_grads(rng):
    x = T(rng.standard_normal((4, 2, 4)), True)
    y = T(rng.standard_normal((3, 2, 4)), True)
    ang = rng.standard_normal((7, 1, 2))
    idx = np.array([0, 2, 2, 5])

    def loss():
        z = tk.rotate_pairs(tk.concat([x, y]), np.cos(ang), np.sin(ang))
        z = tk.scatter_rows(tk.reshape(tk.take(z, idx), (4, 8)), np.array([1, 3, 4, 6]), 8)
        return tk.tsum(tk.tanh(z) * T(np.arange(64.0).reshape(8, 8) / 64))

    tk.backward(loss())
    for t in (x, y):
        assert np.allclose(t.grad, fd_grad(lambda: float(loss().data), t.data), atol=1e-6)


def test_cross_entropy_grad(rng):
    lg = T(rng.standard_normal((4, 6)), True)
    tgt = np.array([0, 5, 2, 2])
    tk.backward(tk.cross_entropy(lg, tgt))
    assert np.allclose(lg.grad, fd_grad(lambda: float(tk.cross_entropy(lg, tgt).data), lg.data), atol=1e-7)


def test_masked_fill_and_mul_broadcast(rng):
    a = T(rng.standard_normal((2, 3)), True)
    g = T(np.array([0.3]), True)
    m = np.array([[True, False, False], [False, False, True]])

    def loss():
        return tk.tsum(tk.softmax_lastdim(tk.masked_fill(a * g, m, -np.inf)) * T(np.arange(6.0).reshape(2, 3)))

    tk.backward(loss())
    assert np.allclose(a.grad, fd_grad(lambda: float(loss().data), a.data), atol=1e-7)
    assert np.allclose(g.grad, fd_grad(lambda: float(loss().data), g.data), atol=1e-7)


def test_no_grad_builds_no_graph():
    x = T(np.ones(3), True)
    with tk.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_mac_counter():
    with tk.count_macs() as c:
        with tk.mac_tag("a"):
            T(np.ones((2, 3))) @ T(np.ones((3, 4)))
        T(np.ones((5, 2, 3))) @ T(np.ones((3, 1)))
    assert c.by_tag == {"a": 24, "other": 30} and c.total == 54


def test_rng_is_reproducible():
    a = tk.make_rng(7).standard_normal(5)
    b = tk.make_rng(7).standard_normal(5)
    assert np.array_equal(a, b) and not np.array_equal(a, tk.make_rng(8).standard_normal(5))
