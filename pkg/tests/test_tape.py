"""Every tape operation's adjoint is checked against central differences."""

import numpy as np
import pytest
import scipy.sparse as sp

from gomesh import tape
from gomesh.tape import Tensor


def numeric_grad(f, x, h=1e-6):
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = f(x)
        flat[i] = keep - h
        fm = f(x)
        flat[i] = keep
        gflat[i] = (fp - fm) / (2 * h)
    return g


def check_unary(op_t, op_np, x, tol=1e-6):
    t = Tensor(x, requires_grad=True)
    w = np.random.default_rng(0).random(np.asarray(op_np(x)).shape)
    out = tape.sum_(tape.mul(op_t(t), Tensor(w)))
    out.backward()
    num = numeric_grad(lambda a: float((op_np(a) * w).sum()), np.array(x, dtype=float))
    assert np.allclose(t.grad, num, rtol=tol, atol=tol), f"{op_t}: {t.grad} vs {num}"


def test_elementwise_ops():
    rng = np.random.default_rng(1)
    x = rng.random((3, 4)) + 0.5
    check_unary(tape.exp, np.exp, x)
    check_unary(tape.log, np.log, x)
    check_unary(tape.sin, np.sin, x)
    check_unary(tape.cos, np.cos, x)
    check_unary(tape.sqrt, np.sqrt, x)
    check_unary(tape.sigmoid, lambda a: 1 / (1 + np.exp(-a)), x)
    check_unary(tape.relu, lambda a: np.maximum(a, 0), rng.standard_normal((3, 4)))
    check_unary(tape.absolute, np.abs, rng.standard_normal((3, 4)) + 0.1)
    check_unary(lambda t: tape.power(t, 3), lambda a: a**3, x)
    check_unary(tape.arccos, np.arccos, rng.random((3, 4)) * 1.6 - 0.8)


def test_binary_ops_broadcasting():
    rng = np.random.default_rng(2)
    a = rng.random((3, 4)) + 0.5
    b = rng.random((1, 4)) + 0.5
    w = rng.random((3, 4))
    for op_t, op_np in [
        (tape.add, np.add),
        (tape.sub, np.subtract),
        (tape.mul, np.multiply),
        (tape.div, np.divide),
        (tape.maximum, np.maximum),
        (tape.minimum, np.minimum),
    ]:
        ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
        out = tape.sum_(tape.mul(op_t(ta, tb), Tensor(w)))
        out.backward()
        na = numeric_grad(lambda x: float((op_np(x, b) * w).sum()), a.copy())
        nb = numeric_grad(lambda x: float((op_np(a, x) * w).sum()), b.copy())
        assert np.allclose(ta.grad, na, atol=1e-6)
        assert np.allclose(tb.grad, nb, atol=1e-6)


def test_matmul_batched_gradients():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((5, 3, 4))
    b = rng.standard_normal((4, 2))
    w = rng.random((5, 3, 2))
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    out = tape.sum_(tape.mul(tape.matmul(ta, tb), Tensor(w)))
    out.backward()
    na = numeric_grad(lambda x: float(((x @ b) * w).sum()), a.copy())
    nb = numeric_grad(lambda x: float(((a @ x) * w).sum()), b.copy())
    assert np.allclose(ta.grad, na, atol=1e-6)
    assert np.allclose(tb.grad, nb, atol=1e-6)


def test_atan2_gradient():
    rng = np.random.default_rng(4)
    y = rng.standard_normal(6) + 2.0
    x = rng.standard_normal(6) + 2.0
    ty, tx = Tensor(y, requires_grad=True), Tensor(x, requires_grad=True)
    tape.sum_(tape.arctan2(ty, tx)).backward()
    ny = numeric_grad(lambda a: float(np.arctan2(a, x).sum()), y.copy())
    nx = numeric_grad(lambda a: float(np.arctan2(y, a).sum()), x.copy())
    assert np.allclose(ty.grad, ny, atol=1e-6)
    assert np.allclose(tx.grad, nx, atol=1e-6)


def test_atan2_zero_zero_defined():
    t = tape.arctan2(Tensor(0.0, requires_grad=True), Tensor(0.0, requires_grad=True))
    assert t.data == 0.0
    t.backward()  # gradient defined (zero), no nan


def test_reductions_and_shapes():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((4, 5))
    t = Tensor(x, requires_grad=True)
    out = tape.sum_(tape.mean_(t, axis=0))
    out.backward()
    assert np.allclose(t.grad, np.full_like(x, 1 / 4))

    t = Tensor(x, requires_grad=True)
    tape.sum_(tape.transpose(tape.reshape(t, (2, 10)), (1, 0))).backward()
    assert np.allclose(t.grad, np.ones_like(x))


def test_take_gather_accumulates():
    x = np.arange(5.0)
    t = Tensor(x, requires_grad=True)
    idx = np.array([0, 0, 3])
    tape.sum_(tape.take(t, idx)).backward()
    assert np.allclose(t.grad, [2, 0, 0, 1, 0])


def test_concat_stack_where_cross():
    rng = np.random.default_rng(6)
    a = rng.standard_normal((3, 3))
    b = rng.standard_normal((3, 3))
    w = rng.random((3, 3))
    cond = rng.random((3, 3)) > 0.5

    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    tape.sum_(tape.mul(tape.where(cond, ta, tb), Tensor(w))).backward()
    assert np.allclose(ta.grad, np.where(cond, w, 0))
    assert np.allclose(tb.grad, np.where(cond, 0, w))

    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    w2 = rng.random((3, 3))
    out = tape.sum_(tape.mul(tape.cross3(ta, tb), Tensor(w2)))
    out.backward()
    na = numeric_grad(lambda x: float((np.cross(x, b) * w2).sum()), a.copy())
    nb = numeric_grad(lambda x: float((np.cross(a, x) * w2).sum()), b.copy())
    assert np.allclose(ta.grad, na, atol=1e-6)
    assert np.allclose(tb.grad, nb, atol=1e-6)

    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    tape.sum_(tape.concat([ta, tb], axis=0)).backward()
    assert np.allclose(ta.grad, 1.0) and np.allclose(tb.grad, 1.0)

    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    tape.sum_(tape.stack([ta, tb], axis=1)).backward()
    assert np.allclose(ta.grad, 1.0) and np.allclose(tb.grad, 1.0)


def test_sparse_matmul_gradient():
    rng = np.random.default_rng(7)
    mat = sp.random(6, 5, density=0.5, random_state=3, format="csr")
    x = rng.standard_normal((5, 3))
    w = rng.random((6, 3))
    t = Tensor(x, requires_grad=True)
    tape.sum_(tape.mul(tape.sparse_matmul(mat, t), Tensor(w))).backward()
    assert np.allclose(t.grad, mat.T @ w)


def test_diamond_graph_accumulates():
    t = Tensor(np.array([2.0]), requires_grad=True)
    a = tape.mul(t, 3.0)
    out = tape.sum_(tape.add(a, tape.mul(a, a)))  # 3x + 9x^2
    out.backward()
    assert np.allclose(t.grad, [3 + 18 * 2.0])


def test_backward_requires_scalar():
    t = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        tape.mul(t, 2.0).backward()


def test_no_graph_without_grad():
    out = tape.add(Tensor(np.ones(3)), Tensor(np.ones(3)))
    assert out._vjp is None and out._parents == ()
