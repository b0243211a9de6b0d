import numpy as np
from numpy.testing import assert_allclose

from conftest import numeric_grad
from tensor import Tensor, concat, gather_rows, no_grad, parameter, take


def check_grad(build, *params):
    for p in params:
        p.grad = None
    out = build()
    out.backward()
    for p in params:
        def value():
            with no_grad():
                return float(build().data)
        assert_allclose(p.grad, numeric_grad(value, p.data, h=1e-6), rtol=1e-6, atol=1e-9)


def test_broadcast_add_and_mul_gradients():
    rng = np.random.default_rng(0)
    a = parameter(rng.normal(size=(3, 4)))
    b = parameter(rng.normal(size=(4,)))
    check_grad(lambda: ((a + b) * (a - b) * 0.5).sum(), a, b)


def test_batched_matmul_gradient():
    rng = np.random.default_rng(1)
    x = parameter(rng.normal(size=(2, 3, 4)))
    w = parameter(rng.normal(size=(4, 5)))
    check_grad(lambda: ((x @ w).tanh() ** 2).mean(), x, w)


def test_softmax_log_softmax_and_pick_gradients():
    rng = np.random.default_rng(2)
    z = parameter(rng.normal(size=(3, 5)))
    weights = rng.normal(size=(3, 5))
    check_grad(lambda: (z.softmax(axis=-1) * weights).sum(), z)
    check_grad(lambda: z.log_softmax(axis=-1).pick(np.array([0, 4, 2])).sum(), z)


def test_gelu_exp_log_gradients():
    rng = np.random.default_rng(3)
    z = parameter(rng.uniform(0.5, 2.0, size=(4,)))
    check_grad(lambda: (z.gelu() + z.exp().log() * z).sum(), z)


def test_take_accumulates_repeated_rows():
    table = parameter(np.arange(15, dtype=float).reshape(5, 3))
    out = take(table, np.array([[0, 1], [1, 1]]))
    out.sum().backward()
    assert_allclose(table.grad[1], [3.0, 3.0, 3.0])
    assert_allclose(table.grad[0], [1.0, 1.0, 1.0])
    assert np.all(table.grad[2:] == 0)


def test_gather_rows_concat_and_getitem_gradients():
    rng = np.random.default_rng(4)
    a = parameter(rng.normal(size=(2, 2, 3)))
    b = parameter(rng.normal(size=(2, 1, 3)))
    index = np.array([[2, 0, 1], [1, 1, 2]])
    check_grad(lambda: (gather_rows(concat([a, b], axis=1), index) ** 2).sum(), a, b)
    check_grad(lambda: (a[:, 1] * a[:, 0]).sum(), a)


def test_masked_fill_blocks_gradient_and_softmax_ignores_masked():
    z = parameter(np.array([[1.0, 2.0, 3.0]]))
    mask = np.array([[False, True, False]])
    probs = z.masked_fill(mask).softmax(axis=-1)
    assert probs.data[0, 1] == 0.0
    assert abs(probs.data.sum() - 1.0) < 1e-12
    probs.pick(np.array([2])).sum().backward()
    assert z.grad[0, 1] == 0.0


def test_reshape_transpose_roundtrip_gradient():
    rng = np.random.default_rng(5)
    x = parameter(rng.normal(size=(2, 3, 4)))
    check_grad(lambda: (x.reshape(2, 12).reshape(2, 3, 4).transpose(0, 2, 1) ** 3).sum(), x)


def test_no_grad_builds_no_graph():
    x = parameter(np.ones(3))
    with no_grad():
        y = (x * 2).sum()
    assert not y.requires_grad
    assert y._prev == ()


def test_numpy_left_operand_returns_tensor():
    x = parameter(np.ones((2, 2)))
    out = np.full((2, 1), 3.0) * x + np.zeros((2, 2))
    assert isinstance(out, Tensor)
    out.sum().backward()
    assert_allclose(x.grad, np.full((2, 2), 3.0))
