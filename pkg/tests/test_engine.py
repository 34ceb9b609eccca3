"""Tests for the autodiff engine."""

import numpy as np
import pytest

from hierreg.engine import Tensor, atan2, concat, softmax
from hierreg.nn import gradcheck

rng = np.random.default_rng(7)


def test_add_mul_broadcast_grads():
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4,)), requires_grad=True)
    out = (a * b + b).sum()
    out.backward()
    np.testing.assert_allclose(a.grad, np.broadcast_to(b.data, (3, 4)))
    np.testing.assert_allclose(b.grad, a.data.sum(axis=0) + 3.0)


def test_matmul_matches_finite_differences():
    a = rng.normal(size=(5, 4, 3))
    w = rng.normal(size=(3, 2))
    rep = gradcheck(lambda x, y: ((x @ y) ** 2).sum(), [a, w], tol=1e-6)
    assert rep.passed, rep.max_rel_err


def test_getitem_fancy_index_accumulates():
    a = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
    idx = np.array([0, 0, 2])
    out = a[idx].sum()
    out.backward()
    expected = np.zeros((4, 3))
    expected[0] = 2.0
    expected[2] = 1.0
    np.testing.assert_allclose(a.grad, expected)


def test_max_routes_gradient_to_first_argmax():
    a = Tensor(np.array([[1.0, 3.0, 3.0]]), requires_grad=True)
    a.max(axis=1).sum().backward()
    np.testing.assert_allclose(a.grad, [[0.0, 1.0, 0.0]])


def test_softmax_sums_to_one_and_shift_invariant():
    x = rng.normal(size=(6, 5))
    s = softmax(Tensor(x), axis=1)
    np.testing.assert_allclose(s.data.sum(axis=1), 1.0, atol=1e-12)
    s2 = softmax(Tensor(x + 100.0), axis=1)
    np.testing.assert_allclose(s.data, s2.data, atol=1e-12)


def test_concat_backward_splits():
    a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    concat([a, b], axis=1).sum().backward()
    np.testing.assert_allclose(a.grad, np.ones((2, 3)))
    np.testing.assert_allclose(b.grad, np.ones((2, 2)))


@pytest.mark.parametrize("fn", [
    lambda x: x.relu().sum(),
    lambda x: x.sigmoid().sum(),
    lambda x: x.softplus().sum(),
    lambda x: (x ** 3).sum(),
    lambda x: x.cos().sum() + x.sin().sum(),
    lambda x: (x * x).sum(axis=0).sqrt().sum(),
    lambda x: x.norm(axis=1).sum(),
    lambda x: softmax(x, axis=1).max(axis=1).sum(),
])
def test_elementwise_ops_gradcheck(fn):
    x = rng.normal(size=(4, 3)) + 0.1
    rep = gradcheck(fn, [x], tol=1e-5)
    assert rep.passed, rep.max_rel_err


def test_atan2_gradcheck():
    y = rng.normal(size=(5,)) + 2.0
    x = rng.normal(size=(5,)) + 2.0
    rep = gradcheck(lambda a, b: atan2(a, b).sum(), [y, x], tol=1e-6)
    assert rep.passed, rep.max_rel_err


def test_no_graph_without_requires_grad():
    a = Tensor(np.ones(3))
    out = (a * 2.0).sum()
    assert out._vjp is None and out._parents == ()


def test_non_finite_data_rejected():
    with pytest.raises(ValueError):
        Tensor([np.nan, 1.0])
