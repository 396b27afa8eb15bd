import numpy as np
import pytest

from qctc import autograd as ag
from qctc.numerics import grad_check


def check_op(build, *shapes, seed=0, tol=1e-7):
    """Gradient of sum(build(*inputs) * w) for a fixed random w, against central differences."""
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(size=s) for s in shapes]
    sizes = [a.size for a in arrays]
    w = None

    def f(flat):
        nonlocal w
        parts, i = [], 0
        for a, n in zip(arrays, sizes):
            parts.append(ag.Tensor(flat[i : i + n].reshape(a.shape), requires_grad=True))
            i += n
        out = build(*parts)
        if w is None:
            w = np.random.default_rng(seed + 1).normal(size=out.shape)
        loss = ag.sum_all(ag.mul(out, ag.Tensor(w)))
        loss.backward()
        return float(loss.data), np.concatenate([p.grad.ravel() for p in parts])

    x0 = np.concatenate([a.ravel() for a in arrays])
    assert grad_check(f, x0) < tol


def test_add_mul_broadcast():
    check_op(lambda a, b: ag.add(a, b), (3, 4), (4,))
    check_op(lambda a, b: ag.mul(a, b), (2, 3, 4), (3, 1))


def test_matmul_batched_and_broadcast():
    check_op(lambda a, b: ag.matmul(a, b), (2, 3, 4), (4, 5))
    check_op(lambda a, b: ag.matmul(a, b), (2, 3, 4), (2, 4, 2))


def test_shape_ops():
    check_op(lambda a: ag.transpose(ag.reshape(a, (2, 3, 2)), (0, 2, 1)), (3, 4))
    check_op(lambda a: ag.scale(a, -2.5), (3,))


def test_nonlinearities():
    check_op(lambda a: ag.relu(a), (5, 4), seed=3)
    check_op(lambda a: ag.softmax_last(a), (3, 6))


def test_layer_norm():
    check_op(lambda x, g, b: ag.layer_norm(x, g, b), (3, 8), (8,), (8,), tol=1e-6)


def test_embedding_accumulates_repeated_ids():
    ids = np.array([[0, 2, 2], [1, 0, 2]])
    check_op(lambda t: ag.embedding(t, ids), (4, 3))


def test_shared_subexpression_gradient_accumulates():
    x = ag.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = ag.mul(x, x)
    z = ag.sum_all(ag.add(y, x))
    z.backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_no_grad_records_nothing():
    x = ag.Tensor(np.ones(3), requires_grad=True)
    with ag.no_grad():
        y = ag.sum_all(ag.mul(x, x))
    assert not y.requires_grad


def test_flop_counter_counts_matmuls_only():
    a = ag.Tensor(np.ones((2, 3, 4)))
    b = ag.Tensor(np.ones((4, 5)))
    with ag.FlopCounter() as fc:
        ag.relu(ag.add(ag.matmul(a, b), 1.0))
    assert fc.flops == 2 * 2 * 3 * 5 * 4
