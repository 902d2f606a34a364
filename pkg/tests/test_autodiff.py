import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from streamtag import autodiff as ad
from streamtag.autodiff import Tensor
from streamtag.errors import ContractViolation

F32 = {"dtype": np.float32, "elements": st.floats(-3, 3, width=32)}


def numeric_grad(fn, x: np.ndarray, eps=1e-3):
    """Central differences of a scalar-valued fn at every coordinate of x."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = fn()
        flat[i] = orig - eps
        fm = fn()
        flat[i] = orig
        g.reshape(-1)[i] = (fp - fm) / (2 * eps)
    return g


def check_grads(build, *arrays, atol=2e-2):
    """build(*tensors) -> scalar Tensor; compares backward to differences."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    loss = build(*tensors)
    loss.backward()
    for t, a in zip(tensors, arrays):
        def scalar():
            with ad.no_grad():
                fresh = [Tensor(arr) for arr in arrays]
                return float(build(*fresh).data)
        num = numeric_grad(scalar, a)
        assert t.grad is not None
        np.testing.assert_allclose(t.grad, num, atol=atol, rtol=1e-2)


def test_add_mul_broadcast_backward(rng):
    a = rng.standard_normal((3, 4)).astype(np.float32)
    b = rng.standard_normal((4,)).astype(np.float32)
    check_grads(lambda x, y: ((x + y) * (x * y)).sum(), a, b)


def test_matmul_forward_matches_loop_oracle(rng):
    a = rng.standard_normal((3, 4)).astype(np.float32)
    b = rng.standard_normal((4, 5)).astype(np.float32)
    out = ad.matmul(Tensor(a), Tensor(b)).data
    expect = np.zeros((3, 5), dtype=np.float64)
    for i in range(3):
        for j in range(5):
            for k in range(4):
                expect[i, j] += float(a[i, k]) * float(b[k, j])
    np.testing.assert_allclose(out, expect, atol=1e-6)


def test_matmul_backward_batched(rng):
    a = rng.standard_normal((2, 3, 4)).astype(np.float32)
    w = rng.standard_normal((4, 5)).astype(np.float32)
    check_grads(lambda x, y: ad.matmul(x, y).sum(), a, w)


def test_matmul_shape_mismatch():
    with pytest.raises(ContractViolation):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


@given(hnp.arrays(shape=st.tuples(st.integers(1, 5), st.integers(2, 8)), **F32))
def test_softmax_rows_sum_to_one(x):
    y = ad.softmax(Tensor(x), axis=-1).data
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)
    assert (y >= 0).all()


def test_softmax_backward(rng):
    x = rng.standard_normal((3, 5)).astype(np.float32)
    w = rng.standard_normal((3, 5)).astype(np.float32)
    check_grads(lambda t: (ad.softmax(t, axis=-1) * Tensor(w)).sum(), x)


def test_shape_ops_backward(rng):
    x = rng.standard_normal((2, 3, 4)).astype(np.float32)

    def build(t):
        y = ad.swapaxes(ad.reshape(t, (6, 4)), 0, 1)  # [4, 6]
        y = ad.concat([y, y], axis=0)  # [8, 6]
        return (y[1:5, ::2] * y[1:5, ::2]).sum()

    check_grads(build, x)


def test_take_and_masked_fill(rng):
    x = rng.standard_normal((4, 4)).astype(np.float32)
    mask = np.triu(np.ones((4, 4), dtype=bool), k=1)

    def build(t):
        filled = ad.masked_fill(t, mask, -np.inf)
        return ad.softmax(filled, axis=-1).sum()

    check_grads(build, x)
    out = ad.masked_fill(Tensor(x), mask, -np.inf).data
    assert np.isneginf(out[mask]).all()
    np.testing.assert_array_equal(out[~mask], x[~mask])


def test_embedding_backward_scatter(rng):
    table = rng.standard_normal((6, 3)).astype(np.float32)
    ids = np.array([[0, 2, 2], [5, 0, 1]])
    t = Tensor(table, requires_grad=True)
    out = ad.embedding(t, ids)
    np.testing.assert_array_equal(out.data, table[ids])
    out.backward(np.ones_like(out.data))
    counts = np.zeros(6)
    for i in ids.reshape(-1):
        counts[i] += 1
    np.testing.assert_allclose(t.grad, counts[:, None] * np.ones((6, 3)))


def test_reductions_and_activations(rng):
    x = rng.standard_normal((3, 4)).astype(np.float32)
    check_grads(lambda t: (t.tanh() + t.sigmoid() + t.relu()).mean(), x)
    check_grads(lambda t: ((t * t).sum(axis=1) + 1.0).log().sum(), x)
    check_grads(lambda t: (t * 0.1).exp().sum(axis=0).sum(), x)


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with ad.no_grad():
        y = x + x
    assert not y.requires_grad and y._backward is None


def test_detach_blocks_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    y = (x.detach() * 2.0).sum()
    z = (x * 1.0).sum() + y
    z.backward()
    np.testing.assert_array_equal(x.grad, np.ones(3))


def test_grad_accumulates_across_uses():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * x  # dy/dx = 2x through both branches
    y.backward()
    np.testing.assert_allclose(x.grad, [4.0])
