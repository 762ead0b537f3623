import numpy as np
import pytest

from combinfer import autodiff as ad
from combinfer.errors import NonScalarRoot
from gradcheck import max_relative_error

gen = np.random.default_rng(0)


def param(*shape, low=-1.0, high=1.0):
    return ad.Parameter(gen.uniform(low, high, size=shape))


A = param(3, 4)
B = param(3, 4)
POS = param(3, 4, low=0.5, high=2.0)
M = param(4, 2)
IDX = np.array([[0, 3, 1, 1], [2, 2, 0, 3], [1, 0, 0, 2]])

# Each case is a scalar function of parameters; weights keep sums non-degenerate.
W = gen.normal(size=(3, 4))
W5 = gen.normal(size=(5, 4))
CASES = {
    "add": (lambda: ad.sum((A + B) * W), [A, B]),
    "sub": (lambda: ad.sum((A - B) * W), [A, B]),
    "mul": (lambda: ad.sum(A * B * W), [A, B]),
    "div": (lambda: ad.sum(A / POS * W), [A, POS]),
    "neg": (lambda: ad.sum(-A * W), [A]),
    "exp": (lambda: ad.sum(ad.exp(A) * W), [A]),
    "log": (lambda: ad.sum(ad.log(POS) * W), [POS]),
    "pow": (lambda: ad.sum(ad.pow(POS, 2.5) * W), [POS]),
    "relu": (lambda: ad.sum(ad.relu(A) * W), [A]),
    "sigmoid": (lambda: ad.sum(ad.sigmoid(A) * W), [A]),
    "softplus": (lambda: ad.sum(ad.softplus(A) * W), [A]),
    "where": (lambda: ad.sum(ad.where(W > 0, A, B * B) * W), [A, B]),
    "mean": (lambda: ad.mean(ad.mean(A * W, axis=0) * ad.mean(B, axis=0)), [A, B]),
    "sum_axis": (lambda: ad.sum(ad.sum(A, axis=1) * ad.sum(B * W, axis=1)), [A, B]),
    "logsumexp": (lambda: ad.sum(ad.logsumexp(A * 3.0, axis=1) * W[:, 0]), [A]),
    "log_softmax": (lambda: ad.sum(ad.log_softmax(A, axis=-1) * W), [A]),
    "softmax": (lambda: ad.sum(ad.softmax(A, axis=0) * W), [A]),
    "matmul": (lambda: ad.sum(ad.matmul(A, M) * W[:, :2]), [A, M]),
    "reshape": (lambda: ad.sum(ad.reshape(A, (4, 3)) * W.reshape(4, 3)), [A]),
    "broadcast_to": (lambda: ad.sum(ad.broadcast_to(A[0], (5, 4)) * W5), [A]),
    "getitem": (lambda: ad.sum(ad.getitem(A, (slice(None), [0, 0, 2])) * W[:, :3]), [A]),
    "stack": (lambda: ad.sum(ad.stack([A, B], axis=1) * np.stack([W, -W], axis=1)), [A, B]),
    "concatenate": (lambda: ad.sum(ad.concatenate([A, B], axis=-1) * np.concatenate([W, W * 2], -1)), [A, B]),
    "take_last": (lambda: ad.sum(ad.take_last(A, IDX[:, :1]) * W[:, 0:1]), [A]),
    "reindex": (lambda: ad.sum(ad.reindex(A, np.array([2, 0, 0])) * W), [A]),
    "detach": (lambda: ad.sum(ad.detach(A) * B * W), [B]),
    "mlp": (lambda: ad.sum(ad.softplus(ad.matmul(ad.relu(A), M)) * W[:, :2]), [A, M]),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_op_matches_finite_differences(name):
    fn, params = CASES[name]
    assert max_relative_error(fn, params) <= 1e-4


def test_examples():
    x = ad.Parameter(np.array(3.0))
    _, (g,) = ad.grad(lambda: x * x, [x])
    assert g == pytest.approx(6.0)

    ab = ad.Parameter(np.array([0.3, -1.2]))
    _, (g,) = ad.grad(lambda: ad.logsumexp(ab), [ab])
    np.testing.assert_allclose(g, np.exp(ab.data) / np.exp(ab.data).sum())

    x = ad.Parameter(np.array(2.0))
    _, (g,) = ad.grad(lambda: ad.detach(x) * x, [x])
    assert g == pytest.approx(2.0)

    p = ad.Parameter(np.zeros(3))
    _, (g,) = ad.grad(lambda: ad.sum(p), [p])
    np.testing.assert_array_equal(g, [1.0, 1.0, 1.0])


def test_backward_accumulates():
    p = ad.Parameter(np.array([1.0, 2.0]))
    root = ad.sum(p * p)
    ad.backward(root)
    ad.backward(root)
    np.testing.assert_allclose(p.grad, [4.0, 8.0])


def test_non_scalar_root():
    p = ad.Parameter(np.ones(2))
    with pytest.raises(NonScalarRoot):
        ad.backward(p * 2.0)


def test_no_grad_builds_no_graph():
    p = ad.Parameter(np.ones(2))
    with ad.no_grad():
        out = ad.sum(p * 3.0)
    assert not out.requires_grad
    out = ad.sum(p * 3.0)
    assert out.requires_grad


def test_negative_infinity_does_not_poison_gradients():
    p = ad.Parameter(np.array([0.5, 0.0]))
    # log(0) is -inf; its gradient path must not leak nan into the finite entry.
    out = ad.logsumexp(ad.log(p))
    ad.backward(out)
    assert np.all(np.isfinite(p.grad))
