"""Adjoint correctness of every differentiable op via central differences."""

import numpy as np
import pytest

from rdpvfi import tensor as T
from rdpvfi.tensor import NonDifferentiablePointError, Tensor

TOL = 1e-5
SEEDS = [0, 1, 2, 3, 4]


def randn(shape, seed, scale=1.0):
    rng = np.random.Generator(np.random.Philox(key=seed))
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def test_linear_map_error_below_1e9():
    x = randn((6,), seed=100)
    err = T.grad_check(lambda t: T.mul(t, 3.0), [x])
    assert err < 1e-9


@pytest.mark.parametrize("seed", SEEDS)
def test_sigmoid_grad(seed):
    x = randn((2, 3, 4, 2), seed=seed)
    assert T.grad_check(T.sigmoid, [x]) < 1e-7


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_grad(seed):
    x = randn((1, 2, 3, 5), seed=seed)
    assert T.grad_check(T.softmax_channels, [x]) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_exp_log_sqrt_div_grads(seed):
    x = randn((3, 4), seed=seed)
    pos = Tensor(np.abs(x.data) + 0.5, requires_grad=True)
    y = randn((3, 4), seed=seed + 50)
    assert T.grad_check(T.exp, [x]) < TOL
    assert T.grad_check(T.log, [pos]) < TOL
    assert T.grad_check(T.sqrt, [pos]) < TOL
    assert T.grad_check(lambda a, b: T.div(a, T.add(T.square(b), 0.3)), [x, y]) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_reductions_and_reshapes(seed):
    x = randn((2, 3, 4, 2), seed=seed)
    assert T.grad_check(lambda t: T.mean_(t, axis=(1, 2), keepdims=True), [x]) < TOL
    assert T.grad_check(lambda t: T.sum_(t, axis=3), [x]) < TOL
    assert T.grad_check(lambda t: T.transpose(T.reshape(t, (2, 12, 2, 1)), (0, 2, 1, 3)), [x]) < TOL
    assert T.grad_check(lambda t: T.flip(T.narrow(t, 1, 1, 2), 2), [x]) < TOL
    assert T.grad_check(lambda t: T.pad2d(t, (1, 0), (2, 1)), [x]) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_matmul_grads(seed):
    a = randn((4, 3), seed=seed)
    b = randn((3, 5), seed=seed + 60)
    assert T.grad_check(T.matmul, [a, b]) < TOL
    a3 = randn((2, 4, 3), seed=seed + 70)
    b3 = randn((2, 3, 2), seed=seed + 80)
    assert T.grad_check(T.matmul, [a3, b3]) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_concat_grad(seed):
    a = randn((1, 2, 2, 3), seed=seed)
    b = randn((1, 2, 2, 2), seed=seed + 90)
    assert T.grad_check(lambda u, v: T.concat([u, v], axis=3), [a, b]) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_conv2d_grad(seed):
    x = randn((2, 5, 4, 3), seed=seed)
    w = randn((3, 3, 3, 2), seed=seed + 100, scale=0.5)
    b = randn((2,), seed=seed + 110)
    for stride, padding in [(1, 1), (2, 1)]:
        err = T.grad_check(lambda a, k, c: T.conv2d(a, k, c, stride=stride, padding=padding), [x, w, b])
        assert err < TOL, (stride, padding)


@pytest.mark.parametrize("seed", SEEDS)
def test_instance_normalize_grad(seed):
    x = randn((2, 4, 4, 3), seed=seed)
    assert T.grad_check(lambda t: T.instance_normalize(t, epsilon=1e-3)[0], [x]) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_bilinear_sample_grads(seed):
    rng = np.random.Generator(np.random.Philox(key=seed + 200))
    img = randn((1, 5, 6, 2), seed=seed + 210)
    ys, xs = np.meshgrid(np.arange(4), np.arange(5), indexing="ij")
    base = np.stack([xs, ys], axis=-1).astype(np.float64)[None]
    # keep sample points interior and away from integer kinks
    coords = Tensor(base + 0.3 + 0.2 * rng.random(base.shape), requires_grad=True)
    assert T.grad_check(T.bilinear_sample, [img, coords]) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_local_correlation_grad(seed):
    f0 = randn((1, 4, 5, 3), seed=seed + 300)
    f1 = randn((1, 4, 5, 3), seed=seed + 310)
    assert T.grad_check(lambda a, b: T.local_correlation(a, b, radius=1), [f0, f1]) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_attention_grads(seed):
    x = randn((1, 4, 4, 3), seed=seed + 400)
    rng = np.random.Generator(np.random.Philox(key=seed + 410))
    mats = [Tensor(rng.standard_normal((3, 3)) * 0.7, requires_grad=True) for _ in range(4)]
    w = T.AttentionWeights(*mats)

    def fn(xx, q, k, v, o):
        return T.windowed_self_attention(xx, 2, T.AttentionWeights(q, k, v, o))

    assert T.grad_check(fn, [x] + mats) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_embedding_rows_grad(seed):
    table = randn((5, 3), seed=seed + 500)
    idx = np.array([[0, 2], [4, 2]])
    assert T.grad_check(lambda t: T.embedding_rows(t, idx), [table]) < TOL


def test_gradcheck_flags_kink():
    # a point inside the central-difference stencil of the relu kink makes
    # the eps and eps/2 estimates disagree
    x = Tensor(np.array([2e-6, 1.0]), requires_grad=True)
    with pytest.raises(NonDifferentiablePointError):
        T.grad_check(T.relu, [x], eps=1e-5)


def test_gradcheck_catches_wrong_adjoint(monkeypatch):
    orig = T.exp

    def broken_exp(a):
        out = orig(a)
        if out.requires_grad:
            node = T.Tape._active.nodes[-1]
            old = node.bwd
            node.bwd = lambda g: tuple(None if r is None else r * 1.05 for r in old(g))
        return out

    x = randn((4,), seed=900)
    monkeypatch.setattr(T, "exp", broken_exp)
    assert T.grad_check(T.exp, [x]) > 1e-3


def test_gradcheck_rejects_float32():
    x = Tensor(np.zeros(3, np.float32), requires_grad=True)
    with pytest.raises(ValueError):
        T.grad_check(T.sigmoid, [x])
