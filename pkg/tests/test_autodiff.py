import math

import numpy as np
import pytest

from ecgtransfer import autodiff as ad
from ecgtransfer.autodiff import Tape, Tensor, gradcheck
from ecgtransfer.errors import DegenerateBatch, ShapeMismatch
from ecgtransfer.prng import Prng

SEEDS = range(20)
TOL = 1e-4


def bn_train(x, g, b):
    c = x.shape[1]
    return ad.batchnorm1d(x, g, b, np.zeros(c), np.ones(c), training=True, update_stats=False)


def bn_eval(x, g, b):
    c = x.shape[1]
    rm = np.linspace(-0.3, 0.3, c)
    rv = np.linspace(0.5, 2.0, c)
    return ad.batchnorm1d(x, g, b, rm, rv, training=False)


PRIMITIVES = {
    "conv1d": (lambda x, w, b: ad.conv1d(x, w, b, stride=1, pad=1), [(2, 3, 9), (4, 3, 3), (4,)]),
    "conv1d_strided": (lambda x, w, b: ad.conv1d(x, w, b, stride=2, pad=3), [(2, 2, 16), (3, 2, 7), (3,)]),
    "conv1d_1x1": (lambda x, w: ad.conv1d(x, w), [(2, 4, 8), (3, 4, 1)]),
    "batchnorm_train": (bn_train, [(2, 3, 8), (3,), (3,)]),
    "batchnorm_eval": (bn_eval, [(2, 3, 8), (3,), (3,)]),
    "relu": (ad.relu, [(2, 3, 8)]),
    "sigmoid": (ad.sigmoid, [(2, 3, 8)]),
    "maxpool": (lambda x: ad.maxpool1d(x, 3, 2, 1), [(2, 3, 11)]),
    "avgpool": (lambda x: ad.avgpool1d(x, 2, 2), [(2, 4, 9)]),
    "adaptive_avg": (ad.adaptive_avg_pool1d, [(2, 4, 7)]),
    "flatten": (ad.flatten, [(2, 3, 5)]),
    "concat": (lambda a, b: ad.concat_channels([a, b]), [(2, 1, 6), (2, 3, 6)]),
    "linear": (ad.linear, [(2, 5), (3, 5), (3,)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradcheck(name):
    op, shapes = PRIMITIVES[name]
    worst = max(gradcheck(op, shapes, seed=s) for s in SEEDS)
    assert worst < TOL, f"{name}: {worst:.3e}"


@pytest.mark.parametrize("pos_weight", [1.0, 35.76])
def test_bce_gradcheck(pos_weight):
    for s in SEEDS:
        y = (Prng(100 + s).uniform(6) < 0.5).astype(float)
        y[0], y[1] = 0.0, 1.0
        err = gradcheck(lambda z: ad.bce_with_logits(z, y, pos_weight), [(6, 1)], seed=s)
        assert err < TOL


def _chain_eval(x, w, b, g, beta, lw, lb, y):
    h = ad.conv1d(x, w, b, stride=1, pad=1)
    h = ad.relu(bn_eval(h, g, beta))
    h = ad.flatten(ad.maxpool1d(h, 2, 2))
    return ad.bce_with_logits(ad.linear(h, lw, lb), y, 2.5)


def test_chain_conv_bn_relu_pool_linear_bce():
    y = np.array([[1.0], [0.0]])
    shapes = [(2, 2, 8), (3, 2, 3), (3,), (3,), (3,), (1, 12), (1,)]
    worst = max(gradcheck(lambda *t: _chain_eval(*t, y), shapes, seed=s) for s in SEEDS)
    assert worst < 1e-3


def _dense_chain(x, w0, g0, b0, g1, b1, w1, g2, b2, w2, gt, bt, wt, gh, bh, lw, lb, y):
    # stem
    h = ad.conv1d(x, w0, stride=2, pad=3)
    h = ad.maxpool1d(ad.relu(bn_train(h, g0, b0)), 3, 2, 1)
    # one dense layer (bottleneck then 3-tap conv), concatenated
    d = ad.conv1d(ad.relu(bn_train(h, g1, b1)), w1)
    d = ad.conv1d(ad.relu(bn_train(d, g2, b2)), w2, pad=1)
    h = ad.concat_channels([h, d])
    # transition
    h = ad.avgpool1d(ad.conv1d(ad.relu(bn_train(h, gt, bt)), wt), 2, 2)
    # head
    h = ad.flatten(ad.adaptive_avg_pool1d(ad.relu(bn_train(h, gh, bh))))
    return ad.bce_with_logits(ad.linear(h, lw, lb), y, 3.0)


def test_chain_stem_dense_transition_head():
    y = np.array([[1.0], [0.0]])
    shapes = [(2, 2, 16), (2, 2, 7), (2,), (2,), (2,), (2,), (4, 2, 1), (4,), (4,), (2, 4, 3),
              (4,), (4,), (2, 4, 1), (2,), (2,), (1, 2), (1,)]
    worst = max(gradcheck(lambda *t: _dense_chain(*t, y), shapes, seed=s) for s in SEEDS)
    assert worst < 1e-3


# -- forward values

def test_conv_examples():
    x = Tensor(np.array([[[1.0, 2.0, 3.0]]]))
    assert ad.conv1d(x, np.ones((1, 1, 2))).data.tolist() == [[[3.0, 5.0]]]
    x = np.random.default_rng(0).standard_normal((2, 3, 7))
    eye = np.eye(3)[:, :, None]
    assert np.array_equal(ad.conv1d(x, eye, np.zeros(3)).data, x)


def test_conv_output_length():
    for length, k, s, p in [(16, 7, 2, 3), (5000, 7, 2, 3), (9, 3, 1, 1), (10, 4, 3, 0)]:
        out = ad.conv1d(np.zeros((1, 1, length)), np.zeros((2, 1, k)), stride=s, pad=p)
        assert out.shape == (1, 2, (length + 2 * p - k) // s + 1)


def test_shape_errors():
    with pytest.raises(ShapeMismatch):
        ad.conv1d(np.zeros((1, 2, 5)), np.zeros((1, 3, 3)))
    with pytest.raises(ShapeMismatch):
        ad.conv1d(np.zeros((1, 1, 2)), np.zeros((1, 1, 3)))
    with pytest.raises(ShapeMismatch):
        ad.concat_channels([np.zeros((1, 1, 4)), np.zeros((1, 1, 5))])
    with pytest.raises(ShapeMismatch):
        ad.linear(np.zeros((2, 3)), np.zeros((1, 4)))
    with pytest.raises(DegenerateBatch):
        bn_train(Tensor(np.zeros((1, 2, 1))), np.ones(2), np.zeros(2))


def test_batchnorm_train_stats():
    x = np.random.default_rng(3).normal(4.0, 3.0, (4, 3, 50))
    out = bn_train(Tensor(x), np.ones(3), np.zeros(3)).data
    assert np.max(np.abs(out.mean(axis=(0, 2)))) < 1e-5
    assert np.max(np.abs(out.std(axis=(0, 2)) - 1)) < 1e-4


def test_batchnorm_running_update():
    x = np.random.default_rng(4).normal(2.0, 3.0, (4, 2, 25))
    rm, rv = np.zeros(2), np.ones(2)
    ad.batchnorm1d(x, np.ones(2), np.zeros(2), rm, rv, training=True)
    assert np.allclose(rm, 0.1 * x.mean(axis=(0, 2)))
    assert np.allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2), ddof=1))


def test_batchnorm_eval_identity():
    x = np.random.default_rng(5).standard_normal((2, 3, 6))
    out = ad.batchnorm1d(x, np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), training=False).data
    assert np.allclose(out, x / math.sqrt(1 + 1e-5), atol=1e-12)


def test_activation_values():
    assert ad.relu(np.array([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]
    assert float(ad.sigmoid(np.array([0.0])).data[0]) == 0.5
    assert np.all(np.isfinite(ad.sigmoid(np.array([-800.0, 800.0])).data))


def test_relu_grad_at_zero_is_zero():
    x = Tensor(np.array([0.0, 1.0, -1.0]), requires_grad=True)
    with Tape() as t:
        y = ad.relu(x)
    t.backward(y, np.ones(3))
    assert x.grad.tolist() == [0.0, 1.0, 0.0]


def test_pool_values_and_ties():
    assert ad.maxpool1d(np.array([[[1.0, 3.0, 2.0]]]), 3, 1).data.tolist() == [[[3.0]]]
    assert ad.avgpool1d(np.array([[[1.0, 3.0]]])).data.tolist() == [[[2.0]]]
    x = Tensor(np.array([[[2.0, 2.0, 1.0]]]), requires_grad=True)
    with Tape() as t:
        y = ad.maxpool1d(x, 3, 1)
    t.backward(y, np.ones((1, 1, 1)))
    assert x.grad.tolist() == [[[1.0, 0.0, 0.0]]]


def test_concat_order_and_adjoint():
    a = Tensor(np.ones((1, 1, 3)), requires_grad=True)
    b = Tensor(2 * np.ones((1, 2, 3)), requires_grad=True)
    with Tape() as t:
        y = ad.concat_channels([a, b])
    assert y.shape == (1, 3, 3) and y.data[0, :, 0].tolist() == [1, 2, 2]
    g = np.arange(9.0).reshape(1, 3, 3)
    t.backward(y, g)
    assert np.array_equal(a.grad, g[:, :1]) and np.array_equal(b.grad, g[:, 1:])


def test_linear_values():
    x = np.random.default_rng(1).standard_normal((2, 4))
    assert np.allclose(ad.linear(x, np.eye(4), np.zeros(4)).data, x)
    assert ad.linear(np.array([[3.0]]), np.array([[2.0]])).data.tolist() == [[6.0]]


def test_bce_values():
    assert abs(float(ad.bce_with_logits(np.array([[0.0]]), np.array([[1.0]]), 1.0).data) - math.log(2)) < 1e-7
    rng = np.random.default_rng(2)
    z = rng.standard_normal((50, 1))
    y = (rng.uniform(size=(50, 1)) < 0.4).astype(float)
    p = 1 / (1 + np.exp(-z))
    naive = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert abs(float(ad.bce_with_logits(z, y, 1.0).data) - naive) < 1e-7
    big = ad.bce_with_logits(np.array([[1000.0], [-1000.0]]), np.array([[0.0], [1.0]]))
    assert abs(float(big.data) - 1000.0) < 1e-9


def test_backward_accumulates():
    w = Tensor(np.array([[1.5, -0.5]]), requires_grad=True)
    for expected in (1, 2, 3):
        with Tape():
            loss = ad.flatten(ad.linear(np.array([[2.0, 3.0]]), w))
        loss.backward(np.ones((1, 1)))
        assert np.allclose(w.grad, expected * np.array([[2.0, 3.0]]))
    w.zero_grad()
    assert w.grad is None


def test_shared_input_grads_add():
    x = Tensor(np.array([[[1.0, -2.0, 3.0]]]), requires_grad=True)
    with Tape() as t:
        y = ad.concat_channels([ad.relu(x), x])
    t.backward(y, np.ones((1, 2, 3)))
    assert x.grad.tolist() == [[[2.0, 1.0, 2.0]]]


def test_no_recording_outside_tape():
    x = Tensor(np.ones((1, 1, 4)), requires_grad=True)
    y = ad.relu(x)
    assert y.is_leaf and not y.requires_grad


def test_determinism():
    def run():
        rng = Prng(9)
        x = Tensor(rng.normal(2 * 3 * 16).reshape(2, 3, 16), requires_grad=True)
        w = Tensor(rng.normal(4 * 3 * 3).reshape(4, 3, 3), requires_grad=True)
        with Tape() as t:
            out = ad.adaptive_avg_pool1d(ad.relu(ad.conv1d(x, w, pad=1)))
        t.backward(out, np.ones(out.shape))
        return out.data.tobytes(), x.grad.tobytes(), w.grad.tobytes()
    assert run() == run()


def test_gradcheck_detects_wrong_rule():
    def bad(x):
        out = ad.relu(x)
        if out._node is not None:
            out._node.fn = lambda g, needs: (2 * g,)
        return out
    assert gradcheck(bad, [(2, 3)], seed=0) > 0.1
