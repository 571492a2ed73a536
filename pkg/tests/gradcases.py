"""Gradcheck builders for every differentiable tensor_core operation.

Each builder takes a Generator and returns ``(fn, arrays)``; outputs are
projected onto a fixed random tensor so the checked scalar depends on every
output element. ``LINEAR`` cases are (multi)linear in each input, so central
differences are exact up to rounding.
"""
import numpy as np

from xmgc import tensor_core as tc
from xmgc.tensor_core import Tensor


def _project(out_shape, rng):
    proj = rng.standard_normal(out_shape)
    return lambda t: (t * Tensor(proj)).sum()


def _away_from_zero(rng, shape, margin=0.1):
    return rng.uniform(margin, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def add_case(rng):
    p = _project((2, 3), rng)
    return (lambda a, b: p(a + b)), [rng.standard_normal((2, 3)), rng.standard_normal((1, 3))]


def sub_case(rng):
    p = _project((2, 3), rng)
    return (lambda a, b: p(a - b)), [rng.standard_normal((2, 3)), rng.standard_normal((2, 3))]


def mul_case(rng):
    p = _project((2, 3), rng)
    return (lambda a, b: p(a * b)), [rng.standard_normal((2, 3)), rng.standard_normal((2, 3))]


def sum_case(rng):
    w = rng.standard_normal((3, 4))
    return (lambda a: (a * Tensor(w)).sum() + a.sum()), [rng.standard_normal((3, 4))]


def mean_case(rng):
    w = rng.standard_normal(6)
    return (lambda a: (a * Tensor(w)).mean()), [rng.standard_normal(6)]


def reshape_case(rng):
    p = _project((2, 12), rng)
    return (lambda a: p(tc.flatten(a))), [rng.standard_normal((2, 3, 2, 2))]


def concat_case(rng):
    p = _project((1, 5, 3, 3), rng)
    return (lambda a, b: p(tc.concat_channels(a, b))), [rng.standard_normal((1, 2, 3, 3)),
                                                      rng.standard_normal((1, 3, 3, 3))]


def gap_case(rng):
    p = _project((2, 3), rng)
    return (lambda a: p(tc.global_avg_pool(a))), [rng.standard_normal((2, 3, 4, 4))]


def linear_case(rng):
    p = _project((3, 2), rng)
    return (lambda x, w, b: p(tc.linear(x, w, b))), [rng.standard_normal((3, 5)), rng.standard_normal((2, 5)),
                                                   rng.standard_normal(2)]


def conv2d_case(rng):
    p = _project((2, 3, 3, 3), rng)
    return (lambda x, k, b: p(tc.conv2d(x, k, b, 2, 1))), [rng.standard_normal((2, 2, 6, 6)),
                                                         rng.standard_normal((3, 2, 4, 4)),
                                                         rng.standard_normal(3)]


def conv2d_transpose_case(rng):
    p = _project((1, 2, 6, 6), rng)
    return (lambda x, k, b: p(tc.conv2d_transpose(x, k, b, 2, 1))), [rng.standard_normal((1, 3, 3, 3)),
                                                                   rng.standard_normal((3, 2, 4, 4)),
                                                                   rng.standard_normal(2)]


def batchnorm_infer_case(rng):
    p = _project((2, 3, 2, 2), rng)
    rm, rv = rng.standard_normal(3), rng.uniform(0.5, 2.0, 3)
    return (lambda x, g, b: p(tc.batchnorm2d(x, g, b, "infer", rm, rv))), [
        rng.standard_normal((2, 3, 2, 2)), rng.standard_normal(3), rng.standard_normal(3)]


LINEAR = {
    "add": add_case, "sub": sub_case, "mul": mul_case, "sum": sum_case, "mean": mean_case, "reshape": reshape_case,
    "concat_channels": concat_case, "global_avg_pool": gap_case, "linear": linear_case,
    "conv2d": conv2d_case, "conv2d_transpose": conv2d_transpose_case, "batchnorm2d_infer": batchnorm_infer_case,
}


def relu_case(rng):
    p = _project(12, rng)
    return (lambda x: p(tc.relu(x))), [_away_from_zero(rng, 12)]


def leaky_relu_case(rng):
    p = _project(12, rng)
    return (lambda x: p(tc.leaky_relu(x, 0.2))), [_away_from_zero(rng, 12)]


def sigmoid_case(rng):
    p = _project(10, rng)
    return (lambda x: p(tc.sigmoid(x))), [rng.standard_normal(10) * 2]


def tanh_case(rng):
    p = _project(10, rng)
    return (lambda x: p(tc.tanh(x))), [rng.standard_normal(10)]


def batchnorm_train_case(rng):
    p = _project((3, 2, 2, 2), rng)
    return (lambda x, g, b: p(tc.batchnorm2d(x, g, b, "train"))), [
        rng.standard_normal((3, 2, 2, 2)), rng.standard_normal(2), rng.standard_normal(2)]


def bce_case(rng):
    label = float(rng.integers(0, 2))
    return (lambda q: tc.bce_loss(q, label)), [rng.uniform(0.05, 0.95, size=(4, 1))]


def l1_case(rng):
    a = rng.standard_normal(8)
    return (lambda x, y: tc.l1_loss(x, y)), [a, a + _away_from_zero(rng, 8)]


def softmax_xent_case(rng):
    labels = rng.integers(0, 4, size=3)
    return (lambda z: tc.softmax_cross_entropy(z, labels)), [rng.standard_normal((3, 4))]


def composite_case(rng):
    """conv -> batchnorm -> relu -> linear -> sigmoid -> bce, the discriminator's shape."""
    label = float(rng.integers(0, 2))
    fc = rng.standard_normal((1, 2 * 2 * 2)) * 0.5

    def pre_relu(x, k, g, b):
        h = tc.conv2d(x, k, Tensor(np.zeros(2)), 2, 1)
        return tc.batchnorm2d(h, g, b, "train")

    def fn(x, k, g, b):
        h = tc.relu(pre_relu(x, k, g, b))
        logit = tc.linear(tc.flatten(h), Tensor(fc), Tensor(np.zeros(1)))
        return tc.bce_loss(tc.sigmoid(logit), label)

    # redraw until no pre-activation sits within probing distance of the relu kink
    while True:
        arrays = [rng.standard_normal((2, 2, 4, 4)), rng.standard_normal((2, 2, 3, 3)),
                  rng.uniform(0.5, 1.5, 2), rng.uniform(0.5, 1.0, 2)]
        with tc.no_grad():
            if np.abs(pre_relu(*[Tensor(a) for a in arrays]).data).min() > 0.05:
                return fn, arrays


NONLINEAR = {
    "relu": relu_case, "leaky_relu": leaky_relu_case, "sigmoid": sigmoid_case, "tanh": tanh_case,
    "batchnorm2d_train": batchnorm_train_case, "bce_loss": bce_case, "l1_loss": l1_case,
    "softmax_cross_entropy": softmax_xent_case, "conv_bn_relu_bce": composite_case,
}
