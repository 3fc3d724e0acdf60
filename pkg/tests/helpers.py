"""Shared builders for gradient checks and small fixtures."""

import numpy as np

from barelyseg import segnet
from barelyseg.objectives import dice_loss


def _project(t, out, rng):
    # random linear read-out so every output element matters
    w = rng.normal(size=t.value(out).shape)
    return t.sum(t.mul(out, t.constant(w)))


def _away_from_zero(rng, shape, lo=0.1):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(lo, 1.0, size=shape)


def b_conv3d(t, rng):
    stride = int(rng.integers(1, 3))
    x = t.parameter("x", rng.normal(size=(2, 5, 4, 6)))
    w = t.parameter("w", rng.normal(size=(3, 2, 3, 3, 3)))
    b = t.parameter("b", rng.normal(size=3))
    return _project(t, t.conv3d(x, w, b, stride=stride), rng)


def b_upsample2(t, rng):
    return _project(t, t.upsample2(t.parameter("x", rng.normal(size=(2, 2, 3, 2)))), rng)


def b_relu(t, rng):
    return _project(t, t.relu(t.parameter("x", _away_from_zero(rng, (3, 4)))), rng)


def b_leaky_relu(t, rng):
    return _project(t, t.relu(t.parameter("x", _away_from_zero(rng, (3, 4))), slope=0.1), rng)


def b_sigmoid(t, rng):
    return _project(t, t.sigmoid(t.parameter("x", rng.normal(size=(3, 4)) * 3)), rng)


def b_softmax(t, rng):
    return _project(t, t.softmax(t.parameter("x", rng.normal(size=(3, 2, 2, 2)))), rng)


def b_add(t, rng):
    a, b = t.parameter("a", rng.normal(size=(2, 3))), t.parameter("b", rng.normal(size=(2, 3)))
    return _project(t, t.add(a, b), rng)


def b_mul(t, rng):
    a, b = t.parameter("a", rng.normal(size=(2, 3))), t.parameter("b", rng.normal(size=(2, 3)))
    return _project(t, t.mul(a, b), rng)


def b_div(t, rng):
    a = t.parameter("a", rng.normal(size=(2, 3)))
    b = t.parameter("b", _away_from_zero(rng, (2, 3), lo=0.5))
    return _project(t, t.div(a, b), rng)


def b_affine(t, rng):
    scale, shift = rng.normal(size=2)
    return _project(t, t.affine(t.parameter("x", rng.normal(size=(4,))), float(scale), float(shift)), rng)


def b_concat(t, rng):
    a = t.parameter("a", rng.normal(size=(1, 2, 3)))
    b = t.parameter("b", rng.normal(size=(2, 2, 3)))
    return _project(t, t.concat(a, b), rng)


def b_sum(t, rng):
    x = t.parameter("x", rng.normal(size=(2, 3, 4)))
    return _project(t, t.sum(x, axes=(1, 2)), rng)


def b_mean(t, rng):
    x = t.parameter("x", rng.normal(size=(2, 3, 4)))
    return _project(t, t.mean(x, axes=(0, 2)), rng)


def b_take(t, rng):
    x = t.parameter("x", rng.normal(size=(2, 5, 3)))
    return _project(t, t.take(x, axis=1, index=int(rng.integers(0, 5))), rng)


PRIMITIVE_BUILDERS = {
    "conv3d": b_conv3d,
    "upsample2": b_upsample2,
    "relu": b_relu,
    "relu(slope)": b_leaky_relu,
    "sigmoid": b_sigmoid,
    "softmax": b_softmax,
    "add": b_add,
    "mul": b_mul,
    "div": b_div,
    "affine": b_affine,
    "concat": b_concat,
    "sum": b_sum,
    "mean": b_mean,
    "take": b_take,
}

GRAD_NET = segnet.SegNetConfig(base_channels=2, levels=2)


def segnet_dice_builder(t, rng):
    """Full network plus Dice loss on a random 8^3 volume, float64.

    Biases are drawn nonzero so no ReLU sits exactly on its kink, where the
    derivative is undefined and central differences disagree with any choice.
    """
    params = segnet.init(GRAD_NET, rng, np.float64)
    for name in params:
        if name.endswith(".b"):
            params[name] = rng.uniform(-0.5, 0.5, size=params[name].shape)
    x = rng.uniform(size=(1, 8, 8, 8))
    target = rng.integers(0, 2, size=(8, 8, 8))
    probs = segnet.forward(params, x, GRAD_NET, t)
    return dice_loss(probs, target, t)
