"""Randomized finite-difference cases; each returns the worst relative error it saw."""

import numpy as np

from patchcad.network import (
    ConvLayer,
    DenseLayer,
    DropoutLayer,
    MaxPoolLayer,
    NetworkModel,
    backward_from_logits,
    conv_backward,
    conv_forward,
    dense_backward,
    dense_forward,
    dropout_backward,
    dropout_forward,
    maxpool_backward,
    maxpool_forward,
    model_backward,
    model_forward,
    relu_backward,
    relu_forward,
    sigmoid_backward,
    sigmoid_forward,
)
from patchcad.tensor import make_rng
from patchcad.training import loss

from .gradcheck import numeric_gradient, relative_error

MARGIN = 1e-3


def conv_case(seed):
    rng = make_rng(seed)
    layer = ConvLayer(rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3))
    x = rng.standard_normal((2, 5, 6))
    r = rng.standard_normal((3, 5, 6))

    def f():
        return float(np.sum(r * conv_forward(layer, x)))

    gi, gk, gb = conv_backward(layer, x, r)
    return max(
        relative_error(gi, numeric_gradient(f, x)),
        relative_error(gk, numeric_gradient(f, layer.kernels)),
        relative_error(gb, numeric_gradient(f, layer.biases)),
    )


def maxpool_case(seed):
    rng = make_rng(seed)
    # distinct values 0.01 apart: no ties within the finite-difference step
    x = (rng.permutation(2 * 6 * 8) * 0.01).reshape(2, 6, 8) + rng.uniform(0, 1e-4, (2, 6, 8))
    r = rng.standard_normal((2, 3, 4))
    layer = MaxPoolLayer()

    def f():
        return float(np.sum(r * maxpool_forward(MaxPoolLayer(), x)))

    maxpool_forward(layer, x)
    return relative_error(maxpool_backward(layer, r), numeric_gradient(f, x))


def dense_case(seed):
    rng = make_rng(seed)
    layer = DenseLayer(rng.standard_normal((4, 7)), rng.standard_normal(4))
    x = rng.standard_normal(7)
    r = rng.standard_normal(4)

    def f():
        return float(np.sum(r * dense_forward(layer, x)))

    gi, gw, gb = dense_backward(layer, x, r)
    return max(
        relative_error(gi, numeric_gradient(f, x)),
        relative_error(gw, numeric_gradient(f, layer.weights)),
        relative_error(gb, numeric_gradient(f, layer.biases)),
    )


def relu_case(seed):
    rng = make_rng(seed)
    x = rng.choice([-1.0, 1.0], 20) * rng.uniform(0.01, 2.0, 20)
    r = rng.standard_normal(20)
    return relative_error(relu_backward(x, r), numeric_gradient(lambda: float(np.sum(r * relu_forward(x))), x))


def sigmoid_case(seed):
    rng = make_rng(seed)
    x = rng.standard_normal(20) * 3
    r = rng.standard_normal(20)
    return relative_error(
        sigmoid_backward(x, r), numeric_gradient(lambda: float(np.sum(r * sigmoid_forward(x))), x)
    )


def dropout_case(seed):
    rng = make_rng(seed)
    layer = DropoutLayer(0.5)
    x = rng.standard_normal(30)
    r = rng.standard_normal(30)
    dropout_forward(layer, x, training=True, rng=make_rng(seed + 1))

    def f():
        return float(np.sum(r * dropout_forward(DropoutLayer(0.5), x, training=True, rng=make_rng(seed + 1))))

    return relative_error(dropout_backward(layer, r), numeric_gradient(f, x))


def _kink_free(model: NetworkModel, x: np.ndarray) -> bool:
    """True when every ReLU input and every max-pool decision is at least MARGIN from a kink."""
    a = x
    for layer in (model.conv1, model.conv2, model.conv3):
        zs = np.stack([conv_forward(layer, xi) for xi in a])
        if np.min(np.abs(zs)) < MARGIN:
            return False
        b, c, h, w = zs.shape
        win = np.sort(zs.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4))
        if np.min(win[..., 3] - win[..., 2]) < MARGIN:
            return False
        a = relu_forward(win[..., 3])
    h1 = dense_forward(model.fc1, a.reshape(a.shape[0], -1))
    return bool(np.min(np.abs(h1)) >= MARGIN)


def shrunken_model_and_batch(seed, batch=2):
    """A kink-free (model, patches) pair for the 8x8 test architecture."""
    for attempt in range(1000):
        s = seed * 1000 + attempt
        rng = make_rng(s)
        model = NetworkModel.initialize(rng, in_channels=2, patch_size=8, widths=(4, 3, 2), hidden=5)
        for p in model.parameters().values():
            if p.ndim == 1:
                p[...] = rng.normal(0, 0.1, p.shape)
        x = rng.standard_normal((batch, 2, 8, 8))
        if _kink_free(model, x):
            return model, x, s
    raise RuntimeError("no kink-free draw found")


def network_case(seed):
    """Full backward of the squared-error loss on the shrunken network, dropout active."""
    model, x, s = shrunken_model_and_batch(seed)
    labels = ["control", "patient"]

    def f():
        p, _ = model_forward(model, x, training=True, rng=make_rng(s + 7))
        return loss(p, labels)

    _, cache = model_forward(model, x, training=True, rng=make_rng(s + 7))
    grads = model_backward(model, cache, labels)
    worst = 0.0
    for name, param in model.parameters().items():
        worst = max(worst, relative_error(grads[name], numeric_gradient(f, param)))

    # input gradient through the same backward code path
    p = cache.p_control
    t = np.array([1.0, 0.0])
    g_d = (p - t) * p * (1 - p)
    _, extras = backward_from_logits(model, cache, np.stack([g_d, -g_d], 1), input_grad=True)
    worst = max(worst, relative_error(extras["input"], numeric_gradient(f, x)))
    return worst


LAYER_CASES = {
    "conv": conv_case,
    "maxpool": maxpool_case,
    "dense": dense_case,
    "relu": relu_case,
    "sigmoid": sigmoid_case,
    "dropout": dropout_case,
    "network": network_case,
}
