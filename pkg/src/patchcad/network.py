"""Layers with hand-derived gradients and the patch classifier built from them.

Every layer op takes a single sample (``[C, H, W]`` images, ``[n]`` vectors)
and also accepts a leading batch axis, which the training loop uses to keep
the matrix products large.  Gradients are exact; the finite-difference tests
in ``tests/test_gradients.py`` are the oracle.

Architecture (input ``[C, 64, 64]``)::

    conv 3x3 -> 128 maps, ReLU     [128, 64, 64]
    max-pool 2x2 / 2               [128, 32, 32]
    conv 3x3 -> 64 maps, ReLU      [64, 32, 32]
    max-pool 2x2 / 2               [64, 16, 16]
    conv 3x3 -> 32 maps, ReLU      [32, 16, 16]
    max-pool 2x2 / 2               [32, 8, 8]
    dense -> 150, ReLU, dropout .5 [150]
    dense -> 2                     [2]      (z_control, z_patient)

and the probability of the control class is ``sigmoid(z_control - z_patient)``.
"""

from __future__ import annotations

import copy
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatch, StaleState
from .tensor import DTYPE, Rng, Tensor, fill_random, he_scale, lecun_scale

CONTROL_LOGIT = 0
PATIENT_LOGIT = 1

PATCH_SIZE = 64
CONV_WIDTHS = (128, 64, 32)
HIDDEN_UNITS = 150
DROPOUT_PROBABILITY = 0.5


# ---------------------------------------------------------------------------
# layer types


@dataclass
class ConvLayer:
    """3x3 convolution, stride 1, one pixel of zero padding on every side."""

    kernels: Tensor  # [out_channels, in_channels, 3, 3]
    biases: Tensor  # [out_channels]

    @property
    def in_channels(self) -> int:
        return self.kernels.shape[1]

    @property
    def out_channels(self) -> int:
        return self.kernels.shape[0]


@dataclass
class MaxPoolLayer:
    """2x2 window, stride 2.  Keeps the argmax of its last forward call."""

    argmax: Tensor | None = field(default=None, repr=False)
    input_shape: tuple | None = None


@dataclass
class DenseLayer:
    weights: Tensor  # [out_units, in_units]
    biases: Tensor  # [out_units]


@dataclass
class DropoutLayer:
    probability: float = DROPOUT_PROBABILITY
    mask: Tensor | None = field(default=None, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.probability < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {self.probability}")


# ---------------------------------------------------------------------------
# convolution
#
# Internally activations are channels-last ([B, H, W, C]) and im2col columns
# are ordered (dy, dx, c); the public functions take channels-first arrays.


def _batched(x: Tensor, ndim: int) -> tuple[Tensor, bool]:
    if x.ndim == ndim:
        return x[None], True
    if x.ndim == ndim + 1:
        return x, False
    raise ShapeMismatch(f"expected {ndim}-d sample or batch, got shape {x.shape}")


def _nhwc(x: Tensor) -> Tensor:
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def _nchw(x: Tensor) -> Tensor:
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def _kernel_matrix(layer: ConvLayer) -> Tensor:
    # [K, C, 3, 3] -> [K, 9*C] in (dy, dx, c) order
    return layer.kernels.transpose(0, 2, 3, 1).reshape(layer.out_channels, -1)


def _im2col(x: Tensor) -> Tensor:
    # x: [B, H, W, C] -> [B*H*W, 9*C]
    b, h, w, c = x.shape
    xp = np.zeros((b, h + 2, w + 2, c), dtype=DTYPE)
    xp[:, 1:-1, 1:-1] = x
    cols = np.empty((b, h, w, 9, c), dtype=DTYPE)
    for dy in range(3):
        for dx in range(3):
            cols[:, :, :, 3 * dy + dx] = xp[:, dy : dy + h, dx : dx + w]
    return cols.reshape(b * h * w, 9 * c)


def _col2im(cols: Tensor, shape: tuple) -> Tensor:
    b, h, w, c = shape
    g = cols.reshape(b, h, w, 9, c)
    gp = np.zeros((b, h + 2, w + 2, c), dtype=DTYPE)
    for dy in range(3):
        for dx in range(3):
            gp[:, dy : dy + h, dx : dx + w] += g[:, :, :, 3 * dy + dx]
    return gp[:, 1:-1, 1:-1]


def _conv_cols_forward(layer: ConvLayer, cols: Tensor, shape: tuple) -> Tensor:
    b, h, w, _ = shape
    out = cols @ _kernel_matrix(layer).T
    out += layer.biases
    return out.reshape(b, h, w, layer.out_channels)


def _conv_cols_backward(layer, cols, shape, grad_out, need_input_grad=True):
    # grad_out: [B, H, W, K]
    k = layer.out_channels
    g = grad_out.reshape(-1, k)
    gk = (g.T @ cols).reshape(k, 3, 3, layer.in_channels).transpose(0, 3, 1, 2)
    grad_input = _col2im(g @ _kernel_matrix(layer), shape) if need_input_grad else None
    return grad_input, np.ascontiguousarray(gk), g.sum(axis=0)


def _check_conv_input(layer: ConvLayer, x: Tensor) -> None:
    if x.shape[1] != layer.in_channels:
        raise ShapeMismatch(
            f"layer expects {layer.in_channels} input channels, got {x.shape[1]}"
        )
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeMismatch(f"empty spatial extent {x.shape[2:]}")


def conv_forward(layer: ConvLayer, x: Tensor) -> Tensor:
    xb, single = _batched(np.asarray(x, dtype=DTYPE), 3)
    _check_conv_input(layer, xb)
    xl = _nhwc(xb)
    out = _nchw(_conv_cols_forward(layer, _im2col(xl), xl.shape))
    return out[0] if single else out


def conv_backward(layer: ConvLayer, x: Tensor, grad_out: Tensor):
    """Return ``(grad_input, grad_kernels, grad_biases)`` for ``conv_forward(layer, x)``.

    Kernel and bias gradients are summed over the batch axis when one is present.
    """
    xb, single = _batched(np.asarray(x, dtype=DTYPE), 3)
    _check_conv_input(layer, xb)
    gb, _ = _batched(grad_out, 3)
    expected = (xb.shape[0], layer.out_channels) + xb.shape[2:]
    if gb.shape != expected:
        raise ShapeMismatch(f"grad_out shape {gb.shape}, expected {expected}")
    xl = _nhwc(xb)
    gi, gk, gbias = _conv_cols_backward(layer, _im2col(xl), xl.shape, _nhwc(gb))
    gi = _nchw(gi)
    return (gi[0] if single else gi), gk, gbias


# ---------------------------------------------------------------------------
# max pooling


def _pool(x: Tensor) -> tuple[Tensor, Tensor]:
    # x: [B, H, W, C]; window slots 0..3 in row-major order within the window
    b, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeMismatch(f"max-pool needs even extents, got {h}x{w}")
    slots = [x[:, dy::2, dx::2] for dy in (0, 1) for dx in (0, 1)]
    out = np.maximum(np.maximum(slots[0], slots[1]), np.maximum(slots[2], slots[3]))
    # ties go to the earliest slot
    idx = np.full(out.shape, 3, dtype=np.int8)
    for s in (2, 1, 0):
        idx[slots[s] == out] = s
    return out, idx


def _unpool(grad_out: Tensor, idx: Tensor, shape: tuple) -> Tensor:
    g = np.zeros(shape, dtype=DTYPE)
    for s, (dy, dx) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        np.copyto(g[:, dy::2, dx::2], grad_out, where=idx == s)
    return g


def maxpool_forward(layer: MaxPoolLayer, x: Tensor) -> Tensor:
    xb, single = _batched(np.asarray(x, dtype=DTYPE), 3)
    out, idx = _pool(_nhwc(xb))
    layer.argmax = idx
    layer.input_shape = (xb.shape[0], xb.shape[2], xb.shape[3], xb.shape[1])
    out = _nchw(out)
    return out[0] if single else out


def maxpool_backward(layer: MaxPoolLayer, grad_out: Tensor) -> Tensor:
    if layer.argmax is None:
        raise StaleState("maxpool_backward called before maxpool_forward")
    gb, single = _batched(grad_out, 3)
    gl = _nhwc(gb)
    if gl.shape != layer.argmax.shape:
        raise ShapeMismatch(f"grad_out shape {gb.shape} does not match the pooled output")
    gi = _nchw(_unpool(gl, layer.argmax, layer.input_shape))
    return gi[0] if single else gi


# ---------------------------------------------------------------------------
# dense, activations, dropout


def dense_forward(layer: DenseLayer, x: Tensor) -> Tensor:
    if x.shape[-1] != layer.weights.shape[1]:
        raise ShapeMismatch(f"dense layer expects {layer.weights.shape[1]} inputs, got {x.shape[-1]}")
    return x @ layer.weights.T + layer.biases


def dense_backward(layer: DenseLayer, x: Tensor, grad_out: Tensor):
    if x.shape[-1] != layer.weights.shape[1] or grad_out.shape[-1] != layer.weights.shape[0]:
        raise ShapeMismatch("dense_backward: inconsistent shapes")
    xb = x.reshape(-1, x.shape[-1])
    gb = grad_out.reshape(-1, grad_out.shape[-1])
    grad_input = (gb @ layer.weights).reshape(x.shape)
    return grad_input, gb.T @ xb, gb.sum(axis=0)


def relu_forward(x: Tensor) -> Tensor:
    return np.maximum(x, 0.0)


def relu_backward(x: Tensor, grad_out: Tensor) -> Tensor:
    # subgradient 0 at x == 0
    if x.shape != grad_out.shape:
        raise ShapeMismatch(f"relu_backward: {x.shape} vs {grad_out.shape}")
    return grad_out * (x > 0)


def sigmoid_forward(x):
    # 0.5 * (1 + tanh(x/2)) is exact at 0 and never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=DTYPE)))


def sigmoid_backward(x, grad_out):
    s = sigmoid_forward(x)
    if np.shape(x) != np.shape(grad_out):
        raise ShapeMismatch("sigmoid_backward: inconsistent shapes")
    return grad_out * s * (1.0 - s)


def dropout_mask(shape, probability: float, rng: Rng) -> Tensor:
    keep = rng.random(shape) >= probability
    return keep / (1.0 - probability)


def dropout_forward(layer: DropoutLayer, x: Tensor, training: bool, rng: Rng | None = None) -> Tensor:
    """Inverted dropout; the identity when ``training`` is false."""
    if not training or layer.probability == 0.0:
        layer.mask = None
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    layer.mask = dropout_mask(x.shape, layer.probability, rng)
    return x * layer.mask


def dropout_backward(layer: DropoutLayer, grad_out: Tensor) -> Tensor:
    if layer.mask is None:
        return grad_out
    return grad_out * layer.mask


# ---------------------------------------------------------------------------
# the model


class NetworkModel:
    """Three conv/pool stages followed by two dense layers.

    ``patch_size`` and the layer widths are configurable only so the tests can
    build a tiny variant for finite-difference checks; the defaults are the
    production architecture.
    """

    def __init__(self, conv1, conv2, conv3, fc1, fc2, dropout=DROPOUT_PROBABILITY, patch_size=PATCH_SIZE):
        self.conv1: ConvLayer = conv1
        self.conv2: ConvLayer = conv2
        self.conv3: ConvLayer = conv3
        self.fc1: DenseLayer = fc1
        self.fc2: DenseLayer = fc2
        self.dropout = DropoutLayer(dropout)
        self.patch_size = patch_size
        if patch_size % 8:
            raise ShapeMismatch(f"patch size must be a multiple of 8, got {patch_size}")
        flat = conv3.out_channels * (patch_size // 8) ** 2
        if fc1.weights.shape[1] != flat:
            raise ShapeMismatch(f"fc1 expects {fc1.weights.shape[1]} inputs, conv stack yields {flat}")

    @classmethod
    def initialize(
        cls,
        rng: Rng,
        in_channels: int = 2,
        patch_size: int = PATCH_SIZE,
        widths: tuple[int, int, int] = CONV_WIDTHS,
        hidden: int = HIDDEN_UNITS,
        dropout: float = DROPOUT_PROBABILITY,
    ) -> "NetworkModel":
        """He-scaled Gaussian weights before ReLUs, 1/fan_in variance on the output layer, zero biases."""
        convs = []
        c_in = in_channels
        for c_out in widths:
            fan_in = c_in * 9
            convs.append(
                ConvLayer(fill_random((c_out, c_in, 3, 3), rng, he_scale(fan_in)), np.zeros(c_out))
            )
            c_in = c_out
        flat = widths[2] * (patch_size // 8) ** 2
        fc1 = DenseLayer(fill_random((hidden, flat), rng, he_scale(flat)), np.zeros(hidden))
        fc2 = DenseLayer(fill_random((2, hidden), rng, lecun_scale(hidden)), np.zeros(2))
        return cls(*convs, fc1, fc2, dropout=dropout, patch_size=patch_size)

    @property
    def in_channels(self) -> int:
        return self.conv1.in_channels

    @property
    def widths(self) -> tuple[int, int, int]:
        return (self.conv1.out_channels, self.conv2.out_channels, self.conv3.out_channels)

    @property
    def hidden(self) -> int:
        return self.fc1.weights.shape[0]

    def parameters(self) -> "OrderedDict[str, Tensor]":
        """Parameter arrays (live references) in layer order."""
        return OrderedDict(
            [
                ("conv1.kernels", self.conv1.kernels),
                ("conv1.biases", self.conv1.biases),
                ("conv2.kernels", self.conv2.kernels),
                ("conv2.biases", self.conv2.biases),
                ("conv3.kernels", self.conv3.kernels),
                ("conv3.biases", self.conv3.biases),
                ("fc1.weights", self.fc1.weights),
                ("fc1.biases", self.fc1.biases),
                ("fc2.weights", self.fc2.weights),
                ("fc2.biases", self.fc2.biases),
            ]
        )

    def set_parameters(self, params) -> None:
        own = self.parameters()
        for name, value in params.items():
            if name not in own:
                raise KeyError(name)
            if own[name].shape != np.shape(value):
                raise ShapeMismatch(f"{name}: {own[name].shape} vs {np.shape(value)}")
            own[name][...] = value

    def copy(self) -> "NetworkModel":
        return copy.deepcopy(self)

    def architecture(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "patch_size": self.patch_size,
            "widths": list(self.widths),
            "hidden": self.hidden,
            "dropout": self.dropout.probability,
        }

    def expected_shapes(self) -> list[tuple]:
        s = self.patch_size
        w1, w2, w3 = self.widths
        return [
            (w1, s, s),
            (w1, s // 2, s // 2),
            (w2, s // 2, s // 2),
            (w2, s // 4, s // 4),
            (w3, s // 4, s // 4),
            (w3, s // 8, s // 8),
            (self.hidden,),
            (2,),
        ]


@dataclass
class ForwardCache:
    """Everything backward needs from one forward call.  Never shared between calls.

    Conv-stage arrays are channels-last.
    """

    single: bool
    training: bool
    cols: list  # im2col matrices of conv1..3
    conv_in_shapes: list
    conv_shapes: list  # conv output shapes [B, H, W, K]
    pool_idx: list
    pooled: list  # max-pooled pre-ReLU conv outputs
    flat: Tensor
    fc1_out: Tensor  # pre-ReLU
    mask: Tensor | None
    hidden: Tensor  # post ReLU and dropout
    logits: Tensor
    p_control: Tensor

    def activation_shapes(self) -> list[tuple]:
        """Per-sample output shapes of the eight layers, channels first."""
        shapes = []
        for conv, pooled in zip(self.conv_shapes, self.pooled):
            shapes.append((conv[3], conv[1], conv[2]))
            shapes.append((pooled.shape[3], pooled.shape[1], pooled.shape[2]))
        shapes.append(self.fc1_out.shape[1:])
        shapes.append(self.logits.shape[1:])
        return shapes


def model_forward(model: NetworkModel, patch: Tensor, training: bool = False, rng: Rng | None = None):
    """Run the network on one patch ``[C, S, S]`` or a batch ``[B, C, S, S]``.

    Returns ``(p_control, cache)``; ``p_control`` is a float for a single
    patch and a ``[B]`` array for a batch.
    """
    x, single = _batched(np.asarray(patch, dtype=DTYPE), 3)
    s = model.patch_size
    if x.shape[1:] != (model.in_channels, s, s):
        raise ShapeMismatch(f"expected patch shape {(model.in_channels, s, s)}, got {x.shape[1:]}")

    cols, in_shapes, conv_shapes, pool_idx, pooled = [], [], [], [], []
    a = _nhwc(x)
    for layer in (model.conv1, model.conv2, model.conv3):
        c = _im2col(a)
        z = _conv_cols_forward(layer, c, a.shape)
        # max-pool commutes with ReLU, so pool first and rectify the smaller array
        m, idx = _pool(z)
        # a window with no positive entry is all zeros after ReLU: route to slot 0
        idx[m <= 0] = 0
        cols.append(c)
        in_shapes.append(a.shape)
        conv_shapes.append(z.shape)
        pool_idx.append(idx)
        pooled.append(m)
        a = relu_forward(m)

    flat = _nchw(a).reshape(a.shape[0], -1)
    h_pre = dense_forward(model.fc1, flat)
    h = relu_forward(h_pre)
    mask = None
    if training and model.dropout.probability > 0.0:
        if rng is None:
            raise ValueError("training-mode forward needs an rng for dropout")
        mask = dropout_mask(h.shape, model.dropout.probability, rng)
        h = h * mask
    logits = dense_forward(model.fc2, h)
    p = sigmoid_forward(logits[:, CONTROL_LOGIT] - logits[:, PATIENT_LOGIT])

    cache = ForwardCache(
        single=single,
        training=training,
        cols=cols,
        conv_in_shapes=in_shapes,
        conv_shapes=conv_shapes,
        pool_idx=pool_idx,
        pooled=pooled,
        flat=flat,
        fc1_out=h_pre,
        mask=mask,
        hidden=h,
        logits=logits,
        p_control=p,
    )
    return (float(p[0]) if single else p), cache


def backward_from_logits(
    model: NetworkModel,
    cache: ForwardCache,
    grad_logits: Tensor,
    input_grad: bool = False,
    parameter_grads: bool = True,
    activation_grads: bool = False,
):
    """Backpropagate ``d(objective)/d(logits)`` ``[B, 2]`` through the network.

    Returns ``(grads, extras)``.  ``grads`` maps parameter names to gradients
    summed over the batch (empty when ``parameter_grads`` is false).
    ``extras`` holds, channels first, the gradient with respect to the input
    under ``"input"`` (if ``input_grad``) and with respect to each conv
    layer's post-ReLU activation under ``"conv1"``..``"conv3"`` (if
    ``activation_grads``).
    """
    if cache is None:
        raise StaleState("no forward cache")
    g = np.asarray(grad_logits, dtype=DTYPE).reshape(cache.logits.shape)
    extras = {}

    g_h, fc2_w, fc2_b = dense_backward(model.fc2, cache.hidden, g)
    if cache.mask is not None:
        g_h = g_h * cache.mask
    g_h = relu_backward(cache.fc1_out, g_h)
    g_flat, fc1_w, fc1_b = dense_backward(model.fc1, cache.flat, g_h)

    convs = (model.conv1, model.conv2, model.conv3)
    conv_grads = [None, None, None]
    b, h, w, k = cache.pooled[2].shape
    g_a = _nhwc(g_flat.reshape(b, k, h, w))
    for i in (2, 1, 0):
        if activation_grads:
            extras[f"conv{i + 1}"] = _nchw(_unpool(g_a, cache.pool_idx[i], cache.conv_shapes[i]))
        g_z = _unpool(relu_backward(cache.pooled[i], g_a), cache.pool_idx[i], cache.conv_shapes[i])
        need_in = i > 0 or input_grad
        if parameter_grads:
            g_a, gk, gb = _conv_cols_backward(convs[i], cache.cols[i], cache.conv_in_shapes[i], g_z, need_in)
            conv_grads[i] = (gk, gb)
        elif need_in:
            g_a = _col2im(g_z.reshape(-1, convs[i].out_channels) @ _kernel_matrix(convs[i]), cache.conv_in_shapes[i])
    if input_grad:
        extras["input"] = _nchw(g_a)

    grads = OrderedDict()
    if parameter_grads:
        for i in range(3):
            grads[f"conv{i + 1}.kernels"], grads[f"conv{i + 1}.biases"] = conv_grads[i]
        grads["fc1.weights"], grads["fc1.biases"] = fc1_w, fc1_b
        grads["fc2.weights"], grads["fc2.biases"] = fc2_w, fc2_b
    return grads, extras


def target_value(label) -> float:
    """Regression target of the squared-error loss: 1 for control, 0 for patient."""
    value = getattr(label, "value", label)
    if value in ("control", 1, 1.0, True):
        return 1.0
    if value in ("patient", 0, 0.0, False):
        return 0.0
    raise ValueError(f"unknown label {label!r}")


def model_backward(model: NetworkModel, cache: ForwardCache, target):
    """Gradients of ``0.5 * sum_i (p_i - t_i)**2`` for the batch in ``cache``.

    ``target`` is a label (single patch) or a sequence of labels / 0-1 values.
    Returns an ordered ``{name: gradient}`` mapping in layer order.
    """
    if cache is None:
        raise StaleState("model_backward needs the cache of a forward pass")
    p = cache.p_control
    if np.ndim(target) == 0 or isinstance(target, str):
        t = np.array([target_value(target)])
    else:
        t = np.array([target_value(v) for v in target])
    if t.shape != p.shape:
        raise ShapeMismatch(f"{t.size} targets for {p.size} outputs")
    # dE/dp * dp/dd, with d = z_control - z_patient
    g_d = (p - t) * p * (1.0 - p)
    g_logits = np.stack([g_d, -g_d], axis=1)
    grads, _ = backward_from_logits(model, cache, g_logits)
    return grads
