"""Dense tensor numerics for the trainable layers.

Tensors are plain ``numpy`` arrays of dtype float64 laid out channel-major
``(channels, height, width)``. Convolution is cross-correlation (no kernel
flip) with stride 1 and zero padding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible."""


class NonFiniteGradientError(FloatingPointError):
    """Raised when an optimizer step would consume NaN/Inf gradients."""


def as_tensor3(a) -> np.ndarray:
    """Return ``a`` as a float64 ``(C, H, W)`` array, promoting 2-D input."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ShapeError(f"expected a (C, H, W) tensor, got shape {arr.shape}")
    return arr


@dataclass
class ConvLayer:
    """Stride-1 convolution with per-output-channel bias.

    ``weights`` has shape ``(out_channels, in_channels, kh, kw)``. With
    ``same=True`` the padding is ``((kh-1)//2, (kw-1)//2)`` so the output keeps
    the input's spatial size.
    """

    weights: np.ndarray
    bias: np.ndarray
    pad_h: int = 0
    pad_w: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 4:
            raise ShapeError(f"conv weights must be 4-D, got shape {self.weights.shape}")
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.bias.shape != (self.out_channels,):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match out_channels={self.out_channels}"
            )
        kh, kw = self.kernel_size
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"kernel dims must be odd, got {kh}x{kw}")

    @classmethod
    def same(cls, weights, bias=None) -> "ConvLayer":
        weights = np.asarray(weights, dtype=np.float64)
        if bias is None:
            bias = np.zeros(weights.shape[0])
        kh, kw = weights.shape[2:]
        return cls(weights, bias, (kh - 1) // 2, (kw - 1) // 2)

    @classmethod
    def gaussian_init(cls, rng: np.random.Generator, out_channels: int, in_channels: int,
                      kh: int, kw: int, std: float = 1e-3) -> "ConvLayer":
        w = rng.normal(0.0, std, size=(out_channels, in_channels, kh, kw))
        return cls.same(w, np.zeros(out_channels))

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]

    def output_shape(self, input_shape) -> tuple[int, int, int]:
        _, h, w = input_shape
        kh, kw = self.kernel_size
        return (self.out_channels, h + 2 * self.pad_h - kh + 1, w + 2 * self.pad_w - kw + 1)

    def copy(self) -> "ConvLayer":
        return ConvLayer(self.weights.copy(), self.bias.copy(), self.pad_h, self.pad_w)


def _check_input(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    x = as_tensor3(x)
    if x.shape[0] != layer.in_channels:
        raise ShapeError(
            f"input shape {x.shape} has {x.shape[0]} channels but layer weights "
            f"{layer.weights.shape} expect {layer.in_channels}"
        )
    oc, oh, ow = layer.output_shape(x.shape)
    if oh < 1 or ow < 1:
        raise ShapeError(f"kernel {layer.kernel_size} larger than padded input {x.shape}")
    return x


def _pad(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (ph, ph), (pw, pw)))


# kernels with at least this many taps go through the FFT path
FFT_MIN_TAPS = 49


def _use_fft(layer: ConvLayer) -> bool:
    kh, kw = layer.kernel_size
    return kh * kw >= FFT_MIN_TAPS


def conv2d_forward(x, layer: ConvLayer) -> np.ndarray:
    """Sliding dot product of every filter with ``x`` plus bias."""
    x = _check_input(x, layer)
    oc, oh, ow = layer.output_shape(x.shape)
    xp = _pad(x, layer.pad_h, layer.pad_w)
    kh, kw = layer.kernel_size
    if _use_fft(layer):
        s = xp.shape[1:]
        spec = np.einsum("chw,ochw->ohw", np.fft.rfft2(xp, s),
                         np.fft.rfft2(layer.weights[:, :, ::-1, ::-1], s))
        out = np.fft.irfft2(spec, s)[:, kh - 1:kh - 1 + oh, kw - 1:kw - 1 + ow]
        return out + layer.bias[:, None, None]
    out = np.zeros((oc, oh, ow))
    for i in range(kh):
        for j in range(kw):
            # (O, C) . (C, oh, ow) -> (O, oh, ow)
            out += np.tensordot(layer.weights[:, :, i, j], xp[:, i:i + oh, j:j + ow], axes=1)
    out += layer.bias[:, None, None]
    return out


def conv2d_backward(x, layer: ConvLayer, grad_output, compute_input_grad: bool = True):
    """Gradients of :func:`conv2d_forward` w.r.t. input, weights and bias.

    Returns ``(grad_input, grad_weights, grad_bias)``; ``grad_input`` is
    ``None`` when ``compute_input_grad`` is false.
    """
    x = _check_input(x, layer)
    g = np.asarray(grad_output, dtype=np.float64)
    expected = layer.output_shape(x.shape)
    if g.shape != expected:
        raise ShapeError(f"grad_output shape {g.shape} != forward output shape {expected}")
    _, oh, ow = expected
    ph, pw = layer.pad_h, layer.pad_w
    xp = _pad(x, ph, pw)
    kh, kw = layer.kernel_size
    grad_b = g.sum(axis=(1, 2))

    if _use_fft(layer):
        s = xp.shape[1:]
        xf = np.fft.rfft2(xp, s)
        grad_w = np.fft.irfft2(np.einsum("chw,ohw->ochw", xf, np.fft.rfft2(g[:, ::-1, ::-1], s)), s)
        grad_w = grad_w[:, :, oh - 1:oh - 1 + kh, ow - 1:ow - 1 + kw].copy()
        grad_x = None
        if compute_input_grad:
            full = np.fft.irfft2(np.einsum("ohw,ochw->chw", np.fft.rfft2(g, s),
                                           np.fft.rfft2(layer.weights, s)), s)
            grad_x = full[:, ph:ph + x.shape[1], pw:pw + x.shape[2]].copy()
        return grad_x, grad_w, grad_b

    grad_w = np.empty_like(layer.weights)
    grad_xp = np.zeros_like(xp) if compute_input_grad else None
    for i in range(kh):
        for j in range(kw):
            window = xp[:, i:i + oh, j:j + ow]
            # (O, oh, ow) x (C, oh, ow) -> (O, C)
            grad_w[:, :, i, j] = np.tensordot(g, window, axes=([1, 2], [1, 2]))
            if grad_xp is not None:
                grad_xp[:, i:i + oh, j:j + ow] += np.tensordot(layer.weights[:, :, i, j], g, axes=([0], [0]))

    grad_x = None
    if grad_xp is not None:
        grad_x = grad_xp[:, ph:ph + x.shape[1], pw:pw + x.shape[2]].copy()
    return grad_x, grad_w, grad_b


def relu_forward(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(x, grad_output) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(grad_output, dtype=np.float64)
    if x.shape != g.shape:
        raise ShapeError(f"relu input shape {x.shape} != grad shape {g.shape}")
    # subgradient at exactly zero is 0
    return np.where(x > 0.0, g, 0.0)


def l2_loss(pred, target) -> tuple[float, np.ndarray]:
    """Summed squared error and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    diff = pred - target
    return float(np.sum(diff * diff)), 2.0 * diff


@dataclass
class AdamState:
    """Moment accumulators keyed by parameter name."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def copy(self) -> "AdamState":
        return AdamState(
            self.beta1, self.beta2, self.eps, self.step,
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
        )


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              weight_decay: float = 0.0) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update.

    ``params`` and ``grads`` map names to arrays. Weight decay is coupled: it
    adds ``2 * weight_decay * param`` to the gradient before the moments are
    accumulated. Returns new parameter arrays and a new state; the inputs are
    left untouched so a rejected step cannot corrupt anything.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    if set(params) != set(grads):
        raise ShapeError(f"parameter keys {sorted(params)} != gradient keys {sorted(grads)}")
    for name, g in grads.items():
        g = np.asarray(g)
        if g.shape != np.shape(params[name]):
            raise ShapeError(f"gradient '{name}' shape {g.shape} != parameter shape {np.shape(params[name])}")
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NonFiniteGradientError(f"gradient '{name}' has {bad} non-finite entries; step rejected")

    new_state = state.copy()
    new_state.step += 1
    t = new_state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    new_params = {}
    for name, p in params.items():
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(grads[name], dtype=np.float64)
        if weight_decay:
            g = g + 2.0 * weight_decay * p
        m = new_state.m.get(name)
        v = new_state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        elif m.shape != p.shape:
            raise ShapeError(f"moment shape {m.shape} for '{name}' != parameter shape {p.shape}")
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        new_state.m[name] = m
        new_state.v[name] = v
        new_params[name] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return new_params, new_state
