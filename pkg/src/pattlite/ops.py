"""Layer kernels and their vector-Jacobian products.

Every forward op ``f`` has a matching ``f_backward`` that takes the forward
inputs plus the upstream gradient and returns gradients shaped like those
inputs.  All kernels work on NHWC tensors and keep the input dtype.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, crop2d, pad2d

PADDING_MODES = ("valid", "same")


@dataclass
class ConvKernel:
    """Weights plus geometry for one convolution.

    ``weights`` is ``(kh, kw, cin, cout)`` for standard and pointwise convs
    and ``(kh, kw, c, 1)`` for depthwise convs.
    """

    weights: Tensor
    bias: Optional[Tensor] = None
    stride: int = 1
    padding: str = "valid"

    def __post_init__(self):
        if self.weights.ndim != 4 or min(self.weights.shape) < 1:
            raise ValueError(f"kernel weights must be 4-D with positive extents, got {self.weights.shape}")
        if self.stride < 1:
            raise ValueError(f"stride must be positive, got {self.stride}")
        if self.padding not in PADDING_MODES:
            raise ValueError(f"padding must be one of {PADDING_MODES}, got {self.padding!r}")


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    moving_mean: Tensor
    moving_var: Tensor
    momentum: float = 0.99
    epsilon: float = 1e-3

    @classmethod
    def identity(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            moving_mean=np.zeros(channels, dtype),
            moving_var=np.ones(channels, dtype),
        )


def conv_output_size(size: int, k: int, stride: int, padding: str) -> tuple[int, int, int]:
    """Return ``(out, pad_before, pad_after)`` for one spatial axis.

    ``same`` puts the odd padding cell after (bottom/right).
    """
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + k - size, 0)
        return out, total // 2, total - total // 2
    if padding == "valid":
        if k > size:
            raise ValueError(f"kernel extent {k} larger than input extent {size} under 'valid'")
        return (size - k) // stride + 1, 0, 0
    raise ValueError(f"unknown padding mode {padding!r}")


def _geometry(x: Tensor, kh: int, kw: int, stride: int, padding: str):
    if x.ndim != 4:
        raise ValueError(f"expected 4-D NHWC input, got shape {x.shape}")
    ho, pt, pb = conv_output_size(x.shape[1], kh, stride, padding)
    wo, pl, pr = conv_output_size(x.shape[2], kw, stride, padding)
    return ho, wo, (pt, pb, pl, pr)


def _windows(xp: Tensor, kh: int, kw: int, stride: int, ho: int, wo: int) -> Tensor:
    # (N, ho, wo, C, kh, kw) strided view, no copy.
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def _im2col(x: Tensor, kh: int, kw: int, stride: int, padding: str):
    ho, wo, pads = _geometry(x, kh, kw, stride, padding)
    xp = pad2d(x, *pads) if any(pads) else x
    win = _windows(xp, kh, kw, stride, ho, wo)
    n, c = x.shape[0], x.shape[3]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
    return cols, ho, wo, pads


def _col2im(dcols: Tensor, x_shape, kh: int, kw: int, stride: int, ho: int, wo: int, pads) -> Tensor:
    n, h, w, c = x_shape
    pt, pb, pl, pr = pads
    dxp = np.zeros((n, h + pt + pb, w + pl + pr, c), dtype=dcols.dtype)
    d6 = dcols.reshape(n, ho, wo, kh, kw, c)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride, :] += d6[:, :, :, i, j, :]
    return crop2d(dxp, *pads)


# -- standard convolution ---------------------------------------------------

def conv2d(x: Tensor, k: ConvKernel) -> Tensor:
    """Cross-correlation with stride and valid/same padding."""
    kh, kw, cin, cout = k.weights.shape
    if x.ndim != 4 or x.shape[3] != cin:
        raise ValueError(f"conv2d channel mismatch: input {x.shape}, kernel {k.weights.shape}")
    cols, ho, wo, _ = _im2col(x, kh, kw, k.stride, k.padding)
    out = cols @ k.weights.reshape(kh * kw * cin, cout)
    if k.bias is not None:
        out += k.bias
    return out.reshape(x.shape[0], ho, wo, cout)


def conv2d_backward(x: Tensor, k: ConvKernel, grad: Tensor):
    """Return ``(dx, dweights, dbias)``; ``dbias`` is None without a bias."""
    kh, kw, cin, cout = k.weights.shape
    cols, ho, wo, pads = _im2col(x, kh, kw, k.stride, k.padding)
    g = grad.reshape(-1, cout)
    dw = (cols.T @ g).reshape(k.weights.shape)
    db = g.sum(axis=0) if k.bias is not None else None
    dcols = g @ k.weights.reshape(kh * kw * cin, cout).T
    dx = _col2im(dcols, x.shape, kh, kw, k.stride, ho, wo, pads)
    return dx, dw, db


# -- depthwise convolution --------------------------------------------------

def depthwise_conv2d(x: Tensor, k: ConvKernel) -> Tensor:
    """One spatial filter per input channel; channel count is preserved."""
    kh, kw, c, mult = k.weights.shape
    if mult != 1:
        raise ValueError("depthwise kernels must have channel multiplier 1")
    if x.ndim != 4 or x.shape[3] != c:
        raise ValueError(f"depthwise channel mismatch: input {x.shape}, kernel {k.weights.shape}")
    ho, wo, pads = _geometry(x, kh, kw, k.stride, k.padding)
    xp = pad2d(x, *pads) if any(pads) else x
    s = k.stride
    out = np.zeros((x.shape[0], ho, wo, c), dtype=np.result_type(x, k.weights))
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i : i + (ho - 1) * s + 1 : s, j : j + (wo - 1) * s + 1 : s, :] * k.weights[i, j, :, 0]
    if k.bias is not None:
        out += k.bias
    return out


def depthwise_conv2d_backward(x: Tensor, k: ConvKernel, grad: Tensor):
    kh, kw, c, _ = k.weights.shape
    ho, wo, pads = _geometry(x, kh, kw, k.stride, k.padding)
    xp = pad2d(x, *pads) if any(pads) else x
    s = k.stride
    dxp = np.zeros(xp.shape, dtype=grad.dtype)
    dw = np.zeros(k.weights.shape, dtype=grad.dtype)
    for i in range(kh):
        for j in range(kw):
            sl = (slice(None), slice(i, i + (ho - 1) * s + 1, s), slice(j, j + (wo - 1) * s + 1, s), slice(None))
            dw[i, j, :, 0] = np.einsum("nhwc,nhwc->c", xp[sl], grad)
            dxp[sl] += grad * k.weights[i, j, :, 0]
    db = grad.sum(axis=(0, 1, 2)) if k.bias is not None else None
    return crop2d(dxp, *pads), dw, db


# -- pointwise / separable --------------------------------------------------

def pointwise_conv2d(x: Tensor, k: ConvKernel) -> Tensor:
    """1x1 convolution: a dense map across channels at each pixel."""
    kh, kw, cin, cout = k.weights.shape
    if (kh, kw) != (1, 1):
        raise ValueError(f"pointwise kernel must be 1x1, got {kh}x{kw}")
    if x.ndim != 4 or x.shape[3] != cin:
        raise ValueError(f"pointwise channel mismatch: input {x.shape}, kernel {k.weights.shape}")
    xs = x[:, :: k.stride, :: k.stride, :] if k.stride > 1 else x
    n, h, w, _ = xs.shape
    out = xs.reshape(-1, cin) @ k.weights.reshape(cin, cout)
    if k.bias is not None:
        out += k.bias
    return out.reshape(n, h, w, cout)


def pointwise_conv2d_backward(x: Tensor, k: ConvKernel, grad: Tensor):
    cin, cout = k.weights.shape[2:]
    s = k.stride
    xs = x[:, ::s, ::s, :] if s > 1 else x
    g = grad.reshape(-1, cout)
    w2 = k.weights.reshape(cin, cout)
    dw = (xs.reshape(-1, cin).T @ g).reshape(k.weights.shape)
    db = g.sum(axis=0) if k.bias is not None else None
    dxs = (g @ w2.T).reshape(xs.shape)
    if s > 1:
        dx = np.zeros(x.shape, dtype=dxs.dtype)
        dx[:, ::s, ::s, :] = dxs
    else:
        dx = dxs
    return dx, dw, db


def separable_conv2d(x: Tensor, dw: ConvKernel, pw: ConvKernel) -> Tensor:
    return pointwise_conv2d(depthwise_conv2d(x, dw), pw)


def separable_conv2d_backward(x: Tensor, dw: ConvKernel, pw: ConvKernel, grad: Tensor):
    """Return ``(dx, d_depthwise, d_pointwise, d_pointwise_bias)``."""
    mid = depthwise_conv2d(x, dw)
    dmid, dpw, dpb = pointwise_conv2d_backward(mid, pw, grad)
    dx, ddw, _ = depthwise_conv2d_backward(x, dw, dmid)
    return dx, ddw, dpw, dpb


# -- batch normalisation ----------------------------------------------------

def batch_norm(x: Tensor, s: BatchNormState, mode: str = "infer") -> Tensor:
    """Normalise over N, H, W per channel.

    ``train`` uses batch statistics and updates the moving averages in place;
    ``infer`` uses the stored statistics and mutates nothing.
    """
    c = x.shape[-1]
    if s.gamma.shape != (c,):
        raise ValueError(f"batch_norm channel mismatch: input has {c}, state has {s.gamma.shape}")
    axes = tuple(range(x.ndim - 1))
    if mode == "infer":
        inv = 1.0 / np.sqrt(s.moving_var + s.epsilon)
        return (x - s.moving_mean) * (inv * s.gamma) + s.beta
    if mode != "train":
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    if x.size == 0 or x.shape[0] == 0:
        raise ValueError("batch_norm train mode needs a non-empty batch")
    mu = x.mean(axis=axes)
    var = x.var(axis=axes)
    xhat = (x - mu) / np.sqrt(var + s.epsilon)
    m = s.momentum
    s.moving_mean[...] = s.moving_mean * m + mu * (1 - m)
    s.moving_var[...] = s.moving_var * m + var * (1 - m)
    return xhat * s.gamma + s.beta


def batch_norm_backward(x: Tensor, s: BatchNormState, grad: Tensor, mode: str = "infer"):
    """Return ``(dx, dgamma, dbeta)``; never touches the moving statistics."""
    axes = tuple(range(x.ndim - 1))
    if mode == "infer":
        inv = 1.0 / np.sqrt(s.moving_var + s.epsilon)
        xhat = (x - s.moving_mean) * inv
        return grad * (inv * s.gamma), (grad * xhat).sum(axis=axes), grad.sum(axis=axes)
    mu = x.mean(axis=axes)
    var = x.var(axis=axes)
    inv = 1.0 / np.sqrt(var + s.epsilon)
    xhat = (x - mu) * inv
    dgamma = (grad * xhat).sum(axis=axes)
    dbeta = grad.sum(axis=axes)
    m = x.size // x.shape[-1]
    dxhat = grad * s.gamma
    dx = inv / m * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
    return dx, dgamma, dbeta


# -- activations / pooling / dense ------------------------------------------

def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(x: Tensor, grad: Tensor) -> Tensor:
    return grad * (x > 0)


def relu6(x: Tensor) -> Tensor:
    return np.clip(x, 0, 6).astype(x.dtype, copy=False)


def relu6_backward(x: Tensor, grad: Tensor) -> Tensor:
    return grad * ((x > 0) & (x < 6))


def global_average_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ValueError(f"global_average_pool expects NHWC input, got shape {x.shape}")
    return x.mean(axis=(1, 2))


def global_average_pool_backward(x_shape: Sequence[int], grad: Tensor) -> Tensor:
    n, h, w, c = x_shape
    return np.broadcast_to(grad[:, None, None, :] / (h * w), (n, h, w, c)).copy()


def dense(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"dense shape mismatch: {x.shape} x {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ValueError(f"dense bias shape {b.shape} does not match {w.shape[1]} outputs")
    out = x @ w
    if b is not None:
        out += b
    return out


def dense_backward(x: Tensor, w: Tensor, grad: Tensor):
    """Return ``(dx, dw, db)``."""
    return grad @ w.T, x.T @ grad, grad.sum(axis=0)


def softmax(x: Tensor) -> Tensor:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(y: Tensor, grad: Tensor) -> Tensor:
    """VJP given the softmax *output* ``y``."""
    return y * (grad - (grad * y).sum(axis=-1, keepdims=True))


def log_softmax(x: Tensor) -> Tensor:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# -- attention --------------------------------------------------------------

@dataclass
class AttentionCache:
    weights: Tensor
    scores: Tensor = field(repr=False)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, scale: float, return_weights: bool = False):
    """``softmax(scale * q k^T) v`` over the last two axes (leading axes batch)."""
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query/key depth mismatch: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"key/value length mismatch: {k.shape} vs {v.shape}")
    if not scale > 0:
        raise ValueError(f"attention scale must be positive, got {scale}")
    raw = q @ np.swapaxes(k, -1, -2)
    weights = softmax(raw * scale)
    out = weights @ v
    if return_weights:
        return out, AttentionCache(weights=weights, scores=raw)
    return out


def scaled_dot_attention_backward(q: Tensor, k: Tensor, v: Tensor, scale: float, grad: Tensor):
    """Return ``(dq, dk, dv, dscale)``; ``dscale`` sums over every batch entry."""
    raw = q @ np.swapaxes(k, -1, -2)
    weights = softmax(raw * scale)
    dweights = grad @ np.swapaxes(v, -1, -2)
    dv = np.swapaxes(weights, -1, -2) @ grad
    dscores = softmax_backward(weights, dweights)
    dq = scale * (dscores @ k)
    dk = scale * (np.swapaxes(dscores, -1, -2) @ q)
    dscale = float((dscores * raw).sum())
    return dq, dk, dv, dscale


# -- loss -------------------------------------------------------------------

def _check_labels(labels, d: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= d):
        raise ValueError(f"labels must lie in [0, {d}), got range [{labels.min()}, {labels.max()}]")
    return labels


def sparse_ce_loss(logits: Tensor, labels) -> float:
    """Mean cross-entropy of integer labels, computed in log space."""
    labels = _check_labels(labels, logits.shape[-1])
    logp = log_softmax(logits)
    return float(-logp[np.arange(len(labels)), labels].mean())


def sparse_ce_loss_backward(logits: Tensor, labels) -> Tensor:
    labels = _check_labels(labels, logits.shape[-1])
    g = softmax(logits)
    g[np.arange(len(labels)), labels] -= 1
    return g / len(labels)


def inverse_sqrt_scale(depth: int) -> float:
    return 1.0 / math.sqrt(depth)
