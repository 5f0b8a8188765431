"""Plain-numpy forward primitives used by the policy network and the fusion head."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

sigmoid = expit


def relu(x):
    return np.maximum(x, 0.0)


def leaky_relu(x, slope: float = 0.2):
    return np.where(x >= 0.0, x, slope * x)


def elu(x):
    return np.where(x > 0.0, x, np.expm1(np.minimum(x, 0.0)))


def softmax(x, axis: int = -1):
    x = np.asarray(x, dtype=np.float64)
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` with weight stored as ``(out, in)``."""
    out = x @ weight.T
    if bias is not None:
        out = out + bias
    return out


def conv2d(x, weight, bias, stride: int = 1, padding: int = 0):
    """2-D cross-correlation of a ``(C, H, W)`` input with ``(O, C, k, k)`` kernels."""
    out_ch, in_ch, kh, kw = weight.shape
    if x.shape[0] != in_ch:
        raise ValueError(f"conv input has {x.shape[0]} channels, kernel expects {in_ch}")
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    if x.shape[1] < kh or x.shape[2] < kw:
        raise ValueError(f"conv input {x.shape[1:]} smaller than kernel {(kh, kw)}")
    windows = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    # windows: (C, H', W', kh, kw)
    out = np.tensordot(weight, windows, axes=([1, 2, 3], [0, 3, 4]))
    return out + bias[:, None, None]
