"""Convolution with weight standardization, group normalization and activations.

Tensors are ``[C, H, W]`` (batch size is always one).  Every layer keeps the
state of its last forward call and accumulates parameter gradients in
``grads`` when ``backward`` runs.
"""

from __future__ import annotations

import math

import numpy as np

from .core import ValidationError

EPS_WS = 1e-5
EPS_GN = 1e-5
ACTIVATIONS = ("relu", "tanh", "sigmoid")


# -- functional forms ---------------------------------------------------------------

def standardize_weights(w: np.ndarray, eps: float = EPS_WS):
    """Per output channel: ``(w - mean) / sqrt(var + eps)`` over ``(C_in, k, k)``."""
    flat = w.reshape(w.shape[0], -1)
    mu = flat.mean(axis=1, keepdims=True)
    s = np.sqrt(flat.var(axis=1, keepdims=True) + eps)
    return ((flat - mu) / s).reshape(w.shape), s


def standardize_weights_backward(g_hat: np.ndarray, w_hat: np.ndarray, s: np.ndarray) -> np.ndarray:
    g = g_hat.reshape(g_hat.shape[0], -1)
    wh = w_hat.reshape(w_hat.shape[0], -1)
    gw = (g - g.mean(axis=1, keepdims=True) - wh * (g * wh).mean(axis=1, keepdims=True)) / s
    return gw.reshape(g_hat.shape)


IM2COL_BUDGET = 64 * 2 ** 20  # bytes of unfolded input held at once


def _row_chunks(cin, k, h, wd):
    rows = max(1, IM2COL_BUDGET // (8 * cin * k * k * wd))
    return [(r, min(r + rows, h)) for r in range(0, h, rows)]


def _unfold(xp, r0, r1, k, wd):
    """Columns ``[C_in * k * k, (r1 - r0) * W]`` for output rows ``r0:r1``."""
    win = np.lib.stride_tricks.sliding_window_view(xp[:, r0:r1 + k - 1, :wd + k - 1], (k, k), axis=(1, 2))
    return win.transpose(0, 3, 4, 1, 2).reshape(xp.shape[0] * k * k, -1)


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Zero-padded 'same' cross-correlation via row-chunked im2col."""
    cout, cin, k, _ = w.shape
    if x.ndim != 3 or x.shape[0] != cin:
        raise ValidationError(f"expected {cin} input channels, got shape {x.shape}")
    _, h, wd = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    w2 = w.reshape(cout, -1)
    y = np.empty((cout, h, wd))
    for r0, r1 in _row_chunks(cin, k, h, wd):
        y[:, r0:r1] = (w2 @ _unfold(xp, r0, r1, k, wd)).reshape(cout, r1 - r0, wd)
    y += b[:, None, None]
    return y


def conv2d_backward(g: np.ndarray, x: np.ndarray, w: np.ndarray):
    """Gradients ``(grad_x, grad_w, grad_b)`` of :func:`conv2d_forward`."""
    cout, cin, k, _ = w.shape
    _, h, wd = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    gw = np.zeros((cout, cin * k * k))
    for r0, r1 in _row_chunks(cin, k, h, wd):
        gw += g[:, r0:r1].reshape(cout, -1) @ _unfold(xp, r0, r1, k, wd).T
    # the input gradient is a 'same' correlation with the flipped, transposed kernel
    w_flip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    gx = conv2d_forward(g, w_flip, np.zeros(cin))
    return gx, gw.reshape(w.shape), g.sum(axis=(1, 2))


def conv2d_ws_forward(x, w, b, eps: float = EPS_WS):
    w_hat, s = standardize_weights(w, eps)
    return conv2d_forward(x, w_hat, b), (x, w_hat, s)


def conv2d_ws_backward(g, saved):
    x, w_hat, s = saved
    gx, gw_hat, gb = conv2d_backward(g, x, w_hat)
    return gx, standardize_weights_backward(gw_hat, w_hat, s), gb


def group_norm_forward(x, gamma, beta, groups: int, eps: float = EPS_GN):
    c = x.shape[0]
    if c % groups:
        raise ValidationError(f"{c} channels are not divisible into {groups} groups")
    xg = x.reshape(groups, -1)
    mu = xg.mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(xg.var(axis=1, keepdims=True) + eps)
    x_hat = ((xg - mu) * inv).reshape(x.shape)
    y = gamma[:, None, None] * x_hat + beta[:, None, None]
    return y, (x_hat, inv, gamma, groups)


def group_norm_backward(g, saved):
    x_hat, inv, gamma, groups = saved
    g_gamma = np.sum(g * x_hat, axis=(1, 2))
    g_beta = np.sum(g, axis=(1, 2))
    gh = (g * gamma[:, None, None]).reshape(groups, -1)
    xh = x_hat.reshape(groups, -1)
    gx = inv * (gh - gh.mean(axis=1, keepdims=True) - xh * (gh * xh).mean(axis=1, keepdims=True))
    return gx.reshape(g.shape), g_gamma, g_beta


def activation_forward(kind: str, x):
    if kind == "relu":
        return np.maximum(x, 0.0), x > 0
    if kind == "tanh":
        y = np.tanh(x)
        return y, y
    if kind == "sigmoid":
        # split by sign so exp never overflows
        e = np.exp(-np.abs(x))
        y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return y, y
    raise ValidationError(f"unknown activation {kind!r}")


def activation_backward(kind: str, g, saved):
    if kind == "relu":
        return g * saved
    if kind == "tanh":
        return g * (1.0 - saved * saved)
    return g * saved * (1.0 - saved)


# -- layer objects -------------------------------------------------------------------

class Layer:
    """Base class: ``params``/``grads`` dicts and a single forward cache."""

    def __init__(self):
        self.params: dict = {}
        self.grads: dict = {}
        self._saved = None

    def zero_grad(self) -> None:
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def _take_saved(self):
        if self._saved is None:
            raise RuntimeError(f"{type(self).__name__}.backward called before forward")
        saved, self._saved = self._saved, None
        return saved

    def _accumulate(self, **grads) -> None:
        for k, v in grads.items():
            self.grads[k] = self.grads.get(k, 0.0) + v


class Conv2dWS(Layer):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng=None):
        super().__init__()
        if kernel % 2 != 1:
            raise ValidationError("kernel size must be odd")
        rng = np.random.default_rng(0) if rng is None else rng
        bound = 1.0 / math.sqrt(c_in * kernel * kernel)
        self.params = {
            "weight": rng.uniform(-bound, bound, (c_out, c_in, kernel, kernel)),
            "bias": np.zeros(c_out),
        }
        self.zero_grad()

    @property
    def in_channels(self) -> int:
        return self.params["weight"].shape[1]

    @property
    def out_channels(self) -> int:
        return self.params["weight"].shape[0]

    def forward(self, x):
        y, self._saved = conv2d_ws_forward(x, self.params["weight"], self.params["bias"])
        return y

    def backward(self, g):
        gx, gw, gb = conv2d_ws_backward(g, self._take_saved())
        self._accumulate(weight=gw, bias=gb)
        return gx


class GroupNorm(Layer):
    def __init__(self, channels: int, groups: int):
        super().__init__()
        if groups < 1 or channels % groups:
            raise ValidationError(f"{channels} channels are not divisible into {groups} groups")
        self.groups = groups
        self.params = {"gamma": np.ones(channels), "beta": np.zeros(channels)}
        self.zero_grad()

    def forward(self, x):
        y, self._saved = group_norm_forward(x, self.params["gamma"], self.params["beta"], self.groups)
        return y

    def backward(self, g):
        gx, gg, gb = group_norm_backward(g, self._take_saved())
        self._accumulate(gamma=gg, beta=gb)
        return gx


class Activation(Layer):
    def __init__(self, kind: str):
        super().__init__()
        if kind not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {kind!r}")
        self.kind = kind

    def forward(self, x):
        y, self._saved = activation_forward(self.kind, x)
        return y

    def backward(self, g):
        return activation_backward(self.kind, g, self._take_saved())
