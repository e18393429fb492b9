"""Differentiable layer primitives (forward + explicit backward).

Activations are channels-last: 4-D tensors are (batch, height, width,
channels), 2-D tensors are (batch, features). Convolution weights are stored
gemm-ready as (k*k*cin, cout) with rows ordered (ki, kj, cin), matching the
column order im2col produces. Every forward returns (output, cache) and the
matching backward consumes that cache; caches are plain tuples.

The two-bank convolution selects a kernel bank per output position: the
spectral bank inside the top-left extent x extent square, the abundance
bank elsewhere. Square masks run as three rectangle convolutions (no
gather); arbitrary masks fall back to computing both banks and blending,
which costs twice the flops but keeps the op total.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DataError, ShapeError
from . import _kernels as _k


# ---------------------------------------------------------------------------
# im2col plumbing
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, k: int) -> np.ndarray:
    """Gather k x k windows of a padded slice into (B*h*w, k*k*C) rows."""
    if k == 1:
        nb, h, w, nc = xp.shape
        return np.ascontiguousarray(xp).reshape(nb * h * w, nc)
    win = sliding_window_view(xp, (k, k), axis=(1, 2))
    nb, h, w = win.shape[:3]
    nc = xp.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    return cols.reshape(nb * h * w, k * k * nc)


def _rects(h: int, w: int, extent: int):
    """Spectral square + L-shaped remainder as up to three rectangles."""
    out = []
    e = min(extent, h, w)
    if e > 0:
        out.append(("s", 0, e, 0, e))
    if e < h:
        out.append(("a", e, h, 0, w))
    if 0 < e < w:
        out.append(("a", 0, e, e, w))
    return out


def _square_extent(mask: np.ndarray) -> int | None:
    """Return e if mask == (r < e) & (c < e) for some e, else None."""
    h, w = mask.shape
    e = int(mask[0].sum()) if mask[0, 0] else 0
    probe = np.zeros_like(mask)
    probe[:e, :e] = True
    return e if (probe == mask).all() else None


# ---------------------------------------------------------------------------
# two-bank locally shared convolution
# ---------------------------------------------------------------------------

def lsconv_forward(x, bank_spectral, bank_abundance, bias, mask):
    """Same-padding convolution with a per-position choice of kernel bank.

    Args:
        x: (B, H, W, Cin) input.
        bank_spectral / bank_abundance: (k*k*Cin, Cout) weights.
        bias: (Cout,) shared by both banks.
        mask: (H, W) bool; True positions use the spectral bank.

    Returns:
        (y, cache) with y of shape (B, H, W, Cout).
    """
    nb, h, w, cin = x.shape
    ws, wa = bank_spectral, bank_abundance
    if ws.shape != wa.shape:
        raise ShapeError(f"bank shapes differ: {ws.shape} vs {wa.shape}")
    kk = ws.shape[0] // cin
    k = int(round(kk ** 0.5))
    if k * k * cin != ws.shape[0]:
        raise ShapeError(
            f"bank rows {ws.shape[0]} not a square kernel over {cin} channels"
        )
    if k % 2 != 1:
        raise ShapeError(f"kernel size must be odd for same padding, got {k}")
    if mask.shape != (h, w):
        raise ShapeError(f"mask shape {mask.shape} != spatial dims ({h}, {w})")
    cout = ws.shape[1]
    pad = (k - 1) // 2
    extent = _square_extent(mask)

    if extent is not None:
        if k == 1:
            xp = x
        else:
            xp = np.zeros((nb, h + 2 * pad, w + 2 * pad, cin), x.dtype)
            xp[:, pad : pad + h, pad : pad + w, :] = x
        y = np.empty((nb, h, w, cout), x.dtype)
        cols_list = []
        for tag, r0, r1, c0, c1 in _rects(h, w, extent):
            cols = _im2col(xp[:, r0 : r1 + 2 * pad, c0 : c1 + 2 * pad, :], k)
            wk = ws if tag == "s" else wa
            y[:, r0:r1, c0:c1, :] = cols.dot(wk).reshape(nb, r1 - r0, c1 - c0, cout)
            cols_list.append(cols)
        y += bias
        cache = ("rect", x.shape, k, pad, extent, cols_list, ws, wa)
        return y, cache

    # arbitrary mask: run both banks everywhere and blend positionwise
    if k == 1:
        xp = x
    else:
        xp = np.zeros((nb, h + 2 * pad, w + 2 * pad, cin), x.dtype)
        xp[:, pad : pad + h, pad : pad + w, :] = x
    cols = _im2col(xp, k)
    ys = cols.dot(ws).reshape(nb, h, w, cout)
    ya = cols.dot(wa).reshape(nb, h, w, cout)
    y = np.where(mask[None, :, :, None], ys, ya) + bias
    cache = ("blend", x.shape, k, pad, mask, cols, ws, wa)
    return y, cache


def lsconv_backward(dy, cache, need_dx: bool = True):
    """Gradients of lsconv_forward: (dx, d_spectral, d_abundance, dbias).

    Each bank accumulates only over the positions it produced; dx is None
    when need_dx is False (saves the layer-1 input gradient nobody uses).
    """
    mode = cache[0]
    _, x_shape, k, pad, sel, cols_data, ws, wa = cache
    nb, h, w, cin = x_shape
    cout = ws.shape[1]
    dbias = dy.sum(axis=(0, 1, 2))

    if mode == "rect":
        extent = sel
        dws = np.zeros_like(ws)
        dwa = np.zeros_like(wa)
        dxp = None
        if need_dx:
            if k == 1:
                dxp = np.zeros((nb, h, w, cin), dy.dtype)
            else:
                dxp = np.zeros((nb, h + 2 * pad, w + 2 * pad, cin), dy.dtype)
        for (tag, r0, r1, c0, c1), cols in zip(_rects(h, w, extent), cols_data):
            d = np.ascontiguousarray(dy[:, r0:r1, c0:c1, :]).reshape(-1, cout)
            wk = ws if tag == "s" else wa
            dwk = cols.T.dot(d)
            if tag == "s":
                dws += dwk
            else:
                dwa += dwk
            if need_dx:
                rh, rw = r1 - r0, c1 - c0
                dcols = d.dot(wk.T)
                if k == 1:
                    dxp[:, r0:r1, c0:c1, :] += dcols.reshape(nb, rh, rw, cin)
                else:
                    _k.col2im_add(
                        dcols.reshape(nb, rh, rw, k, k, cin),
                        dxp[:, r0 : r1 + 2 * pad, c0 : c1 + 2 * pad, :],
                    )
        dx = None
        if need_dx:
            dx = dxp if k == 1 else dxp[:, pad : pad + h, pad : pad + w, :]
            dx = np.ascontiguousarray(dx)
        return dx, dws, dwa, dbias

    mask = sel
    cols = cols_data
    dyf = dy.reshape(-1, cout)
    mflat = np.broadcast_to(mask[None, :, :, None], dy.shape).reshape(-1, cout)
    ds = np.where(mflat, dyf, 0)
    da = np.where(mflat, 0, dyf)
    dws = cols.T.dot(ds)
    dwa = cols.T.dot(da)
    dx = None
    if need_dx:
        dcols = ds.dot(ws.T) + da.dot(wa.T)
        if k == 1:
            dx = dcols.reshape(nb, h, w, cin).copy()
        else:
            dxp = np.zeros((nb, h + 2 * pad, w + 2 * pad, cin), dy.dtype)
            _k.col2im_add(dcols.reshape(nb, h, w, k, k, cin), dxp)
            dx = np.ascontiguousarray(dxp[:, pad : pad + h, pad : pad + w, :])
    return dx, dws, dwa, dbias


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

@dataclass
class BNState:
    """Running statistics shared between training and inference."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5
    updates: int = 0

    @classmethod
    def create(cls, channels: int, dtype=np.float32, momentum=0.9, eps=1e-5):
        return cls(
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
            momentum=momentum,
            eps=eps,
        )


def _rows_view(x: np.ndarray) -> np.ndarray:
    """(B, ..., C) as a contiguous (rows, C) view."""
    return x.reshape(-1, x.shape[-1])


def batchnorm_forward(x, gamma, beta, state: BNState, mode: str):
    """Per-channel normalization over all non-channel axes.

    Train mode normalizes by biased batch statistics and folds them into the
    running estimates with the state's momentum; eval mode reuses the running
    estimates and requires at least one prior train-mode update.
    """
    if mode not in ("train", "eval"):
        raise DataError(f"unknown batchnorm mode {mode!r}")
    xr = _rows_view(x)
    rows = xr.shape[0]
    if mode == "train":
        if x.shape[0] < 2:
            raise ShapeError(f"train-mode batch must be >= 2, got {x.shape[0]}")
        s1 = np.einsum("ij->j", xr)
        s2 = np.einsum("ij,ij->j", xr, xr)
        mu = s1 / rows
        var = np.maximum(s2 / rows - mu * mu, 0.0)
        inv = 1.0 / np.sqrt(var + np.asarray(state.eps, x.dtype))
        mom = np.asarray(state.momentum, x.dtype)
        state.running_mean = mom * state.running_mean + (1 - mom) * mu
        state.running_var = mom * state.running_var + (1 - mom) * var
        state.updates += 1
    else:
        if state.updates == 0:
            raise DataError("batchnorm eval requested before any train-mode update")
        mu = state.running_mean.astype(x.dtype)
        inv = 1.0 / np.sqrt(
            state.running_var.astype(x.dtype) + np.asarray(state.eps, x.dtype)
        )
    xh = np.empty_like(x)
    y = np.empty_like(x)
    _k.bn_normalize(
        xr,
        mu.astype(x.dtype),
        inv.astype(x.dtype),
        gamma,
        beta,
        _rows_view(xh),
        _rows_view(y),
    )
    return y, (xh, inv.astype(x.dtype), gamma, rows, mode)


def batchnorm_backward(dy, cache):
    """Batch-norm gradient.

    Train mode applies the full batch-statistics chain rule; eval mode
    treats the running statistics as constants, so the input gradient is a
    plain per-channel scale.
    """
    xh, inv, gamma, rows, mode = cache
    dyr = _rows_view(dy)
    xhr = _rows_view(xh)
    dgamma = np.einsum("ij,ij->j", dyr, xhr)
    dbeta = np.einsum("ij->j", dyr)
    c1 = gamma * inv
    if mode == "train":
        c2 = c1 * dgamma / rows
        c3 = c1 * dbeta / rows
    else:
        c2 = np.zeros_like(c1)
        c3 = np.zeros_like(c1)
    dx = np.empty_like(dy)
    _k.bn_input_grad(dyr, xhr, c1, c2, c3, _rows_view(dx))
    return dx, dgamma, dbeta


def tanh_bn_backward(dy, act, bn_cache):
    """Fused backward of batchnorm -> tanh given the tanh output `act`.

    Exactly the composition tanh_backward then batchnorm_backward, in two
    array passes instead of five.
    """
    xh, inv, gamma, rows, mode = bn_cache
    dyr = _rows_view(dy)
    ar = _rows_view(act)
    xhr = _rows_view(xh)
    da = np.empty_like(dy)
    dgamma = np.empty_like(gamma)
    dbeta = np.empty_like(gamma)
    _k.tanh_bn_reduce(dyr, ar, _rows_view(da), dgamma, dbeta, xhr)
    c1 = gamma * inv
    if mode == "train":
        c2 = c1 * dgamma / rows
        c3 = c1 * dbeta / rows
    else:
        c2 = np.zeros_like(c1)
        c3 = np.zeros_like(c1)
    dx = np.empty_like(dy)
    _k.bn_input_grad(_rows_view(da), xhr, c1, c2, c3, _rows_view(dx))
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# activation, pooling, fully connected, loss
# ---------------------------------------------------------------------------

def tanh_forward(x):
    y = np.tanh(x)
    return y, y


def tanh_backward(dy, y):
    return dy * (1.0 - y * y)


def maxpool2_forward(x):
    """2x2 stride-2 max pooling; odd trailing row/col is dropped."""
    nb, h, w, nc = x.shape
    if h < 2 or w < 2:
        raise ShapeError(f"pooling needs spatial dims >= 2, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    y = np.empty((nb, h2, w2, nc), x.dtype)
    idx = np.empty((nb, h2, w2, nc), np.uint8)
    _k.maxpool2_forward(x, y, idx)
    return y, (idx, x.shape)


def maxpool2_backward(dy, cache):
    """Route gradient to each window's argmax (first occurrence, row-major)."""
    idx, x_shape = cache
    dx = np.zeros(x_shape, dy.dtype)
    _k.maxpool2_backward(dy, idx, dx)
    return dx


def fc_forward(x, weights, bias):
    return x.dot(weights) + bias, (x, weights)


def fc_backward(dy, cache):
    x, weights = cache
    return dy.dot(weights.T), x.T.dot(dy), dy.sum(axis=0)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient wrt logits.

    Softmax is stabilized by max subtraction; grad = (softmax - onehot) / B.
    """
    labels = np.asarray(labels)
    nb = logits.shape[0]
    if labels.shape != (nb,):
        raise ShapeError(f"labels shape {labels.shape} != ({nb},)")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise DataError("label outside class range")
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(denom)
    loss = float(-logp[np.arange(nb), labels].mean())
    grad = ez / denom
    grad[np.arange(nb), labels] -= 1.0
    grad /= nb
    return loss, grad.astype(logits.dtype)
