"""Single-pass compiled kernels for the memory-bound layer math.

Everything here is a fused rewrite of an adjacent numpy expression in
ops.py's docstrings; the loops exist purely so batch-norm normalization,
the tanh/batch-norm backward chain, and 2x2 max pooling touch each array
once instead of once per ufunc. fastmath stays off so results are
bit-deterministic and dtype-faithful (float32 training, float64 gradient
checks both dispatch here).
"""

import numpy as np
from numba import njit


@njit(cache=True)
def bn_normalize(x, mu, inv, gamma, beta, xh, y):
    """xh = (x - mu) * inv; y = xh * gamma + beta. x viewed as (rows, C)."""
    rows, nc = x.shape
    for i in range(rows):
        for c in range(nc):
            h = (x[i, c] - mu[c]) * inv[c]
            xh[i, c] = h
            y[i, c] = h * gamma[c] + beta[c]


@njit(cache=True)
def tanh_bn_reduce(dy, a, da, dgamma, dbeta, xh):
    """da = dy * (1 - a*a); dgamma = sum(da * xh); dbeta = sum(da).

    First half of the fused tanh+batch-norm backward: produces the
    activation-gradient array and both per-channel reductions in one pass.
    """
    rows, nc = dy.shape
    for c in range(nc):
        dgamma[c] = 0.0
        dbeta[c] = 0.0
    for i in range(rows):
        for c in range(nc):
            g = dy[i, c] * (1.0 - a[i, c] * a[i, c])
            da[i, c] = g
            dgamma[c] += g * xh[i, c]
            dbeta[c] += g


@njit(cache=True)
def bn_input_grad(da, xh, c1, c2, c3, dx):
    """dx = da * c1 - xh * c2 - c3 with per-channel coefficients."""
    rows, nc = da.shape
    for i in range(rows):
        for c in range(nc):
            dx[i, c] = da[i, c] * c1[c] - xh[i, c] * c2[c] - c3[c]


@njit(cache=True)
def maxpool2_forward(x, out, idx):
    """2x2 stride-2 max; idx records the winner 0..3 in row-major window
    order, first occurrence winning ties. Trailing odd row/col ignored."""
    nb, h2, w2, nc = out.shape
    for b in range(nb):
        for i in range(h2):
            for j in range(w2):
                for c in range(nc):
                    best = x[b, 2 * i, 2 * j, c]
                    k = 0
                    v = x[b, 2 * i, 2 * j + 1, c]
                    if v > best:
                        best = v
                        k = 1
                    v = x[b, 2 * i + 1, 2 * j, c]
                    if v > best:
                        best = v
                        k = 2
                    v = x[b, 2 * i + 1, 2 * j + 1, c]
                    if v > best:
                        best = v
                        k = 3
                    out[b, i, j, c] = best
                    idx[b, i, j, c] = k


@njit(cache=True)
def maxpool2_backward(dy, idx, dx):
    """Route each pooled gradient to its recorded argmax; dx pre-zeroed."""
    nb, h2, w2, nc = dy.shape
    for b in range(nb):
        for i in range(h2):
            for j in range(w2):
                for c in range(nc):
                    k = idx[b, i, j, c]
                    dx[b, 2 * i + (k >> 1), 2 * j + (k & 1), c] = dy[b, i, j, c]


@njit(cache=True)
def col2im_add(dcols, dxp):
    """Scatter-add (B, h, w, k, k, C) window gradients into padded input."""
    nb, h, w, k, _, nc = dcols.shape
    for b in range(nb):
        for i in range(h):
            for j in range(w):
                for ki in range(k):
                    for kj in range(k):
                        for c in range(nc):
                            dxp[b, i + ki, j + kj, c] += dcols[b, i, j, ki, kj, c]
