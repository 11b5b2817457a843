"""Layer primitives: 2-D convolution (same padding, stride 1), 2x2 max
pooling, and dense affine maps, each with an exact reverse-mode backward.

All arrays are float64. Convolution uses an im2col layout so both passes
are plain matrix products.
"""

import numpy as np


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """x: (B, C, H, W), w: (O, C, k, k) with k odd, b: (O,).

    Returns (out, cache) where out is (B, O, H, W) (same padding, stride 1).
    """
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    pad = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    # cols[b, c*k*k + r*k + s, p] = padded input under kernel tap (r, s) at pixel p
    cols = np.empty((B, C, k * k, H * W))
    for r in range(k):
        for s in range(k):
            cols[:, :, r * k + s] = xp[:, :, r : r + H, s : s + W].reshape(B, C, H * W)
    cols = cols.reshape(B, C * k * k, H * W)
    w2 = w.reshape(O, C * k * k)
    out = (np.matmul(w2, cols) + b[:, None]).reshape(B, O, H, W)
    cache = (cols, w, x.shape)
    return out, cache


def conv2d_backward(dout: np.ndarray, cache):
    cols, w, x_shape = cache
    B, C, H, W = x_shape
    O, _, k, _ = w.shape
    pad = (k - 1) // 2
    dflat = dout.reshape(B, O, H * W)
    dw = np.einsum("bop,bcp->oc", dflat, cols).reshape(w.shape)
    db = dflat.sum(axis=(0, 2))
    dcols = np.matmul(w.reshape(O, -1).T, dflat)  # (B, C*k*k, H*W)
    dcols = dcols.reshape(B, C, k * k, H, W)
    dxp = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
    for r in range(k):
        for s in range(k):
            dxp[:, :, r : r + H, s : s + W] += dcols[:, :, r * k + s]
    dx = dxp[:, :, pad : pad + H, pad : pad + W]
    return dx, dw, db


def maxpool2_forward(x: np.ndarray):
    """2x2 max pooling, stride 2; odd trailing rows/columns are dropped."""
    B, C, H, W = x.shape
    h, w = H // 2, W // 2
    xc = x[:, :, : 2 * h, : 2 * w]
    windows = xc.reshape(B, C, h, 2, w, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, h, w, 4)
    idx = windows.argmax(axis=-1)  # first max wins on ties
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def maxpool2_backward(dout: np.ndarray, cache):
    idx, x_shape = cache
    B, C, H, W = x_shape
    h, w = H // 2, W // 2
    dwin = np.zeros((B, C, h, w, 4))
    np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
    dx = np.zeros(x_shape)
    dx[:, :, : 2 * h, : 2 * w] = (
        dwin.reshape(B, C, h, w, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, 2 * h, 2 * w)
    )
    return dx


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """x: (B, D_in), w: (D_out, D_in), b: (D_out,)."""
    return x @ w.T + b, x


def dense_backward(dout: np.ndarray, cache, w: np.ndarray):
    x = cache
    dw = dout.T @ x
    db = dout.sum(axis=0)
    dx = dout @ w
    return dx, dw, db
