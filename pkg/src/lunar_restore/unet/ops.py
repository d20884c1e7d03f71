"""NCHW tensor primitives with hand-written backward passes.

Every ``*_forward`` returns ``(output, cache)``; the matching ``*_backward``
takes the upstream gradient and that cache.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _im2col(x, k):
    """``[N, C, H, W]`` -> ``[N*H*W, C*k*k]`` patches for a stride-1 same conv."""
    n, c, h, w = x.shape
    p = k // 2
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # n, c, h, w, k, k
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * k * k)


def conv2d_forward(x, weight, bias):
    """Stride-1 convolution (cross-correlation) with zero same-padding, odd kernel."""
    n, _, h, w = x.shape
    cout, _, k, _ = weight.shape
    cols = _im2col(x, k)
    y = cols @ weight.reshape(cout, -1).T
    y += bias
    y = y.reshape(n, h, w, cout).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(y), (cols, x.shape)


def conv2d_backward(dy, cache, weight):
    cols, x_shape = cache
    cout = weight.shape[0]
    dy2 = dy.transpose(0, 2, 3, 1).reshape(-1, cout)
    dw = (dy2.T @ cols).reshape(weight.shape)
    db = dy2.sum(axis=0)
    # d/dx of a same-padded correlation is the same-padded correlation of dy
    # with the spatially flipped, channel-swapped kernel.
    w_t = np.ascontiguousarray(weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    k = weight.shape[2]
    dcols = _im2col(dy, k)
    n, c, h, w = x_shape
    dx = (dcols @ w_t.reshape(c, -1).T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(dx), dw, db


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(dy, y):
    return dy * (y > 0)


def maxpool2_forward(x):
    """2x2 max-pool, stride 2. Ties route the gradient to the first maximum."""
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, h // 2, w // 2, 4
    )
    idx = win.argmax(axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return y, (idx, x.shape)


def maxpool2_backward(dy, cache):
    idx, (n, c, h, w) = cache
    dwin = np.zeros((n, c, h // 2, w // 2, 4), dtype=dy.dtype)
    np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=-1)
    dx = dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return dx.reshape(n, c, h, w)


def upconv2_forward(x, weight, bias):
    """2x2 transposed convolution, stride 2; ``weight`` is ``[C_in, C_out, 2, 2]``."""
    n, cin, h, w = x.shape
    cout = weight.shape[1]
    x2 = x.transpose(0, 2, 3, 1).reshape(-1, cin)
    y = (x2 @ weight.reshape(cin, -1)).reshape(n, h, w, cout, 2, 2)
    y = y.transpose(0, 3, 1, 4, 2, 5).reshape(n, cout, 2 * h, 2 * w)
    y += bias[None, :, None, None]
    return y, x2


def upconv2_backward(dy, cache, weight):
    x2 = cache
    cin, cout = weight.shape[:2]
    n, _, h2, w2 = dy.shape
    h, w = h2 // 2, w2 // 2
    dyr = dy.reshape(n, cout, h, 2, w, 2).transpose(0, 2, 4, 1, 3, 5).reshape(-1, cout * 4)
    dw = (x2.T @ dyr).reshape(weight.shape)
    db = dy.sum(axis=(0, 2, 3))
    dx = (dyr @ weight.reshape(cin, -1).T).reshape(n, h, w, cin).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(dx), dw, db


def sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out
