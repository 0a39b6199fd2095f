"""Pure-numpy kernel implementations (im2col + BLAS matmul)."""

import numpy as np


def _im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for ky in range(kh):
        for kx in range(kw):
            cols[:, :, ky, kx] = xp[:, :, ky:ky + stride * oh:stride,
                                    kx:kx + stride * ow:stride]
    return cols.reshape(n, c * kh * kw, oh * ow), oh, ow


def conv2d(x, w, stride=1, pad=None):
    cout, cin, kh, kw = w.shape
    if pad is None:
        pad = kh // 2
    cols, oh, ow = _im2col(x, kh, kw, stride, pad)
    y = np.matmul(w.reshape(cout, cin * kh * kw), cols)
    return np.ascontiguousarray(y.reshape(x.shape[0], cout, oh, ow))


def conv2d_input_grad(dy, w, in_hw, stride=1, pad=None):
    """Gradient of conv2d w.r.t. its input, as a full correlation.

    The incoming gradient is dilated by the stride, then convolved with the
    spatially flipped kernel (in/out channels swapped).
    """
    n, cout, oh, ow = dy.shape
    _, cin, kh, kw = w.shape
    if pad is None:
        pad = kh // 2
    h, wd = in_hw
    if stride == 1:
        u = dy
    else:
        u = np.zeros((n, cout, (oh - 1) * stride + 1, (ow - 1) * stride + 1),
                     dtype=dy.dtype)
        u[:, :, ::stride, ::stride] = dy
    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    part = conv2d(u, wt, stride=1, pad=kh - 1)
    dxp = np.zeros((n, cin, h + 2 * pad, wd + 2 * pad), dtype=dy.dtype)
    ph, pw = part.shape[2], part.shape[3]
    dxp[:, :, :ph, :pw] = part
    return np.ascontiguousarray(dxp[:, :, pad:pad + h, pad:pad + wd])


def conv2d_weight_grad(x, dy, kernel_hw, stride=1, pad=None):
    n, cout, oh, ow = dy.shape
    cin = x.shape[1]
    kh, kw = kernel_hw
    if pad is None:
        pad = kh // 2
    cols, _, _ = _im2col(x, kh, kw, stride, pad)
    dyf = dy.reshape(n, cout, oh * ow)
    dw = np.matmul(dyf, cols.transpose(0, 2, 1)).sum(axis=0)
    return np.ascontiguousarray(dw.reshape(cout, cin, kh, kw))


def splat_gaussians(centers_yx, sigma, height, width):
    out = np.zeros((height, width), dtype=np.float64)
    if centers_yx.shape[0] == 0:
        return out
    ys = np.arange(height, dtype=np.float64)[:, None]
    xs = np.arange(width, dtype=np.float64)[None, :]
    inv = 1.0 / (2.0 * sigma * sigma)
    for k in range(centers_yx.shape[0]):
        cy, cx = centers_yx[k, 0], centers_yx[k, 1]
        out += np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) * inv)
    return out
