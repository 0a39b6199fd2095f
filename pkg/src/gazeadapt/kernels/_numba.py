"""Numba @njit kernel implementations.

Convolutions run channels-last internally so the innermost loops walk
contiguous memory; wrappers transpose at the boundary and keep the public
NCHW layout. All accumulations happen in a fixed serial order, so results
are bit-reproducible run to run.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _conv2d_nhwc(xp, w, stride, oh, ow):
    n = xp.shape[0]
    cin = xp.shape[3]
    cout, kh, kw = w.shape[0], w.shape[1], w.shape[2]
    y = np.zeros((n, cout, oh, ow))
    for ni in range(n):
        for oy in range(oh):
            iy0 = oy * stride
            for ox in range(ow):
                ix0 = ox * stride
                for co in range(cout):
                    acc = 0.0
                    for ky in range(kh):
                        for kx in range(kw):
                            xrow = xp[ni, iy0 + ky, ix0 + kx]
                            wrow = w[co, ky, kx]
                            for ci in range(cin):
                                acc += xrow[ci] * wrow[ci]
                    y[ni, co, oy, ox] = acc
    return y


@njit(cache=True)
def _input_grad_nhwc(dyt, wt, stride, pad, h, wd, oh, ow):
    # dyt: (n, oh, ow, cout); wt: (kh, kw, cin, cout)
    n = dyt.shape[0]
    cout = dyt.shape[3]
    kh, kw, cin = wt.shape[0], wt.shape[1], wt.shape[2]
    dx = np.zeros((n, cin, h, wd))
    for ni in range(n):
        for iy in range(h):
            for ix in range(wd):
                for ci in range(cin):
                    acc = 0.0
                    for ky in range(kh):
                        num_y = iy + pad - ky
                        if num_y < 0 or num_y % stride != 0:
                            continue
                        oy = num_y // stride
                        if oy >= oh:
                            continue
                        for kx in range(kw):
                            num_x = ix + pad - kx
                            if num_x < 0 or num_x % stride != 0:
                                continue
                            ox = num_x // stride
                            if ox >= ow:
                                continue
                            drow = dyt[ni, oy, ox]
                            wrow = wt[ky, kx, ci]
                            for co in range(cout):
                                acc += drow[co] * wrow[co]
                    dx[ni, ci, iy, ix] = acc
    return dx


@njit(cache=True)
def _weight_grad(xp, dy, stride, kh, kw):
    n, cin = xp.shape[0], xp.shape[1]
    cout, oh, ow = dy.shape[1], dy.shape[2], dy.shape[3]
    dw = np.zeros((cout, cin, kh, kw))
    for co in range(cout):
        for ci in range(cin):
            for ky in range(kh):
                for kx in range(kw):
                    acc = 0.0
                    for ni in range(n):
                        for oy in range(oh):
                            iy = oy * stride + ky
                            for ox in range(ow):
                                acc += dy[ni, co, oy, ox] * xp[ni, ci, iy, ox * stride + kx]
                    dw[co, ci, ky, kx] = acc
    return dw


@njit(cache=True)
def _splat(centers_yx, sigma, height, width):
    out = np.zeros((height, width))
    inv = 1.0 / (2.0 * sigma * sigma)
    for k in range(centers_yx.shape[0]):
        cy = centers_yx[k, 0]
        cx = centers_yx[k, 1]
        for y in range(height):
            dy2 = (y - cy) * (y - cy)
            for x in range(width):
                out[y, x] += np.exp(-(dy2 + (x - cx) * (x - cx)) * inv)
    return out


def conv2d(x, w, stride=1, pad=None):
    kh = w.shape[2]
    if pad is None:
        pad = kh // 2
    h, wd = x.shape[2], x.shape[3]
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - w.shape[3]) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    xp = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
    wt = np.ascontiguousarray(w.transpose(0, 2, 3, 1))
    return _conv2d_nhwc(xp, wt, stride, oh, ow)


def conv2d_input_grad(dy, w, in_hw, stride=1, pad=None):
    kh = w.shape[2]
    if pad is None:
        pad = kh // 2
    dyt = np.ascontiguousarray(dy.transpose(0, 2, 3, 1))
    wt = np.ascontiguousarray(w.transpose(2, 3, 1, 0))
    return _input_grad_nhwc(dyt, wt, stride, pad, in_hw[0], in_hw[1],
                            dy.shape[2], dy.shape[3])


def conv2d_weight_grad(x, dy, kernel_hw, stride=1, pad=None):
    kh, kw = kernel_hw
    if pad is None:
        pad = kh // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    return _weight_grad(xp, dy, stride, kh, kw)


def splat_gaussians(centers_yx, sigma, height, width):
    if centers_yx.shape[0] == 0:
        return np.zeros((height, width), dtype=np.float64)
    return _splat(np.ascontiguousarray(centers_yx, dtype=np.float64),
                  float(sigma), height, width)
