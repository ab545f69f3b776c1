"""numba-compiled kernels. Same contracts as ``_numpy``; results agree to float rounding."""

import math

import numpy as np
from numba import njit

NAME = "numba"


@njit(cache=True)
def _im2col(xp, kh, kw, stride, oh, ow):
    c = xp.shape[2]
    out = np.empty((oh * ow, kh * kw * c), dtype=xp.dtype)
    for oy in range(oh):
        for ox in range(ow):
            row = oy * ow + ox
            col = 0
            for ky in range(kh):
                y = oy * stride + ky
                for kx in range(kw):
                    x = ox * stride + kx
                    for ch in range(c):
                        out[row, col] = xp[y, x, ch]
                        col += 1
    return out


def im2col(xp, kh, kw, stride, oh, ow):
    return _im2col(np.ascontiguousarray(xp), kh, kw, stride, oh, ow)


@njit(cache=True)
def _col2im(cols, out, kh, kw, stride, oh, ow):
    c = out.shape[2]
    for oy in range(oh):
        for ox in range(ow):
            row = oy * ow + ox
            col = 0
            for ky in range(kh):
                y = oy * stride + ky
                for kx in range(kw):
                    x = ox * stride + kx
                    for ch in range(c):
                        out[y, x, ch] += cols[row, col]
                        col += 1
    return out


def col2im(cols, hp, wp, c, kh, kw, stride, oh, ow):
    out = np.zeros((hp, wp, c), dtype=cols.dtype)
    return _col2im(np.ascontiguousarray(cols), out, kh, kw, stride, oh, ow)


@njit(cache=True)
def _taps(n_in, n_out):
    i0 = np.empty(n_out, dtype=np.int64)
    i1 = np.empty(n_out, dtype=np.int64)
    frac = np.empty(n_out, dtype=np.float64)
    scale = n_in / n_out
    for d in range(n_out):
        s = (d + 0.5) * scale - 0.5
        if s < 0.0:
            s = 0.0
        if s > n_in - 1:
            s = n_in - 1.0
        a = int(math.floor(s))
        i0[d] = a
        i1[d] = min(a + 1, n_in - 1)
        frac[d] = s - a
    return i0, i1, frac


@njit(cache=True)
def _resize_forward(x, oh, ow):
    h, w, c = x.shape
    y0, y1, fy = _taps(h, oh)
    x0, x1, fx = _taps(w, ow)
    out = np.empty((oh, ow, c), dtype=x.dtype)
    for i in range(oh):
        wy = fy[i]
        for j in range(ow):
            wx = fx[j]
            for ch in range(c):
                top = (1.0 - wx) * x[y0[i], x0[j], ch] + wx * x[y0[i], x1[j], ch]
                bot = (1.0 - wx) * x[y1[i], x0[j], ch] + wx * x[y1[i], x1[j], ch]
                out[i, j, ch] = (1.0 - wy) * top + wy * bot
    return out


def resize_forward(x, oh, ow):
    return _resize_forward(np.ascontiguousarray(x), oh, ow)


@njit(cache=True)
def _resize_backward(g, h, w):
    oh, ow, c = g.shape
    y0, y1, fy = _taps(h, oh)
    x0, x1, fx = _taps(w, ow)
    out = np.zeros((h, w, c), dtype=g.dtype)
    for i in range(oh):
        wy = fy[i]
        for j in range(ow):
            wx = fx[j]
            for ch in range(c):
                v = g[i, j, ch]
                out[y0[i], x0[j], ch] += (1.0 - wy) * (1.0 - wx) * v
                out[y0[i], x1[j], ch] += (1.0 - wy) * wx * v
                out[y1[i], x0[j], ch] += wy * (1.0 - wx) * v
                out[y1[i], x1[j], ch] += wy * wx * v
    return out


def resize_backward(g, h, w):
    return _resize_backward(np.ascontiguousarray(g), h, w)


@njit(cache=True)
def _softmax_rows(x):
    m, n = x.shape
    out = np.empty_like(x)
    for r in range(m):
        mx = x[r, 0]
        for k in range(1, n):
            if x[r, k] > mx:
                mx = x[r, k]
        s = 0.0
        for k in range(n):
            e = math.exp(x[r, k] - mx)
            out[r, k] = e
            s += e
        for k in range(n):
            out[r, k] = out[r, k] / s
    return out


def softmax_rows(x):
    return _softmax_rows(np.ascontiguousarray(x))


@njit(cache=True)
def _histogram256(flat, lo, hi):
    scale = 256.0 / (hi - lo)
    idx = np.empty(flat.size, dtype=np.int64)
    counts = np.zeros(256, dtype=np.int64)
    for k in range(flat.size):
        b = int(math.floor((flat[k] - lo) * scale))
        if b < 0:
            b = 0
        elif b > 255:
            b = 255
        idx[k] = b
        counts[b] += 1
    return idx, counts


def histogram256(x, lo, hi):
    idx, counts = _histogram256(np.ascontiguousarray(x, dtype=np.float64).ravel(), float(lo), float(hi))
    return idx.reshape(x.shape), counts


@njit(cache=True)
def _confusion(pred, gt):
    tp = 0
    fp = 0
    fn = 0
    for k in range(pred.size):
        if pred[k]:
            if gt[k]:
                tp += 1
            else:
                fp += 1
        elif gt[k]:
            fn += 1
    return tp, fp, fn, pred.size - tp - fp - fn


def confusion(pred, gt):
    tp, fp, fn, tn = _confusion(np.ascontiguousarray(pred).ravel(), np.ascontiguousarray(gt).ravel())
    return int(tp), int(fp), int(fn), int(tn)
