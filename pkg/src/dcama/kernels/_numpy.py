"""Pure-numpy kernel implementations (reference path, always available)."""

import numpy as np

NAME = "numpy"


def im2col(xp, kh, kw, stride, oh, ow):
    """Patch matrix of a padded HWC image, rows in raster order, columns in (ky, kx, c) order."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(0, 1))
    win = win[: (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    # win: [oh, ow, C, kh, kw]
    return np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(oh * ow, -1)


def col2im(cols, hp, wp, c, kh, kw, stride, oh, ow):
    out = np.zeros((hp, wp, c), dtype=cols.dtype)
    patches = cols.reshape(oh, ow, kh, kw, c)
    for ky in range(kh):
        for kx in range(kw):
            out[ky : ky + stride * (oh - 1) + 1 : stride, kx : kx + stride * (ow - 1) + 1 : stride] += patches[:, :, ky, kx, :]
    return out


def interp_matrix(n_in, n_out):
    """[n_out, n_in] half-pixel-center linear interpolation weights with border clamping."""
    dst = np.arange(n_out, dtype=np.float64)
    src = (dst + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def _separable(x, rh, rw):
    h, w, c = x.shape
    oh, ow = rh.shape[0], rw.shape[0]
    tmp = (rh.astype(x.dtype) @ x.reshape(h, w * c)).reshape(oh, w, c)
    tmp = tmp.transpose(1, 0, 2).reshape(w, oh * c)
    out = (rw.astype(x.dtype) @ tmp).reshape(ow, oh, c).transpose(1, 0, 2)
    return np.ascontiguousarray(out)


def resize_forward(x, oh, ow):
    h, w, _ = x.shape
    return _separable(x, interp_matrix(h, oh), interp_matrix(w, ow))


def resize_backward(g, h, w):
    oh, ow, _ = g.shape
    return _separable(g, interp_matrix(h, oh).T, interp_matrix(w, ow).T)


def softmax_rows(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def histogram256(x, lo, hi):
    """Bin index per element and the 256-bin counts over [lo, hi]."""
    scale = 256.0 / (hi - lo)
    idx = np.floor((x.astype(np.float64) - lo) * scale).astype(np.int64)
    np.clip(idx, 0, 255, out=idx)
    return idx, np.bincount(idx.ravel(), minlength=256).astype(np.int64)


def confusion(pred, gt):
    """(tp, fp, fn, tn) pixel counts for two boolean masks."""
    pred = pred.ravel()
    gt = gt.ravel()
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return tp, fp, fn, pred.size - tp - fp - fn
