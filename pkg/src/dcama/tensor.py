"""Minimal dense tensor engine with reverse-mode differentiation.

Tensors are channel-last and row-major. Every op builds a graph node whose
``_backward`` maps the output gradient to one gradient per parent. Values are
checked for finiteness after every op; a NaN or Inf raises ``NonFiniteError``.

float32 is the default dtype. Passing float64 arrays gives 64-bit mode, which
is what ``grad_check`` requires.
"""

import contextlib
import contextvars
import hashlib

import numpy as np

from . import kernels

DEFAULT_DTYPE = np.float32

_grad_enabled = contextvars.ContextVar("dcama_grad_enabled", default=True)
# hash of which side of every kink (relu, clip, max) each element landed on
_branch_log = contextvars.ContextVar("dcama_branch_log", default=None)


def _log_branch(*arrays):
    h = _branch_log.get()
    if h is not None:
        for a in arrays:
            h.update(np.packbits(a).tobytes() if a.dtype == bool else a.tobytes())


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class NonFiniteError(ArithmeticError):
    """An op produced NaN or Inf."""


class NonDeterministicError(RuntimeError):
    """A function under gradient check returned different values for identical inputs."""


@contextlib.contextmanager
def no_grad():
    """Skip graph recording inside the block (inference)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        arr = np.ascontiguousarray(data, dtype=dtype)
        if arr.ndim > 0 and min(arr.shape) == 0:
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        _check_finite(arr, "Tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_scalar(self.shape)

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def backward(self):
        return backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return add(self, affine(_as_tensor(other), -1.0, 0.0))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __neg__(self):
        return affine(self, -1.0, 0.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _raise_scalar(shape):
    raise ShapeError(f"item() needs a single-element tensor, got shape {shape}")


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr, op):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _node(data, parents, backward_fn, op):
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(data)
    out.grad = None
    out.op = op
    out.requires_grad = _grad_enabled.get() and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


# --------------------------------------------------------------------------
# ops


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs [m,k] x [k,n], got {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ bd.T, ad.T @ g

    return _node(ad @ bd, (a, b), bw, "matmul")


def transpose(a):
    if a.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got {a.shape}")

    def bw(g):
        return (g.T,)

    return _node(a.data.T.copy(), (a,), bw, "transpose")


def softmax_rows(x):
    if x.ndim != 2 or x.shape[1] < 1:
        raise ShapeError(f"softmax_rows needs [m,n>=1], got {x.shape}")
    s = kernels.softmax_rows(x.data)

    def bw(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _node(s, (x,), bw, "softmax_rows")


def conv2d(x, w, b, stride=1, pad=0):
    """Cross-correlation of an [h,w,cin] map with a [kh,kw,cin,cout] kernel."""
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError(f"conv2d needs x [h,w,cin] and w [kh,kw,cin,cout], got {x.shape}, {w.shape}")
    h, wd, cin = x.shape
    kh, kw, wcin, cout = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input {cin}, kernel {wcin}")
    if b.shape != (cout,):
        raise ShapeError(f"conv2d bias must be [{cout}], got {b.shape}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and pad >= 0, got {stride}, {pad}")
    hp, wp = h + 2 * pad, wd + 2 * pad
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    xp = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0))) if pad else x.data
    cols = kernels.im2col(xp, kh, kw, stride, oh, ow)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = (cols @ wmat + b.data).reshape(oh, ow, cout)

    def bw(g):
        g2 = g.reshape(oh * ow, cout)
        gw = (cols.T @ g2).reshape(w.shape)
        gb = g2.sum(axis=0)
        gx = None
        if x.requires_grad:
            gxp = kernels.col2im(g2 @ wmat.T, hp, wp, cin, kh, kw, stride, oh, ow)
            gx = gxp[pad : pad + h, pad : pad + wd] if pad else gxp
        return gx, gw, gb

    return _node(out, (x, w, b), bw, "conv2d")


def relu(x):
    mask = x.data > 0
    _log_branch(mask)

    def bw(g):
        return (g * mask,)

    return _node(np.where(mask, x.data, 0).astype(x.dtype), (x,), bw, "relu")


def bilinear_resize(x, oh, ow):
    """Half-pixel-center bilinear resampling with border clamping."""
    if x.ndim != 3:
        raise ShapeError(f"bilinear_resize needs [h,w,c], got {x.shape}")
    if oh < 1 or ow < 1:
        raise ShapeError(f"target size must be positive, got {oh}x{ow}")
    h, w, _ = x.shape
    if (oh, ow) == (h, w):
        return _node(x.data.copy(), (x,), lambda g: (g,), "bilinear_resize")

    def bw(g):
        return (kernels.resize_backward(g, h, w),)

    return _node(kernels.resize_forward(x.data, oh, ow), (x,), bw, "bilinear_resize")


def add(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"add needs identical shapes, got {a.shape} and {b.shape}")
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def add_bias(x, b):
    """x[..., n] + b[n]."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"bias {b.shape} does not match trailing dim of {x.shape}")
    axes = tuple(range(x.ndim - 1))
    return _node(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=axes)), "add_bias")


def mul(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"mul needs identical shapes, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def affine(x, scale, shift):
    """scale * x + shift with python-float constants."""
    out = x.data * x.dtype.type(scale) + x.dtype.type(shift)
    return _node(out, (x,), lambda g: (g * x.dtype.type(scale),), "affine")


def log(x):
    xd = x.data
    if (xd <= 0).any():
        raise NonFiniteError("log of a non-positive value")
    return _node(np.log(xd), (x,), lambda g: (g / xd,), "log")


def clip(x, lo, hi):
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    _log_branch(xd < lo, xd > hi)
    return _node(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,), "clip")


def reshape(x, shape):
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    src = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def slice_last(x, start, stop):
    """x[..., start:stop]."""
    if not 0 <= start < stop <= x.shape[-1]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for trailing dim {x.shape[-1]}")

    def bw(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[..., start:stop] = g
        return (full,)

    return _node(x.data[..., start:stop].copy(), (x,), bw, "slice_last")


def concat(xs, axis):
    xs = list(xs)
    if not xs:
        raise ShapeError("concat of an empty list")
    ref = xs[0].shape
    ax = axis % len(ref)
    for t in xs[1:]:
        if len(t.shape) != len(ref) or any(t.shape[d] != ref[d] for d in range(len(ref)) if d != ax):
            raise ShapeError(f"concat mismatch along non-concat axes: {ref} vs {t.shape}")
    if len(xs) == 1:
        return _node(xs[0].data.copy(), (xs[0],), lambda g: (g,), "concat")
    sizes = [t.shape[ax] for t in xs]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _node(np.concatenate([t.data for t in xs], axis=ax), xs, bw, "concat")


def concat_channels(xs):
    """Concatenate [h,w,c_k] maps along channels, preserving input order."""
    xs = list(xs)
    if xs and any(t.ndim != 3 for t in xs):
        raise ShapeError("concat_channels needs [h,w,c] inputs")
    return concat(xs, axis=-1)


def max_over_set(xs):
    """Elementwise maximum over a list of same-shape tensors. Ties route gradient to the first."""
    xs = list(xs)
    if not xs:
        raise ShapeError("max_over_set of an empty list")
    ref = xs[0].shape
    if any(t.shape != ref for t in xs):
        raise ShapeError("max_over_set needs identical shapes")
    if len(xs) == 1:
        return _node(xs[0].data.copy(), (xs[0],), lambda g: (g,), "max_over_set")
    stack = np.stack([t.data for t in xs])
    arg = stack.argmax(axis=0)
    _log_branch(arg)

    def bw(g):
        return tuple(np.where(arg == k, g, 0).astype(g.dtype) for k in range(len(xs)))

    return _node(stack.max(axis=0), xs, bw, "max_over_set")


def sum_all(x):
    shape = x.shape
    return _node(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.full(shape, g, dtype=x.dtype),), "sum")


def mean_all(x):
    n = x.size
    shape = x.shape
    return _node(
        np.asarray(x.data.sum() / n, dtype=x.dtype),
        (x,),
        lambda g: (np.full(shape, g / n, dtype=x.dtype),),
        "mean",
    )


# --------------------------------------------------------------------------
# differentiation


def _topo_order(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss, wrt=None):
    """Populate ``.grad`` on every reachable leaf; returns grads for ``wrt`` if given.

    Gradients overwrite any previous ``.grad``. Leaves in ``wrt`` that the loss
    does not depend on receive zeros.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    reached = set()
    if loss.requires_grad:
        for node in reversed(_topo_order(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g
                reached.add(id(node))
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = np.asarray(pg, dtype=parent.dtype)
    if wrt is None:
        return None
    out = []
    for leaf in wrt:
        if id(leaf) not in reached:
            leaf.grad = np.zeros(leaf.shape, dtype=leaf.dtype)
        out.append(leaf.grad)
    return out


# (offset, weight) pairs; derivative = sum(weight * f(x + offset * h)) / h
_CENTRAL = {
    2: ((-1, -1 / 2), (1, 1 / 2)),
    4: ((-2, 1 / 12), (-1, -8 / 12), (1, 8 / 12), (2, -1 / 12)),
}
_ONE_SIDED = {
    2: ((0, -3 / 2), (1, 2), (2, -1 / 2)),
    4: ((0, -25 / 12), (1, 4), (2, -3), (3, 4 / 3), (4, -1 / 4)),
}


def _branch_signature(f, x):
    h = hashlib.blake2b(digest_size=16)
    token = _branch_log.set(h)
    try:
        value = f(x).item()
    finally:
        _branch_log.reset(token)
    return value, h.digest()


def _difference_quotient(f, x, flat, i, eps, order, refinements, base):
    orig = flat[i]
    step = eps
    for _ in range(refinements + 1):
        cache = {0: base}

        def probe(k):
            if k not in cache:
                flat[i] = orig + k * step
                cache[k] = _branch_signature(f, x)
                flat[i] = orig
            return cache[k]

        def smooth(stencil, side=1):
            return all(probe(side * k)[1] == base[1] for k, _ in stencil)

        def quotient(stencil, side=1):
            return sum(w * probe(side * k)[0] for k, w in stencil) / (side * step)

        if smooth(_CENTRAL[order]):
            return quotient(_CENTRAL[order])
        for side in (1, -1):
            if smooth(_ONE_SIDED[order], side):
                return quotient(_ONE_SIDED[order], side)
        last = quotient(_CENTRAL[order])
        step /= 10
    return last


def grad_check(f, x, eps=1e-3, max_elements=None, seed=0, order=4, refinements=4):
    """Max relative error between analytic and finite-difference gradients of f at x.

    ``f`` maps the tensor ``x`` to a scalar tensor and must rebuild its graph
    from ``x.data`` on each call. ``max_elements`` limits the check to a seeded
    random subset of coordinates. ``order`` (2 or 4) picks the stencil accuracy.

    Difference quotients are only valid where f is smooth, so every probe also
    hashes which side of each relu/clip/max kink the graph took. The central
    stencil is used when all its probes match the unperturbed pattern. If a
    kink lies on one side only, the one-sided stencil on the other side is
    used. Otherwise the step shrinks tenfold, at most ``refinements`` times,
    and the last central estimate is scored. No coordinate is skipped.
    """
    if x.dtype != np.float64:
        raise TypeError("grad_check runs in 64-bit mode; pass a float64 tensor")
    if order not in _CENTRAL:
        raise ValueError(f"stencil order must be one of {sorted(_CENTRAL)}")
    x.requires_grad = True
    first = f(x)
    second = f(x)
    if first.data.tobytes() != second.data.tobytes():
        raise NonDeterministicError("f returned different values on identical inputs")
    x.grad = None
    (analytic,) = backward(first, [x])
    analytic = analytic.reshape(-1).copy()

    flat = x.data.reshape(-1)
    coords = np.arange(flat.size)
    if max_elements is not None and flat.size > max_elements:
        coords = np.sort(np.random.default_rng(seed).choice(flat.size, size=max_elements, replace=False))
    worst = 0.0
    with no_grad():
        base = _branch_signature(f, x)
        for i in coords:
            numeric = _difference_quotient(f, x, flat, i, eps, order, refinements, base)
            a = analytic[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
