"""Dense-tensor engine with reverse-mode differentiation.

Tensors wrap a numpy array plus an optional gradient buffer. Applying a
primitive while gradients are enabled links the output to its inputs, so the
computation graph is held implicitly by the tensors themselves. ``backward``
on a scalar walks that graph in reverse topological order and accumulates
gradients into every tensor that requires them, including the graph inputs
(needed for input-space attacks).

Gradients accumulate across backward calls until zeroed explicitly; training
code owns the zeroing. Default scalar precision is float32; tests that need
headroom switch to float64 via ``use_dtype``.
"""

from __future__ import annotations

import contextlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ContractError, ShapeError

_DTYPES = {"float32": np.float32, "float64": np.float64}

_default_dtype = np.float32
_grad_enabled = True


def set_default_dtype(dtype):
    """Set the dtype used for newly created tensors ('float32' or 'float64')."""
    global _default_dtype
    if isinstance(dtype, str):
        if dtype not in _DTYPES:
            raise ConfigError(f"unsupported dtype {dtype!r}, expected 'float32' or 'float64'")
        dtype = _DTYPES[dtype]
    _default_dtype = np.dtype(dtype).type


def get_default_dtype():
    return np.dtype(_default_dtype)


@contextlib.contextmanager
def use_dtype(dtype):
    """Temporarily switch the default dtype (used by 64-bit gradient checks)."""
    global _default_dtype
    saved = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _default_dtype = saved


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation forwards)."""
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


class Tensor:
    """N-dimensional array node of the gradient graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._grad_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def _make(data, parents, grad_fn):
    """Wrap an op result, linking it into the graph when recording applies."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._grad_fn = None
    return out


def backward(loss):
    """Accumulate d(loss)/d(t) into t.grad for every reachable requires_grad tensor.

    The loss must be a scalar (shape ``()``). Repeated calls keep adding;
    callers zero gradients explicitly between steps.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss.data.shape != ():
        raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, ready = stack.pop()
        if ready:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    upstream = {id(loss): np.ones((), dtype=loss.data.dtype)}
    for node in reversed(order):
        g = upstream.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._grad_fn is None:
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            acc = upstream.get(id(parent))
            upstream[id(parent)] = pg if acc is None else acc + pg


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def _check(cond, primitive, message):
    if not cond:
        raise ShapeError(f"{primitive}: {message}")


def affine(x, w, b):
    """Matrix multiply plus bias: (B,n) @ (n,m) + (m,)."""
    _check(x.ndim == 2, "affine", f"input must be 2-D, got shape {x.shape}")
    _check(w.ndim == 2, "affine", f"weight must be 2-D, got shape {w.shape}")
    _check(b.ndim == 1, "affine", f"bias must be 1-D, got shape {b.shape}")
    _check(
        x.shape[1] == w.shape[0] and w.shape[1] == b.shape[0],
        "affine",
        f"shapes do not conform: x{x.shape} w{w.shape} b{b.shape}",
    )
    out = x.data @ w.data + b.data
    need_x, need_w = x.requires_grad, w.requires_grad

    def grad_fn(g):
        gx = g @ w.data.T if need_x else None
        gw = x.data.T @ g if need_w else None
        return gx, gw, g.sum(axis=0)

    return _make(out, (x, w, b), grad_fn)


def conv2d(x, w, b, padding="valid"):
    """2-D convolution, stride 1: (B,C,H,W) with (F,C,kh,kw) filters.

    ``padding='same'`` zero-pads so output spatial size equals input size
    (odd kernels only). Implemented as im2col patches times a filter matrix.
    """
    _check(x.ndim == 4, "conv2d", f"input must be 4-D (B,C,H,W), got shape {x.shape}")
    _check(w.ndim == 4, "conv2d", f"weight must be 4-D (F,C,kh,kw), got shape {w.shape}")
    _check(b.ndim == 1, "conv2d", f"bias must be 1-D, got shape {b.shape}")
    B, C, H, W = x.shape
    F, Cw, kh, kw = w.shape
    _check(C == Cw, "conv2d", f"channel mismatch: input has {C}, filters expect {Cw}")
    _check(b.shape[0] == F, "conv2d", f"bias length {b.shape[0]} != filter count {F}")
    if padding == "same":
        _check(kh % 2 == 1 and kw % 2 == 1, "conv2d", "'same' padding requires odd kernels")
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph = pw = 0
    else:
        raise ShapeError(f"conv2d: unknown padding {padding!r}")
    _check(H + 2 * ph >= kh and W + 2 * pw >= kw, "conv2d", f"kernel {kh}x{kw} larger than padded input")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    Ho, Wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    # (B,C,Ho,Wo,kh,kw) view -> (B*Ho*Wo, C*kh*kw) patch matrix
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    patches = windows.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(F, C * kh * kw)
    out = (patches @ wmat.T).reshape(B, Ho, Wo, F).transpose(0, 3, 1, 2) + b.data[None, :, None, None]
    need_x, need_w = x.requires_grad, w.requires_grad

    def grad_fn(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, F)
        gw = (gmat.T @ patches).reshape(F, C, kh, kw) if need_w else None
        gx = None
        if need_x:
            gcols = (gmat @ wmat).reshape(B, Ho, Wo, C, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + Ho, j : j + Wo] += gcols[:, :, i, j]
            gx = gxp[:, :, ph : ph + H, pw : pw + W] if ph or pw else gxp
        gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    return _make(np.ascontiguousarray(out), (x, w, b), grad_fn)


def maxpool2x2(x):
    """Non-overlapping 2x2 max pooling on (B,C,H,W); H and W must be even."""
    _check(x.ndim == 4, "maxpool2x2", f"input must be 4-D (B,C,H,W), got shape {x.shape}")
    B, C, H, W = x.shape
    _check(H % 2 == 0 and W % 2 == 0, "maxpool2x2", f"spatial dims must be even, got {H}x{W}")
    Ho, Wo = H // 2, W // 2
    windows = x.data.reshape(B, C, Ho, 2, Wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, 4)
    idx = windows.argmax(axis=-1)  # first max wins on ties
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        gwin = np.zeros_like(windows)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(B, C, Ho, Wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return (gx,)

    return _make(np.ascontiguousarray(out), (x,), grad_fn)


def relu(x):
    out = np.maximum(x.data, 0)
    mask = x.data > 0

    def grad_fn(g):
        return (g * mask,)

    return _make(out, (x,), grad_fn)


def flatten(x):
    """Collapse all but the leading (batch) axis."""
    _check(x.ndim >= 2, "flatten", f"input must have a batch axis, got shape {x.shape}")
    shape = x.shape
    out = x.data.reshape(shape[0], -1)

    def grad_fn(g):
        return (g.reshape(shape),)

    return _make(out, (x,), grad_fn)


def add(a, b):
    """Elementwise sum of two same-shape tensors."""
    _check(a.shape == b.shape, "add", f"shape mismatch: {a.shape} vs {b.shape}")

    def grad_fn(g):
        return g, g

    return _make(a.data + b.data, (a, b), grad_fn)


def scale(x, c):
    """Multiply by a python scalar constant."""
    c = float(c)

    def grad_fn(g):
        return (g * c,)

    return _make(x.data * c, (x,), grad_fn)


def mul(a, b):
    """Elementwise product of two same-shape tensors."""
    _check(a.shape == b.shape, "mul", f"shape mismatch: {a.shape} vs {b.shape}")

    def grad_fn(g):
        ga = g * b.data if a.requires_grad else None
        gb = g * a.data if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), grad_fn)


def channel_affine(x, scale_vec, shift_vec):
    """Fixed per-channel affine map on (B,C,...): x*scale + shift, constants only.

    Used for input normalization; scale and shift take no gradients.
    """
    _check(x.ndim >= 2, "channel_affine", f"input must have a channel axis, got shape {x.shape}")
    C = x.shape[1]
    s = np.asarray(scale_vec, dtype=x.data.dtype).reshape(-1)
    t = np.asarray(shift_vec, dtype=x.data.dtype).reshape(-1)
    _check(s.shape == (C,) and t.shape == (C,), "channel_affine", f"constants must have length {C}")
    bshape = (1, C) + (1,) * (x.ndim - 2)
    sb, tb = s.reshape(bshape), t.reshape(bshape)

    def grad_fn(g):
        return (g * sb,)

    return _make(x.data * sb + tb, (x,), grad_fn)


def sum_all(x):
    """Sum of all entries, as a scalar tensor."""
    shape, dtype = x.shape, x.data.dtype

    def grad_fn(g):
        return (np.full(shape, g, dtype=dtype),)

    return _make(np.asarray(x.data.sum(), dtype=dtype), (x,), grad_fn)


def cross_entropy_with_logits(logits, labels):
    """Mean cross-entropy of (B,C) logits against integer labels.

    Stabilized by max-subtraction before the log-sum-exp.
    """
    _check(logits.ndim == 2, "cross_entropy", f"logits must be 2-D (B,C), got shape {logits.shape}")
    y = np.asarray(labels)
    B, C = logits.shape
    if y.shape != (B,):
        raise ContractError(f"labels must have shape ({B},), got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise ContractError(f"labels must be integers, got dtype {y.dtype}")
    if B < 1:
        raise ContractError("cross_entropy requires at least one sample")
    if y.min() < 0 or y.max() >= C:
        raise ContractError(f"label out of range [0, {C}): {y[(y < 0) | (y >= C)][0]}")

    z = logits.data
    m = z.max(axis=1, keepdims=True)
    shifted = z - m
    exps = np.exp(shifted)
    sums = exps.sum(axis=1, keepdims=True)
    lse = np.log(sums)[:, 0]
    rows = np.arange(B)
    loss = np.asarray((lse - shifted[rows, y]).mean(), dtype=z.dtype)

    def grad_fn(g):
        probs = exps / sums
        probs[rows, y] -= 1.0
        return (probs * (g / B),)

    return _make(loss, (logits,), grad_fn)


def finite_diff_gradient(f, x, h):
    """Central-difference gradient of a scalar function, one coordinate at a time.

    ``f`` takes a plain ndarray shaped like ``x`` and returns a float. This is
    the independent oracle the analytic backward rules are checked against.
    """
    if h <= 0:
        raise ContractError(f"step h must be positive, got {h}")
    base = np.array(x, dtype=np.float64)  # owned copy; perturbed in place below
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + h
        up = f(base)
        flat[i] = saved - h
        down = f(base)
        flat[i] = saved
        gflat[i] = (up - down) / (2.0 * h)
    return grad
