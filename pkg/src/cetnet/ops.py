"""Differentiable kernels.

Every function takes and returns :class:`~cetnet.tensor.Tensor` objects and
records a backward rule when gradients are required. Elementwise binary ops
require identical shapes; broadcasting is only available through the
explicit :func:`broadcast_to` op and through bias/affine parameters.

Reductions inside ``conv2d``/``linear``/``matmul`` go through NumPy's GEMM,
whose summation order is fixed for a given shape, so repeated runs on the
same machine are bit-identical.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigurationError, DimensionError, UsageError
from .tensor import Tensor, make_result

GELU_C = math.sqrt(2.0 / math.pi)  # 0.7978845608028654
GELU_A = 0.044715


def _t(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype or np.float32)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ----------------------------------------------------------------------------
# elementwise arithmetic
# ----------------------------------------------------------------------------

def _check_same(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ (use broadcast_to)")


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return make_result(a.data + np.asarray(b, dtype=a.dtype), (a,), lambda g: (g,), "add_scalar")
    _check_same(a, b, "add")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -b)
    _check_same(a, b, "sub")
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = np.asarray(b, dtype=a.dtype)
        return make_result(a.data * s, (a,), lambda g: (g * s,), "mul_scalar")
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {x.shape} to {shape}") from exc
    src = x.shape
    return make_result(np.asarray(out, order="C"), (x,), lambda g: (_unbroadcast(g, src),), "broadcast_to")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return make_result(y, (x,), lambda g: (g * y,), "exp")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return make_result(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


# ----------------------------------------------------------------------------
# reductions
# ----------------------------------------------------------------------------

def sum(x: Tensor, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = x.shape
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(np.asarray(y), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = range(x.ndim) if axis is None else np.atleast_1d(axis)
    count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# ----------------------------------------------------------------------------
# layout
# ----------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if -1 not in shape and int(np.prod(shape)) != x.size:
        raise DimensionError(f"reshape: cannot view {x.shape} ({x.size} elements) as {shape}")
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from exc
    src = x.shape
    return make_result(y, (x,), lambda g: (g.reshape(src),), "reshape")


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"permute: {axes} is not a permutation of {x.ndim} axes")
    inv = tuple(np.argsort(axes))
    y = np.asarray(x.data.transpose(axes), order="C")
    return make_result(y, (x,), lambda g: (np.asarray(g.transpose(inv), order="C"),), "permute")


def reshape_permute(x: Tensor, new_shape=None, axis_order=None) -> Tensor:
    """Pure layout change: optional permutation followed by optional reshape."""
    if axis_order is not None:
        x = permute(x, axis_order)
    if new_shape is not None:
        x = reshape(x, new_shape)
    return x


def cyclic_shift(x: Tensor, dy: int, dx: int, axes=(2, 3)) -> Tensor:
    """Roll by ``dy`` along ``axes[0]`` and ``dx`` along ``axes[1]`` with wraparound."""
    ay, ax = axes
    dy %= x.shape[ay]
    dx %= x.shape[ax]
    if dy == 0 and dx == 0:
        return make_result(x.data.copy(), (x,), lambda g: (g,), "cyclic_shift")
    y = np.roll(x.data, (dy, dx), axis=(ay, ax))
    return make_result(y, (x,), lambda g: (np.roll(g, (-dy, -dx), axis=(ay, ax)),), "cyclic_shift")


def pad(x: Tensor, widths) -> Tensor:
    """Zero padding; ``widths`` is a per-axis list of (before, after)."""
    widths = tuple((int(a), int(b)) for a, b in widths)
    if all(a == 0 and b == 0 for a, b in widths):
        return x
    y = np.pad(x.data, widths)
    sl = tuple(slice(a, a + n) for (a, _), n in zip(widths, x.shape))
    return make_result(y, (x,), lambda g: (np.asarray(g[sl], order="C"),), "pad")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer)) or i is Ellipsis or i is None for i in items)


def getitem(x: Tensor, index) -> Tensor:
    y = x.data[index]
    shape, dtype = x.shape, x.dtype
    basic = _is_basic_index(index)

    def backward(g):
        gx = np.zeros(shape, dtype=dtype)
        if basic:
            gx[index] = g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return make_result(np.asarray(y, order="C"), (x,), backward, "getitem")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    y = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.asarray(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis), order="C")
                     for i in range(len(tensors)))

    return make_result(y, tensors, backward, "concat")


def gather_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """``table[index]`` along axis 0 with scatter-add backward."""
    index = np.asarray(index)
    y = table.data[index]
    shape, dtype = table.shape, table.dtype

    def backward(g):
        gt = np.zeros(shape, dtype=dtype)
        np.add.at(gt, index, g)
        return (gt,)

    return make_result(y, (table,), backward, "gather_rows")


# ----------------------------------------------------------------------------
# matrix products
# ----------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions of {a.shape} and {b.shape} disagree")
    ad, bd = a.data, b.data
    y = np.matmul(ad, bd)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return make_result(y, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``y = x @ w.T + b`` over the last axis of ``x``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise DimensionError(f"linear: input features {x.shape[-1]} != weight in-features "
                             f"{w.shape[1] if w.ndim == 2 else w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise DimensionError(f"linear: bias shape {b.shape} != ({w.shape[0]},)")
    xd, wd = x.data, w.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    y = x2 @ wd.T
    if b is not None:
        y = y + b.data
    inputs = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd).reshape(xd.shape) if x.requires_grad else None
        gw = g2.T @ x2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_result(y.reshape(lead + (wd.shape[0],)), inputs, backward, "linear")


# ----------------------------------------------------------------------------
# convolution
# ----------------------------------------------------------------------------

def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0,
           groups: int = 1) -> Tensor:
    """2-D cross-correlation on NCHW input with OIHW weights.

    The kernel is unrolled into ``kh*kw`` strided views of the padded input
    (im2col) and contracted per group with one batched GEMM.
    """
    if x.ndim != 4:
        raise DimensionError(f"conv2d: input must be 4-D (N,C,H,W), got shape {x.shape}")
    if w.ndim != 4:
        raise DimensionError(f"conv2d: weight must be 4-D (Cout,Cin/groups,kh,kw), got {w.shape}")
    if stride < 1 or pad < 0 or groups < 1:
        raise ConfigurationError(f"conv2d: need stride>=1, pad>=0, groups>=1 (got {stride}, {pad}, {groups})")
    n, cin, h, wd_ = x.shape
    cout, cpg, kh, kw = w.shape
    if cin % groups or cout % groups:
        raise ConfigurationError(f"conv2d: groups={groups} must divide Cin={cin} and Cout={cout}")
    if cpg != cin // groups:
        raise DimensionError(f"conv2d: channel axis mismatch, input has {cin} channels "
                             f"but weight expects {cpg * groups} (Cin/groups={cpg})")
    if b is not None and b.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {b.shape} != ({cout},)")
    ho, wo = conv_output_size(h, kh, stride, pad), conv_output_size(wd_, kw, stride, pad)
    if ho < 1:
        raise DimensionError(f"conv2d: height axis too small ({h}) for kernel {kh} with pad {pad}")
    if wo < 1:
        raise DimensionError(f"conv2d: width axis too small ({wd_}) for kernel {kw} with pad {pad}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    k = kh * kw
    cols = np.empty((n, cin, k, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i * kw + j] = xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
    cols = cols.reshape(n, groups, cpg * k, ho * wo)
    wg = w.data.reshape(groups, cout // groups, cpg * k)
    y = np.matmul(wg, cols).reshape(n, cout, ho, wo)
    if b is not None:
        y += b.data.reshape(1, cout, 1, 1)
    inputs = (x, w) if b is None else (x, w, b)
    xshape, xpshape, wdata = x.shape, xp.shape, w.data

    def backward(g):
        g3 = g.reshape(n, groups, cout // groups, ho * wo)
        gx = gw = None
        if w.requires_grad:
            gw = np.matmul(g3, np.swapaxes(cols, -1, -2)).sum(axis=0).reshape(wdata.shape)
        if x.requires_grad:
            dcols = np.matmul(np.swapaxes(wdata.reshape(groups, cout // groups, cpg * k), -1, -2), g3)
            dcols = dcols.reshape(n, cin, k, ho, wo)
            gxp = np.zeros(xpshape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += dcols[:, :, i * kw + j]
            gx = gxp[:, :, pad:pad + xshape[2], pad:pad + xshape[3]] if pad else gxp
            gx = np.asarray(gx, order="C")
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return make_result(y, inputs, backward, "conv2d")


# ----------------------------------------------------------------------------
# normalisation
# ----------------------------------------------------------------------------

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the affine map."""
    if eps <= 0:
        raise ConfigurationError(f"layer_norm: eps must be positive, got {eps}")
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} != ({c},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data
    gd = gamma.data

    def backward(g):
        red = tuple(range(g.ndim - 1))
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return make_result(y, (x, gamma, beta), backward, "layer_norm")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """BatchNorm over (N,H,W) of an NCHW tensor.

    In training mode the batch statistics are used and the running buffers
    are updated in place (unbiased variance, PyTorch convention).
    """
    if eps <= 0:
        raise ConfigurationError(f"batch_norm: eps must be positive, got {eps}")
    if x.ndim != 4:
        raise DimensionError(f"batch_norm: input must be 4-D (N,C,H,W), got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,):
        raise DimensionError(f"batch_norm: channel axis {c} != affine length {gamma.shape[0]}")
    xd = x.data
    gd = gamma.data.reshape(1, c, 1, 1)
    bd = beta.data.reshape(1, c, 1, 1)
    if not training:
        inv = (1.0 / np.sqrt(running_var + eps)).astype(xd.dtype).reshape(1, c, 1, 1)
        xhat = (xd - running_mean.reshape(1, c, 1, 1).astype(xd.dtype)) * inv
        y = xhat * gd + bd

        def backward_eval(g):
            return g * gd * inv, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return make_result(y, (x, gamma, beta), backward_eval, "batch_norm")

    m = xd.shape[0] * xd.shape[2] * xd.shape[3]
    mu = xd.mean(axis=(0, 2, 3), keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gd + bd
    running_mean *= 1.0 - momentum
    running_mean += momentum * mu.reshape(c)
    unbiased = var.reshape(c) * (m / (m - 1) if m > 1 else 1.0)
    running_var *= 1.0 - momentum
    running_var += momentum * unbiased

    def backward(g):
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=(0, 2, 3), keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True))
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return make_result(y, (x, gamma, beta), backward, "batch_norm")


# ----------------------------------------------------------------------------
# activations
# ----------------------------------------------------------------------------

def gelu(x: Tensor) -> Tensor:
    """tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    xd = x.data
    t = np.tanh(GELU_C * (xd + GELU_A * xd ** 3))
    y = 0.5 * xd * (1.0 + t)

    def backward(g):
        dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * dt),)

    return make_result(y, (x,), backward, "gelu")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return make_result(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid(xd)
    return make_result(xd * s, (x,), lambda g: (g * s * (1.0 + xd * (1.0 - s)),), "silu")


def activation(x: Tensor, kind: str) -> Tensor:
    kind = kind.lower()
    if kind == "gelu":
        return gelu(x)
    if kind == "silu":
        return silu(x)
    raise ConfigurationError(f"unknown activation {kind!r}; expected 'gelu' or 'silu'")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax: axis {axis} out of range for {x.ndim}-D input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return make_result(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),), "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return make_result(y, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")


def check_axis_count(x: Tensor, ndim: int, what: str):
    if x.ndim != ndim:
        raise UsageError(f"{what}: expected a {ndim}-D tensor, got shape {x.shape}")
