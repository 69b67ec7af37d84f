"""Differentiable operations on :class:`Tensor`.

Every op computes its forward value with numpy and registers a closure that
maps the output gradient to one gradient per input.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from pdm.errors import ContractViolation, DegenerateInputError, UnsupportedConfiguration
from pdm.ndnum.tensor import Tensor, as_tensor


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractViolation(f"shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return Tensor._from_op(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return Tensor._from_op(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return Tensor._from_op(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    out = a.data / b.data
    return Tensor._from_op(
        out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    return Tensor._from_op(
        a.data ** exponent, (a,),
        lambda g: (g * exponent * a.data ** (exponent - 1),),
    )


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._from_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * 0.5 / out,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor._from_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # tanh form avoids overflow in exp for large |x|
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return Tensor._from_op(out, (a,), lambda g: (g * out * (1.0 - out),))


_UNARY = {"neg": neg, "exp": exp, "log": log, "sqrt": sqrt, "relu": relu, "sigmoid": sigmoid}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a, b=None) -> Tensor:
    if kind in _UNARY:
        if b is not None:
            raise ContractViolation(f"{kind} is unary")
        return _UNARY[kind](a)
    if kind in _BINARY:
        if b is None:
            raise ContractViolation(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    raise ContractViolation(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching rules; both operands at least 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractViolation(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ContractViolation(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ContractViolation(f"matmul batch dimensions do not broadcast: {a.shape} @ {b.shape}") from None

    def _back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._from_op(out, (a, b), _back)


def _im2col(xp: np.ndarray, h: int, w: int, dilation: int) -> np.ndarray:
    # xp: (N, C, h + 2d, w + 2d) -> (N, C*9, h*w), kernel-offset minor
    n, c = xp.shape[:2]
    cols = np.empty((n, c, 9, h, w), dtype=xp.dtype)
    for a in range(3):
        for b in range(3):
            cols[:, :, 3 * a + b] = xp[:, :, a * dilation:a * dilation + h, b * dilation:b * dilation + w]
    return cols.reshape(n, c * 9, h * w)


def conv2d(x, kernels, dilation: int = 1, bias=None) -> Tensor:
    """3x3 convolution (cross-correlation) with zero padding equal to ``dilation``.

    ``x`` is ``(C_in, H, W)`` or batched ``(N, C_in, H, W)``; ``kernels`` is
    ``(C_out, C_in, 3, 3)``. Spatial size is preserved.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if kernels.ndim != 4 or kernels.shape[2:] != (3, 3):
        raise UnsupportedConfiguration(f"only 3x3 kernels are supported, got {kernels.shape}")
    if not isinstance(dilation, (int, np.integer)) or dilation < 1:
        raise ContractViolation(f"dilation must be a positive int, got {dilation!r}")
    single = x.ndim == 3
    if x.ndim not in (3, 4):
        raise ContractViolation(f"conv2d input must be 3-D or 4-D, got {x.shape}")
    xd = x.data[None] if single else x.data
    n, c_in, h, w = xd.shape
    c_out = kernels.shape[0]
    if kernels.shape[1] != c_in:
        raise ContractViolation(f"kernel expects {kernels.shape[1]} input channels, input has {c_in}")

    d = int(dilation)
    xp = np.pad(xd, ((0, 0), (0, 0), (d, d), (d, d)))
    cols = _im2col(xp, h, w, d)
    wmat = kernels.data.reshape(c_out, c_in * 9)
    out = np.matmul(wmat, cols).reshape(n, c_out, h, w)
    parents = [x, kernels]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ContractViolation(f"bias shape {bias.shape} != ({c_out},)")
        out = out + bias.data[:, None, None]
        parents.append(bias)
    if single:
        out = out[0]

    def _back(g):
        g4 = (g[None] if single else g).reshape(n, c_out, h * w)
        gw = np.einsum("noi,nki->ok", g4, cols).reshape(kernels.shape)
        gcols = np.matmul(wmat.T, g4).reshape(n, c_in, 9, h, w)
        gxp = np.zeros_like(xp)
        for a in range(3):
            for b in range(3):
                gxp[:, :, a * d:a * d + h, b * d:b * d + w] += gcols[:, :, 3 * a + b]
        gx = gxp[:, :, d:d + h, d:d + w]
        if single:
            gx = gx[0]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2)))
        return grads

    return Tensor._from_op(out, parents, _back)


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce(kind: str, x, axis=None, keepdims: bool = False) -> Tensor:
    """``sum``, ``mean`` or ``max`` over ``axis`` (int, tuple or None for all)."""
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if kind == "sum":
        out = x.data.sum(axis=axes, keepdims=keepdims)
    elif kind == "mean":
        out = x.data.mean(axis=axes, keepdims=keepdims)
    elif kind == "max":
        if count == 0:
            raise ContractViolation("max over an empty axis")
        out = x.data.max(axis=axes, keepdims=keepdims)
    else:
        raise ContractViolation(f"unknown reduction {kind!r}")

    def _expand(g):
        return g if keepdims else np.expand_dims(g, axes)

    def _back(g):
        ge = _expand(g)
        if kind == "sum":
            return (np.broadcast_to(ge, x.shape).copy(),)
        if kind == "mean":
            return (np.broadcast_to(ge / count, x.shape).copy(),)
        # ties share the gradient equally
        winners = x.data == _expand(out)
        share = winners / winners.sum(axis=axes, keepdims=True)
        return (ge * share,)

    return Tensor._from_op(np.asarray(out), (x,), _back)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return reduce("sum", x, axis, keepdims)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    return reduce("mean", x, axis, keepdims)


def amax(x, axis=None, keepdims: bool = False) -> Tensor:
    return reduce("max", x, axis, keepdims)


def amin(x, axis=None, keepdims: bool = False) -> Tensor:
    return neg(reduce("max", neg(x), axis, keepdims))


def logsumexp(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shift = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - shift)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + shift
    soft = e / s
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def _back(g):
        ge = g if keepdims else np.expand_dims(g, axis)
        return (ge * soft,)

    return Tensor._from_op(out, (x,), _back)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ContractViolation("concat of zero parts")
    ndim = parts[0].ndim
    ax = axis % ndim
    for p in parts[1:]:
        if p.ndim != ndim or any(p.shape[i] != parts[0].shape[i] for i in range(ndim) if i != ax):
            raise ContractViolation(
                f"concat parts disagree off axis {axis}: {[q.shape for q in parts]}"
            )
    out = np.concatenate([p.data for p in parts], axis=ax)
    bounds = np.cumsum([0] + [p.shape[ax] for p in parts])

    def _back(g):
        return [
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(parts))
        ]

    return Tensor._from_op(out, parts, _back)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ContractViolation(f"cannot reshape {x.shape} to {shape}") from None
    return Tensor._from_op(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    out = np.transpose(x.data, axes)
    inverse = None if axes is None else np.argsort(axes)
    return Tensor._from_op(out, (x,), lambda g: (np.transpose(g, inverse),))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    out = x.data[index]

    def _back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return Tensor._from_op(np.array(out), (x,), _back)


# ---------------------------------------------------------------------------
# distances


def norm(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at the origin is taken as zero."""
    x = as_tensor(x)
    out = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    safe = np.where(out > 0, out, 1.0)
    result = out if keepdims else np.squeeze(out, axis=axis)

    def _back(g):
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.where(out > 0, ge * x.data / safe, 0.0),)

    return Tensor._from_op(result, (x,), _back)


def pairwise_euclidean(a, b) -> Tensor:
    """(p, d) x (q, d) -> (p, q) matrix of Euclidean distances."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ContractViolation(f"pairwise_euclidean needs (p,d),(q,d); got {a.shape}, {b.shape}")
    diff = sub(reshape(a, (a.shape[0], 1, a.shape[1])), reshape(b, (1, b.shape[0], b.shape[1])))
    return norm(diff, axis=-1)


def cosine(u, v) -> Tensor:
    u, v = as_tensor(u), as_tensor(v)
    if u.shape != v.shape or u.ndim != 1:
        raise ContractViolation(f"cosine needs two equal-length vectors, got {u.shape}, {v.shape}")
    if not (np.linalg.norm(u.data) > 0 and np.linalg.norm(v.data) > 0):
        raise DegenerateInputError("cosine of a zero-norm vector is undefined")
    return div(sum(mul(u, v)), mul(norm(u), norm(v)))


def row_cosine_matrix(x) -> Tensor:
    """Cosine similarity between all rows of ``x`` (..., m, n) -> (..., m, m)."""
    x = as_tensor(x)
    norms = np.linalg.norm(x.data, axis=-1)
    if np.any(norms == 0):
        raise DegenerateInputError("row with zero norm in cosine matrix")
    unit = div(x, norm(x, axis=-1, keepdims=True))
    return matmul(unit, transpose(unit, tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)))
