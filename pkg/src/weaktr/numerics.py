"""Dense float tensors with reverse-mode gradients.

Every array in the pipeline is a :class:`Tensor`: a thin wrapper around a
row-major ``numpy`` array that records the operation which produced it.
Calling :meth:`Tensor.backward` on a scalar walks that record in reverse
topological order and accumulates gradients into the leaves.

The default dtype is float32. ``using_dtype(np.float64)`` switches the dtype of
newly created tensors, which :func:`check_gradient` uses for its
finite-difference oracle.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Parameter", "GradCheckReport",
    "ShapeError", "DomainError", "EvaluationError",
    "no_grad", "using_dtype", "default_dtype", "as_tensor",
    "matmul", "softmax_last", "log_softmax_last", "layer_norm", "sigmoid",
    "gelu", "exp", "log", "clamp_min", "clamp", "global_avg_pool", "upsample_bilinear",
    "bilinear_matrix", "conv2d_same", "l2_normalize", "concat",
    "check_gradient",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """Input lies outside the domain an operation is defined on."""


class EvaluationError(RuntimeError):
    """A function under evaluation produced a non-finite value."""


_STATE = {"grad": True, "dtype": np.dtype(np.float32)}


def default_dtype() -> np.dtype:
    return _STATE["dtype"]


@contextlib.contextmanager
def using_dtype(dtype):
    prev = _STATE["dtype"]
    _STATE["dtype"] = np.dtype(dtype)
    try:
        yield
    finally:
        _STATE["dtype"] = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = _STATE["grad"]
    _STATE["grad"] = False
    try:
        yield
    finally:
        _STATE["grad"] = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """N-d array node in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != default_dtype():
            arr = arr.astype(default_dtype())
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    # -- metadata -------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- graph ----------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf that requires grad."""
        if not self.requires_grad:
            raise RuntimeError("tensor does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


class Parameter(Tensor):
    """Trainable leaf tensor with a name."""

    __slots__ = ()

    def __init__(self, value, name: str):
        super().__init__(value, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    if _STATE["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# elementwise and structural primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                              _unbroadcast(g * ad, bd.shape) if b.requires_grad else None))


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _result(out, (a,), lambda g: (-g * out * out,))


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _result(np.log(x), (a,), lambda g: (g / x,))


def clamp_min(a: Tensor, lo: float) -> Tensor:
    """max(a, lo); the gradient is passed only where a > lo. NaN propagates."""
    a = as_tensor(a)
    x = a.data
    keep = ~(x <= lo)
    return _result(np.where(keep, x, np.asarray(lo, dtype=x.dtype)), (a,),
                   lambda g: (g * keep,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip into [lo, hi]; the gradient is passed only strictly inside."""
    a = as_tensor(a)
    x = a.data
    inside = (x > lo) & (x < hi)
    out = np.clip(x, np.asarray(lo, x.dtype), np.asarray(hi, x.dtype))
    return _result(out, (a,), lambda g: (g * inside,))


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


_SQRT_2_OVER_PI = float(np.sqrt(2.0 / np.pi))


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.data
    u = _SQRT_2_OVER_PI * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        du = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _result(out, (a,), backward)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {src} to {shape}") from exc
    return _result(out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    src_shape, dtype = a.shape, a.data.dtype
    basic = _is_basic_index(idx)

    def backward(g):
        full = np.zeros(src_shape, dtype=dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(a.data[idx], (a,), backward)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    src = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    total = tsum(a, axis, keepdims)
    # divide (rather than multiply by 1/count) so constant inputs pool exactly
    return _result(total.data / np.asarray(count, total.data.dtype), (total,),
                   lambda g: (g / np.asarray(count, g.dtype),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                   lambda g: tuple(np.split(g, bounds, axis=axis)))


# ---------------------------------------------------------------------------
# named operations
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad @ bd, (a, b), backward)


def softmax_last(t: Tensor) -> Tensor:
    t = as_tensor(t)
    x = t.data
    if x.shape[-1] < 1:
        raise DomainError("softmax over an empty axis")
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (t,), backward)


def log_softmax_last(t: Tensor) -> Tensor:
    t = as_tensor(t)
    x = t.data
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return _result(out, (t,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def layer_norm(t: Tensor, gamma, beta, eps: float = 1e-6) -> Tensor:
    """Standardize each row over the last axis, then scale and shift."""
    t, gamma, beta = as_tensor(t), as_tensor(gamma), as_tensor(beta)
    d = t.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}, {beta.shape} vs last dim {d}")
    if eps <= 0:
        raise DomainError("eps must be positive")
    x = t.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def backward(g):
        gx = None
        if t.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return (gx,
                (g * xhat).sum(axis=lead) if gamma.requires_grad else None,
                g.sum(axis=lead) if beta.requires_grad else None)

    return _result(xhat * gd + beta.data, (t, gamma, beta), backward)


def l2_normalize(t: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row over the last axis to unit Euclidean norm."""
    t = as_tensor(t)
    x = t.data
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    norm = np.maximum(norm, eps)
    out = x / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norm,)

    return _result(out, (t,), backward)


def global_avg_pool(t, axes: int = 2) -> Tensor:
    """Mean over the trailing ``axes`` axes: one scalar per leading index.

    With the default of two, a single 2-D map pools to a scalar and a stack of
    maps ``(..., h, w)`` pools to shape ``(...)``.
    """
    t = as_tensor(t)
    if t.ndim < axes:
        raise DomainError(f"cannot pool {axes} axes of a rank-{t.ndim} tensor")
    pooled = tuple(range(t.ndim - axes, t.ndim))
    if t.size == 0 or any(t.shape[i] == 0 for i in pooled):
        raise DomainError(f"global_avg_pool over empty axes of shape {t.shape}")
    return tmean(t, pooled)


def bilinear_matrix(n_in: int, n_out: int, dtype=None) -> np.ndarray:
    """(n_out, n_in) align-corners linear interpolation weights."""
    dtype = dtype or default_dtype()
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m.astype(dtype)
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    m[rows, lo] = 1.0 - frac
    m[rows, lo + 1] += frac
    return m.astype(dtype)


def upsample_bilinear(t, out_h: int, out_w: int) -> Tensor:
    """Align-corners bilinear resize of ``(..., h, w, c)`` to ``(..., out_h, out_w, c)``."""
    t = as_tensor(t)
    if t.ndim < 3:
        raise ShapeError(f"upsample expects (..., h, w, c), got {t.shape}")
    h, w = t.shape[-3], t.shape[-2]
    if out_h < h or out_w < w:
        raise DomainError(f"upsample cannot shrink {h}x{w} to {out_h}x{out_w}")
    ry = bilinear_matrix(h, out_h, t.data.dtype)
    rx = bilinear_matrix(w, out_w, t.data.dtype)
    out = np.einsum("ia,jb,...abc->...ijc", ry, rx, t.data, optimize=True)
    return _result(out, (t,),
                   lambda g: (np.einsum("ia,jb,...ijc->...abc", ry, rx, g, optimize=True),))


def conv2d_same(x, weight, bias=None) -> Tensor:
    """Stride-1, zero-padded convolution on channels-last input.

    ``x``: (..., h, w, c_in); ``weight``: (kh, kw, c_in, c_out) with odd
    kernel sizes; ``bias``: (c_out,). Output keeps the spatial size.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    kh, kw, cin, cout = weight.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"conv input channels {x.shape[-1]} vs kernel {weight.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DomainError("same-padding needs odd kernel sizes")
    ph, pw = kh // 2, kw // 2
    h, w = x.shape[-3], x.shape[-2]
    lead = x.shape[:-3]
    pad = [(0, 0)] * len(lead) + [(ph, ph), (pw, pw), (0, 0)]
    xp = np.pad(x.data, pad)
    cols = np.stack([xp[..., i:i + h, j:j + w, :] for i in range(kh) for j in range(kw)], axis=-2)
    cols = cols.reshape(*lead, h, w, kh * kw * cin)
    wmat = weight.data.reshape(kh * kw * cin, cout)
    out = cols @ wmat
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        gx = None
        if x.requires_grad:
            gcols = (g @ wmat.T).reshape(*lead, h, w, kh * kw, cin)
            gxp = np.zeros_like(xp)
            k = 0
            for i in range(kh):
                for j in range(kw):
                    gxp[..., i:i + h, j:j + w, :] += gcols[..., k, :]
                    k += 1
            gx = gxp[..., ph:ph + h, pw:pw + w, :]
        gw = None
        if weight.requires_grad:
            gw = (cols.reshape(-1, kh * kw * cin).T @ g.reshape(-1, cout)).reshape(weight.shape)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.reshape(-1, cout).sum(axis=0))
        return tuple(grads)

    return _result(out, parents, backward)


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: dict = field(default_factory=dict)
    tolerance: float = 1e-2
    passed: bool = True

    def worst(self) -> tuple:
        name = max(self.max_rel_error, key=self.max_rel_error.get)
        return name, self.max_rel_error[name]


def _relative_error(a: np.ndarray, f: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    return np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)


def check_gradient(loss_fn: Callable[[], Tensor], params: Iterable[Parameter],
                   epsilon: float = 1e-3, tol: float = 1e-2,
                   fd_dtype=None, max_entries: int | None = None,
                   seed: int = 0, floor: float = 1e-8) -> GradCheckReport:
    """Compare analytic gradients of ``loss_fn()`` against central differences.

    Analytic gradients are taken in the current default dtype. The finite
    differences are evaluated in ``fd_dtype`` (default: same dtype); passing
    ``np.float64`` turns them into a high-precision oracle. ``max_entries``
    checks a random subset of each parameter's entries. ``floor`` bounds the
    denominator of the relative error, so entries whose true gradient is zero
    (e.g. a key bias, which cancels inside softmax) are judged on an absolute
    scale instead of amplifying float32 round-off.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    if not np.all(np.isfinite(loss.data)):
        raise EvaluationError(f"loss is not finite: {loss.data}")
    loss.backward()
    analytic = {p.name: p.grad.astype(np.float64) for p in params}

    fd_dtype = np.dtype(fd_dtype or default_dtype())
    saved = [p.data for p in params]
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tol)
    try:
        with using_dtype(fd_dtype), no_grad():
            for p in params:
                p.data = p.data.astype(fd_dtype)
            for p in params:
                flat = p.data.reshape(-1)
                idx = np.arange(flat.size)
                if max_entries is not None and flat.size > max_entries:
                    idx = rng.choice(flat.size, max_entries, replace=False)
                fd = np.empty(len(idx))
                for n, i in enumerate(idx):
                    orig = flat[i]
                    flat[i] = orig + epsilon
                    up = float(loss_fn().data)
                    flat[i] = orig - epsilon
                    down = float(loss_fn().data)
                    flat[i] = orig
                    if not (np.isfinite(up) and np.isfinite(down)):
                        raise EvaluationError(f"non-finite loss while perturbing {p.name}[{i}]")
                    fd[n] = (up - down) / (2.0 * epsilon)
                a = analytic[p.name].reshape(-1)[idx]
                err = float(_relative_error(a, fd, floor).max()) if len(idx) else 0.0
                report.max_rel_error[p.name] = err
    finally:
        for p, d in zip(params, saved):
            p.data = d
    report.passed = all(e <= tol for e in report.max_rel_error.values())
    return report
