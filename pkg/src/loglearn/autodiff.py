"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Graphs are built eagerly: every primitive evaluates its output on
construction and remembers how to recompute it (``forward``) and how to pull
an output gradient back to its inputs (``backward``).
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_counter = itertools.count()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for a primitive."""


class NumericalError(FloatingPointError):
    """Raised when a primitive produces a non-finite value."""


class Tensor:
    """A node in a computation graph.

    Leaves hold user data; interior nodes hold the cached output of a
    primitive plus closures to recompute it and to back-propagate through it.
    """

    __slots__ = ("data", "op", "parents", "_fwd", "_bwd", "name", "requires_grad", "_id")
    # make numpy defer to Tensor's reflected operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._fwd: Callable | None = None
        self._bwd: Callable | None = None
        self.name = name
        self.requires_grad = requires_grad
        self._id = next(_counter)

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _node(op: str, parents: Sequence["Tensor"], fwd: Callable, bwd: Callable) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.op = op
        out.parents = tuple(parents)
        out._fwd = fwd
        out._bwd = bwd
        out.name = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._id = next(_counter)
        out.data = _checked(op, fwd(*[p.data for p in parents]))
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape})"

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _raise_not_scalar(t: Tensor):
    raise ShapeError(f"expected a scalar, got shape {t.shape}")


def _checked(op: str, arr) -> np.ndarray:
    arr = np.asarray(arr, dtype=DTYPE)
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite value produced by {op}")
    return arr


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# -- elementwise binary --------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return Tensor._node(
        "add", (a, b), np.add, lambda g, x, y, out: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return Tensor._node(
        "sub", (a, b), np.subtract, lambda g, x, y, out: (_unbroadcast(g, sa), _unbroadcast(-g, sb))
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    sa, sb = a.shape, b.shape
    return Tensor._node(
        "mul",
        (a, b),
        np.multiply,
        lambda g, x, y, out: (_unbroadcast(g * y, sa), _unbroadcast(g * x, sb)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    sa, sb = a.shape, b.shape
    return Tensor._node(
        "div",
        (a, b),
        np.divide,
        lambda g, x, y, out: (_unbroadcast(g / y, sa), _unbroadcast(-g * x / (y * y), sb)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._node("neg", (a,), np.negative, lambda g, x, out: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    return Tensor._node(
        "pow", (a,), lambda x: np.power(x, p), lambda g, x, out: (g * p * np.power(x, p - 1),)
    )


def square(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._node("square", (a,), np.square, lambda g, x, out: (2.0 * g * x,))


# -- elementwise unary ---------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._node("sigmoid", (a,), _sigmoid, lambda g, x, out: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._node("tanh", (a,), np.tanh, lambda g, x, out: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._node("relu", (a,), lambda x: np.maximum(x, 0.0), lambda g, x, out: (g * (x > 0),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._node("exp", (a,), np.exp, lambda g, x, out: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericalError("log of a non-positive value")
    return Tensor._node("log", (a,), np.log, lambda g, x, out: (g / x,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._node("abs", (a,), np.abs, lambda g, x, out: (g * np.sign(x),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp into [lo, hi]; the gradient is zero where clamping is active."""
    a = as_tensor(a)
    return Tensor._node(
        "clip",
        (a,),
        lambda x: np.clip(x, lo, hi),
        lambda g, x, out: (g * ((x >= lo) & (x <= hi)),),
    )


def hinge(a) -> Tensor:
    """max(0, a)."""
    return relu(a)


# -- reductions and shape ops --------------------------------------------------


def _expand_reduced(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)) if g.ndim else g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return Tensor._node(
        "sum",
        (a,),
        lambda x: np.sum(x, axis=axis, keepdims=keepdims),
        lambda g, x, out: (np.array(_expand_reduced(g, shape, axis, keepdims)),),
    )


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([shape[ax] for ax in axes]))
    return Tensor._node(
        "mean",
        (a,),
        lambda x: np.mean(x, axis=axis, keepdims=keepdims),
        lambda g, x, out: (np.array(_expand_reduced(g, shape, axis, keepdims)) / count,),
    )


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        np.empty(old).reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {old} to {shape}") from exc
    return Tensor._node(
        "reshape", (a,), lambda x: x.reshape(shape), lambda g, x, out: (g.reshape(old),)
    )


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else tuple(np.argsort(axes))
    return Tensor._node(
        "transpose",
        (a,),
        lambda x: np.transpose(x, axes),
        lambda g, x, out: (np.transpose(g, inv),),
    )


def index(a, idx) -> Tensor:
    """Basic or integer-array indexing; repeated indices accumulate."""
    a = as_tensor(a)
    shape = a.shape
    parts = idx if isinstance(idx, tuple) else (idx,)
    fancy = any(isinstance(p, (list, np.ndarray)) for p in parts)

    def bwd(g, x, out):
        full = np.zeros(shape, dtype=DTYPE)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return Tensor._node("slice", (a,), lambda x: x[idx], bwd)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    try:
        np.concatenate([np.empty(t.shape) for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from exc
    return Tensor._node(
        "concat",
        ts,
        lambda *xs: np.concatenate(xs, axis=axis),
        lambda g, *rest: tuple(np.split(g, splits, axis=axis)),
    )


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in ts], axis=axis) if ts else _raise_empty()


def _raise_empty():
    raise ShapeError("cannot stack an empty sequence")


# -- linear algebra ------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != (b.shape[-2] if b.ndim > 1 else b.shape[0]):
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul supports rank-2 operands only")
    return Tensor._node("matmul", (a, b), np.matmul, lambda g, x, y, out: (g @ y.T, x.T @ g))


def linear(x, w, b=None) -> Tensor:
    """x @ w (+ b) for x of shape (..., in); leading axes are flattened."""
    x = as_tensor(x)
    lead = x.shape[:-1]
    flat = x if x.ndim == 2 else reshape(x, (-1, x.shape[-1]))
    out = matmul(flat, w)
    if b is not None:
        out = add(out, b)
    return out if x.ndim == 2 else reshape(out, lead + (out.shape[-1],))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)

    def fwd(x):
        z = x - np.max(x, axis=axis, keepdims=True)
        e = np.exp(z)
        return e / np.sum(e, axis=axis, keepdims=True)

    def bwd(g, x, out):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return Tensor._node("softmax", (a,), fwd, bwd)


def _windows(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    b, t, c = x.shape
    t_out = (t - kernel) // stride + 1
    sb, st, sc = x.strides
    return np.lib.stride_tricks.as_strided(
        x, shape=(b, t_out, kernel, c), strides=(sb, st * stride, st, sc), writeable=False
    )


def conv1d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """1-D convolution over time.

    x has shape (batch, time, in_channels), w has shape (kernel, in, out).
    Output shape is (batch, (time + 2*padding - kernel)//stride + 1, out).
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1]:
        raise ShapeError(f"conv1d: incompatible shapes {x.shape} * {w.shape}")
    kernel = w.shape[0]
    if x.shape[1] + 2 * padding < kernel:
        raise ShapeError("conv1d: kernel longer than padded input")

    def pad(xd):
        return np.pad(xd, ((0, 0), (padding, padding), (0, 0))) if padding else xd

    def fwd(xd, wd):
        win = _windows(np.ascontiguousarray(pad(xd)), kernel, stride)
        return np.einsum("btkc,kco->bto", win, wd)

    def bwd(g, xd, wd, out):
        xp = np.ascontiguousarray(pad(xd))
        win = _windows(xp, kernel, stride)
        gw = np.einsum("btkc,bto->kco", win, g)
        gwin = np.einsum("bto,kco->btkc", g, wd)
        gx = np.zeros_like(xp)
        t_out = g.shape[1]
        for k in range(kernel):
            gx[:, k : k + stride * (t_out - 1) + 1 : stride, :] += gwin[:, :, k, :]
        if padding:
            gx = gx[:, padding:-padding, :]
        return gx, gw

    return Tensor._node("conv1d", (x, w), fwd, bwd)


# -- spectral ------------------------------------------------------------------


class SVDNonConvergence(ArithmeticError):
    """One-sided Jacobi did not converge within the sweep budget."""


def svd(matrix, tol: float = 1e-15, max_sweeps: int = 100):
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Returns ``(U, s, V)`` with ``s`` sorted descending and
    ``U @ diag(s) @ V.T`` equal to the input.
    """
    a = np.array(matrix.data if isinstance(matrix, Tensor) else matrix, dtype=DTYPE)
    if a.ndim != 2:
        raise ShapeError("svd expects a rank-2 matrix")
    if not np.all(np.isfinite(a)):
        raise NumericalError("svd input has non-finite entries")
    transposed = a.shape[0] < a.shape[1]
    if transposed:
        a = a.T.copy()
    m, n = a.shape
    v = np.eye(n)
    # columns below this squared norm are numerically zero and never rotated
    floor = (np.finfo(DTYPE).eps * np.sqrt(np.sum(a * a))) ** 2
    for _ in range(max_sweeps):
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                ai, aj = a[:, i], a[:, j]
                alpha = ai @ ai
                beta = aj @ aj
                gamma = ai @ aj
                if gamma == 0.0 or min(alpha, beta) <= floor or abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta)) if zeta != 0 else 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                a[:, [i, j]] = np.column_stack((c * ai - s * aj, s * ai + c * aj))
                vi, vj = v[:, i].copy(), v[:, j].copy()
                v[:, i] = c * vi - s * vj
                v[:, j] = s * vi + c * vj
        if not rotated:
            break
    else:
        raise SVDNonConvergence(f"one-sided Jacobi did not converge in {max_sweeps} sweeps")

    sigma = np.sqrt(np.sum(a * a, axis=0))
    order = np.argsort(-sigma, kind="stable")
    sigma, a, v = sigma[order], a[:, order], v[:, order]
    u = np.zeros((m, n))
    scale = sigma.max() if n else 0.0
    nonzero = sigma > scale * max(m, n) * np.finfo(DTYPE).eps
    u[:, nonzero] = a[:, nonzero] / sigma[nonzero]
    u = _complete_orthonormal(u, nonzero)
    if transposed:
        return v, sigma, u
    return u, sigma, v


def _complete_orthonormal(u: np.ndarray, filled: np.ndarray) -> np.ndarray:
    """Fill columns belonging to zero singular values with an orthonormal complement."""
    if filled.all():
        return u
    m = u.shape[0]
    basis = [u[:, i] for i in np.flatnonzero(filled)]
    cand = iter(np.eye(m))
    for i in np.flatnonzero(~filled):
        for e in cand:
            w = e - sum((b @ e) * b for b in basis)
            nrm = np.linalg.norm(w)
            if nrm > 1e-8:
                w = w / nrm
                u[:, i] = w
                basis.append(w)
                break
    return u


def smallest_singular_sq(f, k: int) -> Tensor:
    """Sum of the squares of the ``k`` smallest singular values of a matrix.

    d(sigma_i^2)/dF = 2 sigma_i u_i v_i^T.
    """
    f = as_tensor(f)
    if f.ndim != 2:
        raise ShapeError("smallest_singular_sq expects a rank-2 matrix")
    r = min(f.shape)
    if not 1 <= k <= r:
        raise ValueError(f"k={k} must lie in [1, min(b, d)={r}]")

    def fwd(x):
        _, s, _ = svd(x)
        return np.sum(s[r - k :] ** 2)

    def bwd(g, x, out):
        u, s, v = svd(x)
        sel = slice(r - k, r)
        return (g * 2.0 * (u[:, sel] * s[sel]) @ v[:, sel].T,)

    return Tensor._node("bss", (f,), fwd, bwd)


# -- graph traversal -----------------------------------------------------------


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node._id in seen:
            continue
        seen.add(node._id)
        stack.append((node, True))
        for p in reversed(node.parents):
            if p._id not in seen:
                stack.append((p, False))
    return order


def forward(root: Tensor) -> Tensor:
    """Re-evaluate every interior node from the current leaf values."""
    for node in _topological(root):
        if node._fwd is not None:
            node.data = _checked(node.op, node._fwd(*[p.data for p in node.parents]))
    return root


def gradients(root: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """d(root)/d(t) for each t in ``wrt``; unreachable tensors get zeros."""
    if root.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    wrt = list(wrt)
    grads: dict[int, np.ndarray] = {root._id: np.ones_like(root.data)}
    for node in reversed(_topological(root)):
        g = grads.pop(node._id, None) if node._bwd is not None else grads.get(node._id)
        if g is None or node._bwd is None or not node.requires_grad:
            continue
        pgrads = node._bwd(g, *[p.data for p in node.parents], node.data)
        for p, pg in zip(node.parents, pgrads):
            if not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=DTYPE)
            if p._id in grads:
                grads[p._id] = grads[p._id] + pg
            else:
                grads[p._id] = pg.reshape(p.shape) if pg.shape != p.shape else pg
    return [grads.get(t._id, np.zeros_like(t.data)) for t in wrt]
