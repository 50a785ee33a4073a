"""Dense float64 tensors with a recording tape for reverse-mode gradients.

Every differentiable op lives in this module. An op computes its value with
numpy, checks it is finite, and, when a :class:`GradTape` is active and some
input requires a gradient, records a node holding a closure that maps the
output cotangent to input cotangents.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from reco.exceptions import NonFiniteError, ShapeError

_ACTIVE_TAPES: list["GradTape"] = []


class Tensor:
    """Row-major float64 array plus a ``requires_grad`` flag."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True, order="C")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.ascontiguousarray(arr, dtype=np.float64)
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}{flag})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: Tensor, parents: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.parents = parents
        self.backward = backward


class GradTape:
    """Records differentiable ops executed inside its ``with`` block.

    >>> w = Tensor([1.0, 2.0], requires_grad=True)
    >>> with GradTape() as tape:
    ...     loss = sum_all(mul(w, w))
    >>> tape.gradient(loss, [w])[0]
    array([2., 4.])
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "GradTape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def gradient(self, loss: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        grads = backward(loss, self)
        return [grads[s] for s in sources]


class Gradients:
    """Identity-keyed mapping from tensors to gradient arrays.

    Tensors that require gradients but never reach the loss map to zeros.
    """

    def __init__(self, table: dict[int, np.ndarray]):
        self._table = table

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        g = self._table.get(id(tensor))
        if g is None:
            return np.zeros_like(tensor.data)
        return g

    def __contains__(self, tensor: Tensor) -> bool:
        return id(tensor) in self._table


def backward(loss: Tensor, tape: GradTape) -> Gradients:
    """Propagate d(loss) back through ``tape``.

    Nodes are visited once each, newest first; recording order is already a
    topological order, so its reverse is a valid reverse topological order.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(n.out) for n in tape.nodes}
    if id(loss) not in produced and not loss.requires_grad:
        raise ValueError("loss was not recorded on this tape")

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, np.ndarray] = {}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.out), None)
        if g is None:
            continue
        parent_grads = node.backward(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.data.shape:
                if pg.size != parent.data.size:
                    raise ShapeError(f"gradient of shape {pg.shape} for a tensor of shape {parent.data.shape}")
                pg = pg.reshape(parent.data.shape)
            key = id(parent)
            target = leaves if key not in produced else pending
            if key in target:
                target[key] = target[key] + pg
            else:
                target[key] = pg
    leaves.update(pending)
    return Gradients(leaves)


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    # Any NaN or Inf makes the sum non-finite; only then is the full scan
    # needed (the sum of finite values may itself overflow).
    if not math.isfinite(arr.sum()) and not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    return arr


def _record(out_arr: np.ndarray, parents: tuple[Tensor, ...], grad_fn: Callable, op: str,
            check: bool = True) -> Tensor:
    # ops that only move existing values pass check=False: their inputs were
    # already checked when they were produced
    if check:
        _finite(out_arr, op)
    needs = bool(_ACTIVE_TAPES) and any(p.requires_grad for p in parents)
    out = Tensor._wrap(out_arr, requires_grad=needs)
    if needs:
        node = _Node(out, parents, grad_fn)
        for tape in _ACTIVE_TAPES:
            tape.nodes.append(node)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product; gradients g·bᵀ and aᵀ·g."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def grad(g):
        return (g @ B.T if a.requires_grad else None, A.T @ g if b.requires_grad else None)

    return _record(A @ B, (a, b), grad, "matmul")


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched product of (n,m,p) and (n,p,q) stacks; no broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm shape mismatch {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def grad(g):
        ga = np.matmul(g, B.transpose(0, 2, 1)) if a.requires_grad else None
        gb = np.matmul(A.transpose(0, 2, 1), g) if b.requires_grad else None
        return ga, gb

    return _record(np.matmul(A, B), (a, b), grad, "bmm")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    return _record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a vector along the last axis (the only broadcast we allow)."""
    x, bias = as_tensor(x), as_tensor(bias)
    if bias.ndim != 1 or bias.shape[0] != x.shape[-1]:
        raise ShapeError(f"bias of shape {bias.shape} does not fit {x.shape}")
    d = bias.shape[0]

    def grad(g):
        return g, g.reshape(-1, d).sum(axis=0)

    return _record(x.data + bias.data, (x, bias), grad, "add_bias")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul needs equal shapes, got {a.shape} and {b.shape}")
    A, B = a.data, b.data
    return _record(A * B, (a, b), lambda g: (g * B, g * A), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _record(x.data * c, (x,), lambda g: (g * c,), "scale")


def scale_by(x: Tensor, s: Tensor) -> Tensor:
    """Multiply every entry of ``x`` by the scalar tensor ``s``."""
    x, s = as_tensor(x), as_tensor(s)
    if s.size != 1:
        raise ShapeError(f"scale_by needs a scalar, got shape {s.shape}")
    X, sv = x.data, float(s.data.reshape(()))

    def grad(g):
        return g * sv, np.array(np.sum(g * X)).reshape(s.shape)

    return _record(X * sv, (x, s), grad, "scale_by")


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = as_tensor(x)
    X = x.data
    c = math.sqrt(2.0 / math.pi)
    X2 = X * X
    inner = c * (X + 0.044715 * X2 * X)
    th = np.tanh(inner)
    out = 0.5 * X * (1.0 + th)

    def grad(g):
        dinner = c * (1.0 + 3 * 0.044715 * X2)
        return (g * (0.5 * (1.0 + th) + 0.5 * X * (1.0 - th**2) * dinner),)

    return _record(out, (x,), grad, "gelu")


def clamped_exp(x: Tensor, upper: float) -> Tensor:
    """exp(x) clipped at ``upper``; zero gradient where the clip is active."""
    x = as_tensor(x)
    e = np.exp(x.data)
    active = e >= upper
    out = np.where(active, upper, e)
    return _record(out, (x,), lambda g: (np.where(active, 0.0, g * e),), "clamped_exp")


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape", check=False)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(axes.index(i) for i in range(len(axes)))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _record(out, (x,), lambda g: (g.transpose(inv),), "transpose", check=False)


def take(x: Tensor, index: int, axis: int) -> Tensor:
    """Select one slice along ``axis`` (drops that axis)."""
    x = as_tensor(x)
    shape = x.shape

    def grad(g):
        full = np.zeros(shape)
        sl = [slice(None)] * len(shape)
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return _record(np.take(x.data, index, axis=axis), (x,), grad, "take", check=False)


def slice_tokens(x: Tensor, count: int) -> Tensor:
    """First ``count`` entries along axis 1 of an (n, s, d) tensor."""
    x = as_tensor(x)
    shape = x.shape

    def grad(g):
        full = np.zeros(shape)
        full[:, :count] = g
        return (full,)

    return _record(np.ascontiguousarray(x.data[:, :count]), (x,), grad, "slice_tokens", check=False)


def diagonal(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ShapeError(f"diagonal needs a square matrix, got {x.shape}")
    n = x.shape[0]

    def grad(g):
        full = np.zeros((n, n))
        full[np.arange(n), np.arange(n)] = g
        return (full,)

    return _record(np.diagonal(x.data).copy(), (x,), grad, "diagonal", check=False)


# ---------------------------------------------------------------- reductions


def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _record(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g.reshape(()))),), "sum")


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / as_tensor(x).size)


def dot(a: Tensor, b: Tensor) -> Tensor:
    return sum_all(mul(a, b))


# ---------------------------------------------------------------- row-wise ops


def softmax_rows(x: Tensor, scale: float = 1.0) -> Tensor:
    """Softmax of ``scale * x`` along the last axis, max-subtracted."""
    x = as_tensor(x)
    z = x.data * scale
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def grad(g):
        return (scale * p * (g - np.sum(g * p, axis=-1, keepdims=True)),)

    return _record(p, (x,), grad, "softmax_rows")


def log_softmax_rows(x: Tensor) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def grad(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _record(out, (x,), grad, "log_softmax_rows")


def _nll_diag(L: np.ndarray) -> float:
    """Sum over rows of ``-log softmax(L[i])[i]``, accurate when the diagonal dominates."""
    off = L - L.diagonal()[:, None]
    m = np.maximum(off.max(axis=1), 0.0)
    e = np.exp(off - m[:, None])
    np.fill_diagonal(e, 0.0)
    rest = e.sum(axis=1)
    if not m.any():
        return float(np.log1p(rest).sum())
    # log(exp(-m) + rest) + m; log1p keeps the tiny-loss rows exact when m == 0
    return float(np.where(m > 0, m + np.log(np.exp(-m) + rest), np.log1p(rest)).sum())


def paired_nce(logits: Tensor) -> Tensor:
    """``-sum(diag(log_softmax(L))) - sum(diag(log_softmax(L.T)))`` for square ``L``.

    One node for both softmax directions; the gradient is
    ``(P_row - I) + (P_col - I)``.
    """
    logits = as_tensor(logits)
    if logits.ndim != 2 or logits.shape[0] != logits.shape[1]:
        raise ShapeError(f"paired_nce needs a square matrix, got {logits.shape}")
    L = logits.data
    zr = L - L.max(axis=1, keepdims=True)
    lr = zr - np.log(np.exp(zr).sum(axis=1, keepdims=True))
    zc = L - L.max(axis=0, keepdims=True)
    lc = zc - np.log(np.exp(zc).sum(axis=0, keepdims=True))
    out = _nll_diag(L) + _nll_diag(L.T)

    def grad(g):
        eye = np.eye(L.shape[0])
        return (float(g.reshape(())) * ((np.exp(lr) - eye) + (np.exp(lc) - eye)),)

    return _record(np.array(out), (logits,), grad, "paired_nce")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine params must have shape ({d},)")
    X = x.data
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    G = gain.data
    out = xhat * G + bias.data

    def grad(g):
        gx = None
        if x.requires_grad:
            gh = g * G
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, d)
        gg = (flat_g * xhat.reshape(-1, d)).sum(axis=0) if gain.requires_grad else None
        gb = flat_g.sum(axis=0) if bias.requires_grad else None
        return gx, gg, gb

    return _record(out, (x, gain, bias), grad, "layer_norm")


def l2_normalize_rows(x: Tensor) -> Tensor:
    x = as_tensor(x)
    X = x.data
    norm = np.sqrt((X * X).sum(axis=-1, keepdims=True))
    if (norm == 0).any():
        raise NonFiniteError("cannot normalize a zero row")
    y = X / norm

    def grad(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return _record(y, (x,), grad, "l2_normalize_rows")


def parameters_of(tree) -> Iterable[Tensor]:
    """Yield tensors from nested dicts/lists in a stable (sorted-key) order."""
    if isinstance(tree, Tensor):
        yield tree
    elif isinstance(tree, dict):
        for key in sorted(tree):
            yield from parameters_of(tree[key])
    elif isinstance(tree, (list, tuple)):
        for item in tree:
            yield from parameters_of(item)
