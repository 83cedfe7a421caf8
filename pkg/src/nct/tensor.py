"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every differentiable op builds a new :class:`Tensor` that remembers its
parents and a closure mapping the upstream gradient to one gradient per
parent.  :func:`backward` walks the recorded graph in reverse topological
order.  Leaf tensors accumulate into ``.grad`` across calls until
:func:`zero_grad` clears them.

Arrays default to float64 so that central finite differences are reliable;
training may switch to float32 with :func:`default_dtype`.
"""

from __future__ import annotations

import contextlib
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import erf

_DTYPE = np.dtype(np.float64)
_GRAD_ENABLED = True


def get_default_dtype() -> np.dtype:
    return _DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used for new tensors."""
    global _DTYPE
    previous = _DTYPE
    _DTYPE = np.dtype(dtype)
    try:
        yield
    finally:
        _DTYPE = previous


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference / numerical probing)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """An array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def values(self) -> list[float]:
        """Row-major flat list of the entries."""
        return self.data.ravel().tolist()

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _result(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        return a, b
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    if isinstance(b, Tensor):
        return as_tensor(a, like=b), b
    return as_tensor(a), as_tensor(b)


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading dimensions broadcast as in numpy."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        return _matmul_right_matrix(a, b)
    if a.ndim == 2 and b.ndim > 2:
        return _matmul_left_matrix(a, b)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(np.matmul(a.data, b.data), (a, b), backward, "matmul")


# A stack of row vectors times one matrix is a single GEMM once the leading
# dimensions are flattened; numpy's broadcasting matmul would loop instead.
def _matmul_right_matrix(a: Tensor, b: Tensor) -> Tensor:
    k, n = b.shape
    a2 = a.data.reshape(-1, k)

    def backward(g):
        g2 = g.reshape(-1, n)
        ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
        gb = a2.T @ g2 if b.requires_grad else None
        return ga, gb

    return _result((a2 @ b.data).reshape(a.shape[:-1] + (n,)), (a, b), backward, "matmul")


def _matmul_left_matrix(a: Tensor, b: Tensor) -> Tensor:
    m, k = a.shape
    lead = b.shape[:-2]
    n = b.shape[-1]
    # (..., k, n) -> (k, prod(lead) * n)
    b2 = np.moveaxis(b.data, -2, 0).reshape(k, -1)

    def unflatten(x2, rows):
        return np.moveaxis(x2.reshape((rows,) + lead + (n,)), 0, -2)

    def backward(g):
        g2 = np.moveaxis(g, -2, 0).reshape(m, -1)
        ga = g2 @ b2.T if a.requires_grad else None
        gb = unflatten(a.data.T @ g2, k) if b.requires_grad else None
        return ga, gb

    return _result(np.ascontiguousarray(unflatten(a.data @ b2, m)), (a, b), backward, "matmul")


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum_(a, axis, keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _result(data, tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                for t in tensors]
    return concat(expanded, axis=axis)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Select rows of the second-to-last axis; ``-1`` selects a zero row.

    ``x`` has shape (..., N, D) and ``index`` shape (M, S); the result has
    shape (..., M, S, D).
    """
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 2:
        raise ValueError("index must be 2-D")
    n = x.shape[-2]
    if index.size and (index.min() < -1 or index.max() >= n):
        raise IndexError(f"row index out of range for {n} rows")
    padded = np.concatenate([x.data, np.zeros(x.shape[:-2] + (1, x.shape[-1]), dtype=x.dtype)], axis=-2)
    out = padded[..., index, :]
    columns = []
    for s in range(index.shape[1]):
        live = index[:, s] >= 0
        rows = index[live, s]
        columns.append((s, live, rows, np.unique(rows).size == rows.size))

    def backward(g):
        gp = np.zeros_like(padded)
        for s, live, rows, unique in columns:
            if unique:
                gp[..., rows, :] += g[..., live, s, :]
            else:
                np.add.at(gp, (Ellipsis, rows, slice(None)), g[..., live, s, :])
        return (gp[..., :n, :],)

    return _result(out, (x,), backward, "gather_rows")


def getitem(a: Tensor, index) -> Tensor:
    """Basic or advanced indexing; gradients scatter-add back."""
    if isinstance(index, Tensor):
        raise TypeError("index with arrays, not tensors")

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in parts)

    def backward(g):
        out = np.zeros_like(a.data)
        if basic:
            out[index] += g       # a view: no repeated elements
        else:
            np.add.at(out, index, g)
        return (out,)

    return _result(a.data[index], (a,), backward, "getitem")


# ---------------------------------------------------------------------------
# nonlinearities


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def square(a: Tensor) -> Tensor:
    return _result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0).astype(a.dtype), (a,),
                   lambda g: (g * mask,), "relu")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _result((x * cdf).astype(a.dtype), (a,), backward, "gelu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


ACTIVATIONS = {"relu": relu, "gelu": gelu, "sigmoid": sigmoid}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        return ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(ACTIVATIONS)}") from None


def softmax_last(x: Tensor) -> Tensor:
    """Softmax over the last axis (max-subtracted)."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (x,), backward, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (population variance), then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gx = gg = gb = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            gg = _unbroadcast(g * xhat, gain.shape)
        if bias.requires_grad:
            gb = _unbroadcast(g, bias.shape)
        return gx, gg, gb

    return _result(xhat * gain.data + bias.data, (x, gain, bias), backward, "layer_norm")


def cross_entropy_mean(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean of -log softmax(logits)[target] over unmasked positions.

    ``logits`` has shape ``(..., U)``, ``targets`` the leading shape.  A fully
    masked input yields 0 with zero gradient.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ValueError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    mask = np.ones(targets.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    n_classes = logits.shape[-1]
    live = targets[mask]
    if live.size and (live.min() < 0 or live.max() >= n_classes):
        raise ValueError(f"target index out of range [0, {n_classes})")
    count = int(mask.sum())
    safe_targets = np.where(mask, targets, 0)

    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsum
    picked = np.take_along_axis(logp, safe_targets[..., None], axis=-1)[..., 0]
    if count == 0:
        loss = np.zeros((), dtype=logits.dtype)
    else:
        loss = np.asarray(-(picked * mask).sum() / count, dtype=logits.dtype)

    def backward(g):
        if count == 0:
            return (np.zeros_like(logits.data),)
        grad = np.exp(logp)
        np.put_along_axis(grad, safe_targets[..., None],
                          np.take_along_axis(grad, safe_targets[..., None], axis=-1) - 1.0, axis=-1)
        return (grad * (mask[..., None] * (g / count)),)

    return _result(loss, (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------------------
# graph traversal


def topological_order(root: Tensor) -> list[Tensor]:
    """Recorded graph below ``root``, every node after all of its inputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf that requires grad."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
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


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def first_nonfinite(root: Tensor) -> Tensor | None:
    """Earliest tensor (in execution order) holding NaN or Inf, if any."""
    for node in topological_order(root):
        if not np.all(np.isfinite(node.data)):
            return node
    return None


# ---------------------------------------------------------------------------
# parameters and optimization


def init_param(shape, scheme: str = "uniform_scaled", rng=None, name: str | None = None) -> Tensor:
    """Create a trainable tensor.

    ``uniform_scaled`` draws from +-sqrt(6 / (fan_in + fan_out)) with
    fan_in = prod(shape[:-1]) and fan_out = shape[-1] (a 1-D shape uses its
    length for both).  ``normal_scaled`` uses std sqrt(2 / (fan_in + fan_out)).
    """
    shape = tuple(int(s) for s in shape)
    if not shape:
        raise ValueError("shape must be nonempty")
    if any(s <= 0 for s in shape):
        raise ValueError(f"zero-sized dimension in shape {shape}")
    if scheme == "zeros":
        return Tensor(np.zeros(shape), requires_grad=True, name=name)
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    if len(shape) == 1:
        fan_in = fan_out = shape[0]
    else:
        fan_in, fan_out = int(np.prod(shape[:-1])), shape[-1]
    if scheme == "uniform_scaled":
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        data = rng.uniform(-bound, bound, size=shape)
    elif scheme == "normal_scaled":
        data = rng.normal(0.0, math.sqrt(2.0 / (fan_in + fan_out)), size=shape)
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    return Tensor(data, requires_grad=True, name=name)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState) -> None:
    """One bias-corrected Adam update, in place.  ``None`` grads count as zero."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError("optimizer state was built for a different parameter list")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


def clip_grad_norm(grads: Sequence[np.ndarray | None], max_norm: float) -> float:
    """Scale grads in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads if g is not None))
    if total > max_norm > 0:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            if g is not None:
                g *= scale
    return total


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tol: float
    h: float
    seconds: float = 0.0

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def failures(self) -> list[str]:
        return [name for name, err in self.errors.items() if not err < self.tol]

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        lines = [f"{name:<40s} {err:.3e}{'  FAIL' if not err < self.tol else ''}"
                 for name, err in self.errors.items()]
        lines.append(f"max relative error {self.max_error:.3e} (tol {self.tol:g})")
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max(initial=0.0))


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int | None = None,
    rng=None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare backprop gradients of ``f()`` against central differences.

    ``f`` must rebuild its graph from ``params`` on every call.  With
    ``max_entries`` set, that many randomly chosen coordinates per parameter
    are probed instead of all of them.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    rng = np.random.default_rng(rng)
    start = time.perf_counter()
    zero_grad(params.values())
    backward(f())
    errors = {}
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(idx.size)
        with no_grad():
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + h
                up = float(f().data)
                flat[i] = orig - h
                down = float(f().data)
                flat[i] = orig
                numeric[j] = (up - down) / (2.0 * h)
        errors[name] = relative_error(analytic.reshape(-1)[idx], numeric, floor)
    zero_grad(params.values())
    return GradCheckReport(errors=errors, tol=tol, h=h, seconds=time.perf_counter() - start)
