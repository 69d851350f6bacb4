"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation accepts arbitrary leading batch dimensions; the per-example
shapes in the docstrings describe the trailing axes. Binary element-wise ops
follow numpy broadcasting and reduce gradients back onto the input shapes.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

_SEQ = itertools.count()
_GRAD_ENABLED = True

ACTIVATIONS = ("tanh", "sigmoid", "relu")


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A node in the differentiation graph.

    Leaves created with ``requires_grad=True`` own a zero-initialised ``grad``
    buffer that ``backward`` accumulates into. ``update_mask`` (optional,
    broadcastable to ``shape``) marks which entries an optimizer may change;
    frozen rows of an embedding table carry ``False`` there.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self.update_mask: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"
        self._seq = next(_SEQ)

    # -- basic properties -------------------------------------------------
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
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- operators --------------------------------------------------------
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        return transpose(self, axes or None)

    @property
    def T(self) -> Tensor:
        return transpose(self, None)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Iterable[Tensor], backward_fn, op: str) -> Tensor:
    parents = tuple(parents)
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.update_mask = None
    out._seq = next(_SEQ)
    out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.grad = None
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
        out._op = op
    else:
        out._parents = ()
        out._backward = None
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over the axes that broadcasting expanded from ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- graph ----------------------------------------------------------------

def topo_order(root: Tensor) -> list[Tensor]:
    """All grad-requiring nodes reachable from ``root``, in execution order.

    Creation sequence numbers are monotone, so sorting by them yields a
    topological order in which every node's inputs precede it.
    """
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen[id(node)] = node
        stack.extend(p for p in node._parents if p.requires_grad and id(p) not in seen)
    return sorted(seen.values(), key=lambda n: n._seq)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every grad-requiring leaf reachable from ``loss``."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo_order(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


# -- construction ---------------------------------------------------------

def glorot_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def build_tensor(
    shape: Sequence[int],
    init: str = "zeros",
    *,
    lo: float | None = None,
    hi: float | None = None,
    values=None,
    rng: np.random.Generator | None = None,
    requires_grad: bool = False,
) -> Tensor:
    """Create a leaf tensor filled with zeros, ones, uniform draws or ``values``."""
    shape = tuple(int(s) for s in shape)
    if not shape:
        raise ValueError("shape must have at least one dimension")
    if any(s < 1 for s in shape):
        raise ValueError(f"all dimensions must be >= 1, got {shape}")
    if init == "zeros":
        data = np.zeros(shape)
    elif init == "ones":
        data = np.ones(shape)
    elif init == "uniform":
        if lo is None or hi is None or not lo < hi:
            raise ValueError(f"uniform init needs lo < hi, got lo={lo}, hi={hi}")
        if rng is None:
            raise ValueError("uniform init needs a seeded rng")
        data = rng.uniform(lo, hi, size=shape)
    elif init == "values":
        data = np.asarray(values, dtype=np.float64)
        if data.size != int(np.prod(shape)):
            raise ValueError(f"{data.size} values cannot fill shape {shape}")
        data = data.reshape(shape)
    else:
        raise ValueError(f"unknown init {init!r}")
    return Tensor(data, requires_grad=requires_grad)


def glorot(shape: Sequence[int], rng: np.random.Generator, fan_in: int | None = None,
           fan_out: int | None = None) -> Tensor:
    """Trainable uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)).

    For ``[out, in]`` matrices the fans default to the two axes; higher-rank
    shapes must pass them explicitly.
    """
    if fan_in is None or fan_out is None:
        if len(shape) == 1:
            fan_in, fan_out = 1, shape[0]
        else:
            fan_out, fan_in = shape[-2], shape[-1]
    a = glorot_bound(fan_in, fan_out)
    return build_tensor(shape, "uniform", lo=-a, hi=a, rng=rng, requires_grad=True)


def zeros_param(shape: Sequence[int]) -> Tensor:
    return build_tensor(shape, "zeros", requires_grad=True)


# -- element-wise ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _node(_broadcast_op(np.add, a, b), (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _node(_broadcast_op(np.subtract, a, b), (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(_broadcast_op(np.multiply, a, b), (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * a.data / b.data, b.shape)

    return _node(_broadcast_op(np.divide, a, b), (a, b), bw, "div")


def _broadcast_op(fn, a: Tensor, b: Tensor) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError as exc:
        raise ValueError(f"incompatible shapes {a.shape} and {b.shape}") from exc


def ew_binary(op: str, a, b) -> Tensor:
    """Element-wise ``add``, ``sub`` or ``mul``."""
    table = {"add": add, "sub": sub, "mul": mul}
    if op not in table:
        raise ValueError(f"unknown element-wise op {op!r}")
    return table[op](a, b)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    # tanh form is stable for large |x| in both directions
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _node(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _node(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


def activation(kind: str, x: Tensor) -> Tensor:
    if kind == "tanh":
        return tanh(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "relu":
        return relu(x)
    raise ValueError(f"unknown activation {kind!r}")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _node(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes where the input lies inside the closed range."""
    inside = (x.data >= lo) & (x.data <= hi)
    return _node(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


# -- reductions and shape ---------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is not None:
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))
    else:
        inv = None
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, type(Ellipsis), type(None))) for p in parts)


def getitem(x: Tensor, index) -> Tensor:
    shape = x.shape
    basic = _is_basic(index)

    def bw(g):
        out = np.zeros(shape)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _node(x.data[index], (x,), bw, "getitem")


def expand_dims(x: Tensor, axis: int) -> Tensor:
    shape = list(x.shape)
    ax = axis if axis >= 0 else len(shape) + 1 + axis
    shape.insert(ax, 1)
    return reshape(x, tuple(shape))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if len(tensors) == 1:
        return tensors[0]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ValueError(f"cannot concatenate shapes {shapes} on axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(data, tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _node(data, tensors, bw, "stack")


# -- linear algebra -------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batched over leading ones."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(a.data @ b.data, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped ``[out, in]``."""
    if x.shape[-1] != weight.shape[-1]:
        raise ValueError(f"linear shape mismatch: input {x.shape} vs weight {weight.shape}")
    y = x.data @ weight.data.T
    if bias is not None:
        y = y + bias.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ weight.data
        gw = g2.T @ x.data.reshape(-1, x.shape[-1])
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(y, parents, bw, "linear")


# -- attention primitives ---------------------------------------------------

def softmax_sharp(logits: Tensor, beta: float = 1.0, mask=None, axis: int = -1) -> Tensor:
    """Softmax of ``beta * logits`` along ``axis`` with masked entries excluded.

    Masked positions are treated as -inf before exponentiation, so they get
    exactly zero weight and the unmasked weights form an exact simplex.
    """
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    z = beta * logits.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not mask.any(axis=axis).all():
            raise ValueError("softmax over a fully masked slice")
        z = np.where(mask, z, -np.inf)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    w = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        inner = (g * w).sum(axis=axis, keepdims=True)
        return (beta * w * (g - inner),)

    return _node(w, (logits,), bw, "softmax")


def softmax(logits: Tensor, mask=None, axis: int = -1) -> Tensor:
    return softmax_sharp(logits, 1.0, mask, axis)


def conv1d_same(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Length-preserving 1-D convolution.

    ``x`` is ``[..., len, d_in]``, ``kernel`` is ``[k, d_in, d_out]``. Position
    ``t`` sees rows ``t - k//2 .. t + (k - 1 - k//2)`` with zero padding, so odd
    kernels are centred and even kernels lean one extra row to the left.
    """
    k, d_in, d_out = kernel.shape
    n = x.shape[-2]
    if x.shape[-1] != d_in:
        raise ValueError(f"conv1d input width {x.shape[-1]} != kernel d_in {d_in}")
    if k > 2 * n + 1:
        raise ValueError(f"kernel size {k} too large for length {n}")
    left = k // 2
    right = k - 1 - left
    pad = [(0, 0)] * (x.ndim - 2) + [(left, right), (0, 0)]
    xp = np.pad(x.data, pad)
    cols = np.concatenate([xp[..., j:j + n, :] for j in range(k)], axis=-1)
    w2 = kernel.data.reshape(k * d_in, d_out)
    y = cols @ w2
    if bias is not None:
        y = y + bias.data

    def bw(g):
        dcols = g @ w2.T
        dxp = np.zeros_like(xp)
        for j in range(k):
            dxp[..., j:j + n, :] += dcols[..., j * d_in:(j + 1) * d_in]
        gx = dxp[..., left:left + n, :]
        gk = (cols.reshape(-1, k * d_in).T @ g.reshape(-1, d_out)).reshape(k, d_in, d_out)
        if bias is None:
            return gx, gk
        return gx, gk, g.reshape(-1, d_out).sum(axis=0)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _node(y, parents, bw, "conv1d")


def pool(kind: str, x: Tensor, mask=None) -> Tensor:
    """Reduce ``[..., len, d]`` over unmasked rows with ``max`` or ``avg``."""
    n = x.shape[-2]
    if mask is None:
        mask = np.ones(x.shape[:-1], dtype=bool)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape[:-1])
    if not mask.any(axis=-1).all():
        raise ValueError("pool over a fully masked sequence")
    m = mask[..., None]
    if kind == "avg":
        count = m.sum(axis=-2)
        y = np.where(m, x.data, 0.0).sum(axis=-2) / count

        def bw(g):
            return (np.where(m, g[..., None, :] / count[..., None, :], 0.0),)

        return _node(y, (x,), bw, "avg_pool")
    if kind == "max":
        masked = np.where(m, x.data, -np.inf)
        idx = np.argmax(masked, axis=-2)
        y = np.take_along_axis(x.data, idx[..., None, :], axis=-2)[..., 0, :]

        def bw(g):
            out = np.zeros(x.shape)
            np.put_along_axis(out, idx[..., None, :], g[..., None, :], axis=-2)
            return (out,)

        return _node(y, (x,), bw, "max_pool")
    raise ValueError(f"unknown pool kind {kind!r}")


def nll(probs: Tensor, gold, floor: float = 1e-12) -> Tensor:
    """Mean of ``-log(max(probs[i, gold[i]], floor))`` over the batch axis."""
    gold = np.asarray(gold, dtype=np.int64)
    if probs.ndim == 1:
        probs2 = probs.data[None, :]
        gold = gold.reshape(1)
    else:
        probs2 = probs.data
    n, c = probs2.shape
    if gold.shape != (n,) or (gold < 0).any() or (gold >= c).any():
        raise IndexError(f"gold indices {gold.tolist()} out of range for {c} classes")
    rows = np.arange(n)
    p = probs2[rows, gold]
    clamped = np.maximum(p, floor)
    loss = -np.log(clamped).mean()

    def bw(g):
        out = np.zeros_like(probs2)
        out[rows, gold] = np.where(p > floor, -1.0 / clamped, 0.0) * g / n
        return (out.reshape(probs.shape),)

    return _node(np.asarray(loss), (probs,), bw, "nll")


# -- verification ---------------------------------------------------------

def grad_check(f: Callable[[], Tensor] | Callable[[Tensor], Tensor], x,
               eps: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    ``x`` is a tensor or a sequence of tensors. When ``x`` is a single tensor
    ``f`` receives it; otherwise ``f`` takes no arguments and closes over the
    tensors. The error per entry is |a - n| / max(|a|, |n|, 1e-8).

    Non-differentiable points (relu at exactly 0, max-pool ties, clip
    boundaries) are outside the contract.
    """
    single = isinstance(x, Tensor)
    tensors = [x] if single else list(x)
    call = (lambda: f(x)) if single else f
    for t in tensors:
        if not t.requires_grad:
            raise ValueError("grad_check inputs must require grad")
        t.zero_grad()
    out = call()
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    out.backward()
    worst = 0.0
    with no_grad():
        for t in tensors:
            analytic = t.grad.copy()
            flat = t.data.reshape(-1)
            ag = analytic.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = call().item()
                flat[i] = orig - eps
                fm = call().item()
                flat[i] = orig
                num = (fp - fm) / (2.0 * eps)
                denom = max(abs(ag[i]), abs(num), 1e-8)
                worst = max(worst, abs(ag[i] - num) / denom)
    return worst
