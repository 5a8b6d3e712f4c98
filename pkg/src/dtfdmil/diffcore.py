"""Dense 2-D tensors with reverse-mode differentiation, Adam, and a gradient checker.

Every tensor is a matrix (rows x cols). Values default to float32; pass
``dtype=np.float64`` to build the same graph in double precision, which is
what the finite-difference checks use.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

BCE_EPS = 1e-7


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class Tensor:
    """A matrix node in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 _parents: tuple = (), _backward=None, op: str = "leaf"):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            arr = np.array(data, dtype=dtype)
        elif isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
            arr = data
        else:
            arr = np.array(data, dtype=np.float32)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim > 2:
            raise DimensionError(f"tensors are at most 2-D, got shape {arr.shape}")
        if arr.size == 0:
            raise DimensionError(f"empty tensor of shape {arr.shape} is not allowed")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar, strict shapes like the named ops
    def __add__(self, other):
        return add(self, _lift(other, self))

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like.shape, x, dtype=like.dtype))


def _make(data: np.ndarray, parents: tuple, backward_fn, op: str) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, op=op)
    return Tensor(data, op=op)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def bw(g):
        return g @ B.T, A.T @ g

    return _make(A @ B, (a, b), bw, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    A, B = a.data, b.data
    return _make(A * B, (a, b), lambda g: (g * B, g * A), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1 - y * y),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid_np(a.data)
    return _make(y, (a,), lambda g: (g * y * (1 - y),), "sigmoid")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0, -x)).astype(x.dtype, copy=False)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError(f"log of non-positive value (min {a.data.min()})")
    X = a.data
    return _make(np.log(X), (a,), lambda g: (g / X,), "log")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    X = a.data
    inside = (X >= lo) & (X <= hi)
    return _make(np.clip(X, lo, hi).astype(X.dtype, copy=False), (a,),
                 lambda g: (g * inside,), "clamp")


_ELEMENTWISE = {
    "tanh": tanh, "sigmoid": sigmoid, "exp": exp, "log": log,
    "add": add, "sub": sub, "mul": mul, "scale": scale,
}


def elementwise(tag: str, *args) -> Tensor:
    """Dispatch an elementwise op by name (``tanh``, ``mul``, ``scale`` ...)."""
    try:
        fn = _ELEMENTWISE[tag]
    except KeyError:
        raise ValueError(f"unknown elementwise op {tag!r}") from None
    return fn(*args)


def softmax_row(a: Tensor) -> Tensor:
    """Softmax along each row, with max subtraction."""
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _make(y, (a,), bw, "softmax_row")


def reduce(tag: str, a: Tensor, axis: int | None = None) -> Tensor:
    """``sum`` or ``mean`` over axis 0 (rows), 1 (cols) or None (everything)."""
    if tag not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {tag!r}")
    if axis not in (0, 1, None):
        raise DimensionError(f"invalid axis {axis!r} for a 2-D tensor")
    if a.data.size == 0:
        raise DimensionError("empty reduction")
    shape = a.shape
    n = a.data.size if axis is None else shape[axis]
    out = a.data.sum(axis=axis, keepdims=True)
    factor = a.data.dtype.type(1.0 / n) if tag == "mean" else None
    if factor is not None:
        out = out * factor

    def bw(g):
        gg = np.broadcast_to(g, shape)
        return ((gg * factor) if factor is not None else gg.copy(),)

    return _make(out.reshape(1, 1) if axis is None else out, (a,), bw, tag)


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    return reduce("sum", a, axis)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    return reduce("mean", a, axis)


def transpose(a: Tensor) -> Tensor:
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def broadcast_to(a: Tensor, shape: tuple[int, int]) -> Tensor:
    """Repeat a row vector down rows, or a column vector across columns."""
    src = a.shape
    for s, t in zip(src, shape):
        if s != t and s != 1:
            raise DimensionError(f"cannot broadcast {src} to {shape}")

    def bw(g):
        if src[0] == 1 and shape[0] != 1:
            g = g.sum(axis=0, keepdims=True)
        if src[1] == 1 and shape[1] != 1:
            g = g.sum(axis=1, keepdims=True)
        return (g,)

    return _make(np.broadcast_to(a.data, shape).copy(), (a,), bw, "broadcast")


def index(a: Tensor, idx) -> Tensor:
    """Basic-slicing selection; the result is always kept 2-D."""
    if not isinstance(idx, tuple) or len(idx) != 2:
        raise DimensionError("index needs a (row, col) pair")
    r, c = idx
    rs = slice(r, r + 1) if isinstance(r, (int, np.integer)) else r
    cs = slice(c, c + 1) if isinstance(c, (int, np.integer)) else c
    shape = a.shape
    if isinstance(r, (int, np.integer)) and not -shape[0] <= r < shape[0]:
        raise DimensionError(f"row {r} out of range for {shape}")
    if isinstance(c, (int, np.integer)) and not -shape[1] <= c < shape[1]:
        raise DimensionError(f"col {c} out of range for {shape}")
    out = a.data[rs, cs].copy()

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[rs, cs] = g
        return (full,)

    return _make(out, (a,), bw, "index")


def bce_loss(p: Tensor, y: int, eps: float = BCE_EPS) -> Tensor:
    """Binary cross entropy of a 1x1 probability against a 0/1 label.

    ``p`` is clamped to ``[eps, 1 - eps]`` first so the loss stays finite.
    """
    if y not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {y!r}")
    if p.shape != (1, 1):
        raise DimensionError(f"bce_loss expects a 1x1 probability, got {p.shape}")
    pc = clamp(p, eps, 1.0 - eps)
    if y == 1:
        return scale(log(pc), -1.0)
    one = Tensor(np.ones((1, 1), dtype=p.dtype))
    return scale(log(sub(one, pc)), -1.0)


# ---------------------------------------------------------------- backward

def _topo(root: Tensor, stop: set[int] | None = None) -> list[Tensor]:
    """Post-order of the differentiable subgraph; nodes in ``stop`` are not expanded."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if stop is not None and id(node) in stop:
            continue
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _propagate(root: Tensor, keep: Callable[[Tensor], bool] | None = None,
               order: list[Tensor] | None = None, stop: set[int] | None = None):
    if root.shape != (1, 1):
        raise GraphError(f"backward needs a scalar root, got shape {root.shape}")
    if order is None:
        order = _topo(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones((1, 1), dtype=root.dtype)}
    out: dict[int, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        out[id(node)] = g
        if node._backward is None or (stop is not None and id(node) in stop):
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or (keep is not None and not keep(parent)):
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    return out, order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(node) into ``.grad`` of every reachable tensor that requires grad.

    Gradients add up across calls; use :func:`zero_grad` between steps.
    """
    grads, order = _propagate(root)
    for node in order:
        g = grads.get(id(node))
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g


def grad(root: Tensor, inputs: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``root`` w.r.t. ``inputs`` without touching any ``.grad``.

    Only the part of the graph lying between ``root`` and ``inputs`` is traversed.
    """
    targets = {id(t) for t in inputs}
    reach: set[int] = set(targets)
    order = _topo(root, stop=targets)
    for node in order:
        if id(node) in reach or any(id(p) in reach for p in node._parents):
            reach.add(id(node))
    order = [n for n in order if id(n) in reach]
    grads, _ = _propagate(root, keep=lambda t: id(t) in reach, order=order, stop=targets)
    return [grads.get(id(t), np.zeros_like(t.data)) for t in inputs]


def zero_grad(tensors: Sequence[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------- grad check

def grad_check(f: Callable[..., Tensor], x: Tensor | Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` receives the tensor(s) in ``x`` as positional arguments and returns
    a scalar. Everything is evaluated in float64 on copies of the inputs. The
    error per element is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    leaves = [Tensor(t.data.astype(np.float64), requires_grad=True) for t in xs]
    out = f(*leaves)
    backward(out)
    worst = 0.0
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f(*[Tensor(t.data) for t in leaves]).item()
            flat[i] = orig - eps
            down = f(*[Tensor(t.data) for t in leaves]).item()
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params])


@dataclass
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None],
              state: AdamState, hyper: AdamConfig | None = None) -> tuple[Sequence[Tensor], AdamState]:
    """One bias-corrected Adam update; ``weight_decay * param`` is added to each gradient.

    Parameters are rebound to fresh arrays rather than mutated, so graphs that
    captured the old values stay consistent.
    """
    hyper = hyper or AdamConfig()
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise DimensionError("adam_step: params, grads and state have different lengths")
    state.t += 1
    t = state.t
    bc1 = 1.0 - hyper.beta1 ** t
    bc2 = 1.0 - hyper.beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise DimensionError(f"adam_step: param {i} has shape {p.shape}, grad {g.shape}")
        if hyper.weight_decay:
            g = g + hyper.weight_decay * p.data
        m = hyper.beta1 * state.m[i] + (1 - hyper.beta1) * g
        v = hyper.beta2 * state.v[i] + (1 - hyper.beta2) * g * g
        state.m[i], state.v[i] = m, v
        update = hyper.lr * (m / bc1) / (np.sqrt(v / bc2) + hyper.eps)
        p.data = (p.data - update).astype(p.data.dtype, copy=False)
    return params, state


class Adam:
    """Stateful wrapper pairing a parameter list with its :class:`AdamState`."""

    def __init__(self, params: Sequence[Tensor], hyper: AdamConfig | None = None):
        self.params = list(params)
        self.hyper = hyper or AdamConfig()
        self.state = AdamState.for_params(self.params)

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, self.hyper)

    def zero_grad(self) -> None:
        zero_grad(self.params)


# ---------------------------------------------------------------- RNG

def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator; Philox is counter-based and platform independent."""
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from arbitrary printable parts (bag ids, epochs ...)."""
    h = hashlib.blake2b("\x1f".join(map(str, parts)).encode("utf-8"), digest_size=8)
    return int.from_bytes(h.digest(), "little")
