"""Small reverse-mode autodiff substrate on top of numpy.

Every ``Tensor`` produced by an operation remembers its parents and a closure
that pushes the output gradient back to them.  ``Tensor.backward`` linearises
the recorded graph into a tape (reverse topological order) and replays it.

Training runs in float32; gradient verification runs in float64.  Operations
preserve the dtype of their inputs.
"""
from __future__ import annotations

import contextlib
import hashlib
import math
import struct
import warnings
from typing import Callable, Iterable, Sequence

import numpy as np

from sm3.errors import NonFiniteError

NORM_EPS = 1e-12

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # sum out dimensions that were introduced or stretched by broadcasting
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def check_finite(self, what: str = "tensor") -> Tensor:
        if not self.is_finite():
            raise NonFiniteError(f"{what} contains NaN or Inf")
        return self

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph plumbing ---------------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        g = _unbroadcast(g, self.data.shape).astype(self.data.dtype, copy=False)
        if self.grad is None:
            self.grad = np.array(g, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        tape = _build_tape(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in tape:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = _unbroadcast(pg, parent.data.shape)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- arithmetic -------------------------------------------------------
    def _lift(self, other) -> Tensor:
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        other = self._lift(other)
        return Tensor._make(self.data + other.data, (self, other), lambda g: (g, g))

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        other = self._lift(other)
        return Tensor._make(self.data - other.data, (self, other), lambda g: (g, -g))

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, other):
        other = self._lift(other)
        a, b = self.data, other.data
        return Tensor._make(a * b, (self, other), lambda g: (g * b, g * a))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        a, b = self.data, other.data
        return Tensor._make(a / b, (self, other), lambda g: (g / b, -g * a / (b * b)))

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __pow__(self, exponent: float):
        a = self.data
        return Tensor._make(a ** exponent, (self,), lambda g: (g * exponent * a ** (exponent - 1),))

    def __matmul__(self, other):
        other = self._lift(other)
        a, b = self.data, other.data
        if a.ndim > 2 and b.ndim == 2:
            # stacked rows times one matrix: flatten so the weight gradient is one GEMM
            lead = a.shape[:-1]
            a2 = a.reshape(-1, a.shape[-1])

            def back_flat(g):
                g2 = g.reshape(-1, g.shape[-1])
                return (g2 @ b.T).reshape(a.shape), a2.T @ g2

            return Tensor._make((a2 @ b).reshape(*lead, b.shape[1]), (self, other), back_flat)

        def back(g):
            if b.ndim == 1:
                ga = np.multiply.outer(g, b)
                gb = np.tensordot(a, g, axes=(tuple(range(a.ndim - 1)), tuple(range(g.ndim))))
                return ga, gb
            ga = g @ np.swapaxes(b, -1, -2)
            gb = np.swapaxes(a, -1, -2) @ g
            return ga, gb

        return Tensor._make(a @ b, (self, other), back)

    # -- elementwise functions -------------------------------------------
    def exp(self):
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def log(self):
        a = self.data
        return Tensor._make(np.log(a), (self,), lambda g: (g / a,))

    def sqrt(self):
        out = np.sqrt(self.data)
        return Tensor._make(out, (self,), lambda g: (g * 0.5 / out,))

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor._make(out, (self,), lambda g: (g * (1.0 - out * out),))

    def relu(self):
        a = self.data
        return Tensor._make(np.maximum(a, 0), (self,), lambda g: (g * (a > 0),))

    def gelu(self):
        # tanh approximation; smooth everywhere, so finite differences stay honest
        a = self.data
        dt = a.dtype.type
        c = dt(math.sqrt(2.0 / math.pi))
        k = dt(0.044715)
        a2 = a * a
        t = np.tanh(c * a * (1 + k * a2))
        half = dt(0.5)
        out = half * a * (1 + t)

        def back(g):
            dinner = c * (1 + 3 * k * a2)
            return (g * (half * (1 + t) + half * a * (1 - t * t) * dinner),)

        return Tensor._make(out, (self,), back)

    def clamp_min(self, floor: float):
        a = self.data
        return Tensor._make(np.maximum(a, floor), (self,), lambda g: (g * (a >= floor),))

    # -- reductions and shape --------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        shape = self.data.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), back)

    def mean(self, axis=None, keepdims: bool = False):
        count = self.data.size if axis is None else np.prod([self.data.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        axes = axes or tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        return Tensor._make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    @property
    def T(self):
        return self.transpose()

    def swapaxes(self, a: int, b: int):
        return Tensor._make(np.swapaxes(self.data, a, b), (self,), lambda g: (np.swapaxes(g, a, b),))

    def __getitem__(self, idx):
        if isinstance(idx, Tensor):
            idx = idx.data.astype(np.int64)
        shape = self.data.shape
        dtype = self.data.dtype

        parts = idx if isinstance(idx, tuple) else (idx,)
        basic = all(p is None or p is Ellipsis or isinstance(p, (int, np.integer, slice)) for p in parts)

        def back(g):
            full = np.zeros(shape, dtype=dtype)
            if basic:
                full[idx] = g  # basic indexing never repeats an element
            else:
                np.add.at(full, idx, g)
            return (full,)

        return Tensor._make(self.data[idx], (self,), back)

    def logsumexp(self, axis: int = -1, keepdims: bool = False):
        a = self.data
        m = np.max(a, axis=axis, keepdims=True)
        m = np.where(np.isfinite(m), m, 0)
        s = np.exp(a - m)
        total = s.sum(axis=axis, keepdims=True)
        out = np.log(total) + m
        weights = s / total

        def back(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (g * weights,)

        if not keepdims:
            out = np.squeeze(out, axis=axis)
        return Tensor._make(out, (self,), back)


def _build_tape(root: Tensor) -> list[Tensor]:
    """Reverse topological order of the graph under ``root`` (root first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    order.reverse()
    return order


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def back(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor._make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), back)


def softmax(x, axis: int = -1, temperature: float = 1.0) -> Tensor:
    """Temperature-scaled softmax along ``axis``; shift invariant."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    x = as_tensor(x)
    if not x.is_finite():
        raise NonFiniteError("softmax input contains NaN or Inf")
    z = x * (1.0 / temperature) if temperature != 1.0 else x
    a = z.data
    e = np.exp(a - a.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (z,), back)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return x - x.logsumexp(axis=axis, keepdims=True)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = NORM_EPS) -> Tensor:
    """Rows scaled to unit norm; norms below ``eps`` are clamped to ``eps``."""
    norm = (x * x).sum(axis=axis, keepdims=True).sqrt().clamp_min(eps)
    return x / norm


def pairwise_cosine(a: Tensor, b: Tensor) -> Tensor:
    """Matrix of cosine similarities between the rows of ``a`` and ``b``."""
    return l2_normalize(a) @ l2_normalize(b).T


def cosine_similarity(u, v, eps: float = NORM_EPS) -> tuple[float, bool]:
    """Cosine similarity of two vectors.

    Returns ``(value, degenerate)``.  If either norm falls below ``eps`` the
    value is defined as 0.0 and ``degenerate`` is True (a warning is issued).
    """
    u = np.asarray(u.data if isinstance(u, Tensor) else u, dtype=np.float64).ravel()
    v = np.asarray(v.data if isinstance(v, Tensor) else v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ValueError(f"length mismatch: {u.shape[0]} vs {v.shape[0]}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < eps or nv < eps:
        warnings.warn("cosine similarity of a zero-norm vector; returning 0", RuntimeWarning, stacklevel=2)
        return 0.0, True
    value = float(u @ v / (nu * nv))
    return min(1.0, max(-1.0, value)), False


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or p == 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return x * keep


# -- randomness -----------------------------------------------------------

def derive_seed(seed: int, *tags) -> int:
    """64-bit seed derived from ``seed`` and purpose tags via SHA-256."""
    h = hashlib.sha256(struct.pack("<Q", seed & 0xFFFFFFFFFFFFFFFF))
    for tag in tags:
        h.update(b"\x1f")
        h.update(str(tag).encode())
    return int.from_bytes(h.digest()[:8], "little")


class Rng:
    """Deterministic random stream: numpy's PCG64 seeded with a 64-bit integer.

    ``child(*tags)`` gives an independent stream whose seed is
    ``derive_seed(seed, *tags)``, so every consumer of randomness can be
    addressed by a stable purpose tag.
    """

    def __init__(self, seed: int):
        if seed < 0 or seed >= 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self.gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, *tags) -> Rng:
        return Rng(derive_seed(self.seed, *tags))

    def __getattr__(self, attr):
        return getattr(self.gen, attr)


# -- gradient verification -----------------------------------------------

def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5) -> float:
    """Largest relative error between reverse-mode and central-difference gradients.

    ``f`` is re-evaluated with each coordinate of each parameter nudged by
    ``±eps``.  The relative error of a coordinate is
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    params = list(params)
    for p in params:
        if p.dtype != np.float64:
            raise TypeError("grad_check needs float64 parameters")
        p.requires_grad = True
        p.grad = None
    out = f()
    if not out.is_finite():
        raise NonFiniteError("f is not finite at the base point")
    out.backward()
    worst = 0.0
    with no_grad():
        for p in params:
            analytic = np.zeros_like(p.data) if p.grad is None else p.grad
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f().item()
                flat[i] = orig - eps
                fm = f().item()
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise NonFiniteError(f"f is not finite at probe {p.name or 'param'}[{i}]")
                numeric = (fp - fm) / (2 * eps)
                a = float(analytic.reshape(-1)[i])
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, err)
    return worst
