"""Dense tensors with a reverse-mode tape.

A :class:`Tensor` wraps a C-contiguous numpy array laid out channels-first
(C, D, H, W for volumes). Operations return new tensors; the arrays are never
mutated after construction. When any input requires a gradient the result
records its parents and a backward closure, and :meth:`Tensor.backward`
replays them in reverse topological order.
"""
from __future__ import annotations

import os
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
# Assert finiteness after every op; otherwise only losses are checked.
DEBUG = os.environ.get("HIGHRES3D_DEBUG", "") not in ("", "0")

_MAX_ELEMENTS = np.iinfo(np.intp).max


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    """A non-finite value was produced where it must not be."""


def check_shape(shape: Iterable[int]) -> tuple[int, ...]:
    dims = tuple(int(s) for s in shape)
    if any(s < 1 for s in dims):
        raise ShapeError(f"every extent must be >= 1, got {dims}")
    count = 1
    for s in dims:
        count *= s
        if count > _MAX_ELEMENTS:
            raise ShapeError(f"element count of {dims} overflows the address range")
    return dims


def strides_for(shape: Sequence[int]) -> tuple[int, ...]:
    """Row-major element strides: offset = sum(index[k] * strides[k])."""
    out = []
    acc = 1
    for s in reversed(shape):
        out.append(acc)
        acc *= s
    return tuple(reversed(out))


def check_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value produced by {where}")


GradFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.asarray(arr, order="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: GradFn | None = None
        self.op = "leaf"

    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence[Tensor], backward: GradFn, op: str) -> Tensor:
        out = cls.__new__(cls)
        out.data = np.asarray(data, order="C")
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = tuple(parents) if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        out.op = op
        if DEBUG:
            check_finite(out.data, op)
        return out

    # ------------------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

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

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    # ------------------------------------------------------------------
    # elementwise arithmetic: equal shapes, or a python scalar operand

    def _binary(self, other, op: str):
        if isinstance(other, Tensor):
            if other.shape != self.shape:
                raise ShapeError(f"{op}: shape mismatch {self.shape} vs {other.shape}")
            return other
        if np.ndim(other) != 0:
            raise ShapeError(f"{op}: only tensors of equal shape or scalars are supported")
        return float(other)

    def __add__(self, other) -> Tensor:
        other = self._binary(other, "add")
        if isinstance(other, Tensor):
            return Tensor._make(self.data + other.data, (self, other), lambda g: (g, g), "add")
        return Tensor._make(self.data + self.dtype.type(other), (self,), lambda g: (g,), "add")

    __radd__ = __add__

    def __neg__(self) -> Tensor:
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other) -> Tensor:
        return self + (-other)

    def __rsub__(self, other) -> Tensor:
        return (-self) + other

    def __mul__(self, other) -> Tensor:
        other = self._binary(other, "mul")
        if isinstance(other, Tensor):
            a, b = self.data, other.data
            return Tensor._make(a * b, (self, other), lambda g: (g * b, g * a), "mul")
        s = self.dtype.type(other)
        return Tensor._make(self.data * s, (self,), lambda g: (g * s,), "mul")

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        other = self._binary(other, "div")
        if isinstance(other, Tensor):
            a, b = self.data, other.data
            q = a / b
            return Tensor._make(q, (self, other), lambda g: (g / b, -g * q / b), "div")
        s = self.dtype.type(other)
        return Tensor._make(self.data / s, (self,), lambda g: (g / s,), "div")

    def square(self) -> Tensor:
        a = self.data
        return Tensor._make(a * a, (self,), lambda g: (2 * g * a,), "square")

    def relu(self) -> Tensor:
        a = self.data
        pos = a > 0
        return Tensor._make(np.where(pos, a, 0).astype(a.dtype), (self,), lambda g: (g * pos,), "relu")

    def log(self) -> Tensor:
        a = self.data
        return Tensor._make(np.log(a), (self,), lambda g: (g / a,), "log")

    def exp(self) -> Tensor:
        e = np.exp(self.data)
        return Tensor._make(e, (self,), lambda g: (g * e,), "exp")

    def clamp_min(self, floor: float) -> Tensor:
        a = self.data
        keep = a >= floor
        out = np.where(keep, a, a.dtype.type(floor))
        return Tensor._make(out, (self,), lambda g: (g * keep,), "clamp_min")

    # ------------------------------------------------------------------
    # reductions

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        shape = self.shape
        axes = _normalize_axes(axis, self.ndim)

        def back(g):
            if not keepdims:
                g = np.expand_dims(g, axes)
            return (np.broadcast_to(g, shape),)

        return Tensor._make(np.asarray(self.data.sum(axis=axes, keepdims=keepdims)), (self,), back, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        axes = _normalize_axes(axis, self.ndim)
        count = int(np.prod([self.shape[a] for a in axes])) if axes else 1
        return self.sum(axis=axes, keepdims=keepdims) / count

    def max(self, axis=None, keepdims: bool = False) -> Tensor:
        # gradient routed to the first maximal element, like argmax
        axes = _normalize_axes(axis, self.ndim)
        out = self.data.max(axis=axes, keepdims=True)
        first = _first_true(self.data == out, axes)

        def back(g):
            if not keepdims:
                g = np.expand_dims(g, axes)
            return (np.where(first, g, 0).astype(self.dtype),)

        res = out if keepdims else np.squeeze(out, axis=axes)
        return Tensor._make(np.asarray(res), (self,), back, "max")

    def argmax(self, axis: int | None = None) -> np.ndarray:
        return argmax(self.data, axis)

    # ------------------------------------------------------------------
    # shape plumbing

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),), "reshape")

    def take(self, indices: Sequence[int], axis: int = 0) -> Tensor:
        idx = np.asarray(indices, dtype=np.intp)
        shape = self.shape

        def back(g):
            full = np.zeros(shape, dtype=g.dtype)
            np.add.at(full, (slice(None),) * axis + (idx,), g)
            return (full,)

        return Tensor._make(np.take(self.data, idx, axis=axis), (self,), back, "take")

    # ------------------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if grad is None:
            if self.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones(self.shape, dtype=self.dtype)
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _topological(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = tuple(sorted(a % ndim for a in axis))
    if len(set(axes)) != len(axes):
        raise ShapeError(f"repeated axis in {axis}")
    return axes


def _first_true(mask: np.ndarray, axes: tuple[int, ...]) -> np.ndarray:
    # keep only the first True (row-major over the reduced axes) per output cell
    moved = np.moveaxis(mask, axes, range(mask.ndim - len(axes), mask.ndim))
    flat = moved.reshape(moved.shape[: mask.ndim - len(axes)] + (-1,))
    pick = np.zeros_like(flat)
    np.put_along_axis(pick, flat.argmax(axis=-1)[..., None], True, axis=-1)
    return np.moveaxis(pick.reshape(moved.shape), range(mask.ndim - len(axes), mask.ndim), axes)


# ----------------------------------------------------------------------
# functional surface


def zeros(shape: Iterable[int], dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.zeros(check_shape(shape), dtype=dtype))


def elementwise(op: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    if op == "add":
        return a + b
    if op == "mul":
        return a * b
    if op == "max0":
        if b is not None:
            raise ValueError("max0 is unary")
        return a.relu()
    raise ValueError(f"unknown elementwise op {op!r}")


def argmax(arr: np.ndarray, axis: int | None = None) -> np.ndarray:
    """Index of the maximum; ties go to the lowest index."""
    return np.asarray(np.argmax(arr, axis=axis))


def reduce(op: str, t: Tensor, axes=None):
    if op == "sum":
        return t.sum(axes)
    if op == "mean":
        return t.mean(axes)
    if op == "max":
        return t.max(axes)
    if op == "argmax":
        if axes is None:
            return argmax(t.data)
        if isinstance(axes, (tuple, list)):
            if len(axes) != 1:
                raise ValueError("argmax reduces over exactly one axis")
            axes = axes[0]
        return argmax(t.data, axes)
    raise ValueError(f"unknown reduction {op!r}")


# ----------------------------------------------------------------------
# randomness


def make_rng(seed) -> np.random.Generator:
    """PCG64 generator; ``seed`` may be an int or a tuple such as (seed, index)."""
    return np.random.Generator(np.random.PCG64(seed))


def random_fill(rng: np.random.Generator, dist: str, shape: Iterable[int],
                a: float = 0.0, b: float = 1.0, dtype=DEFAULT_DTYPE) -> Tensor:
    """``dist='uniform'`` draws from [a, b); ``dist='normal'`` uses mean a, std b."""
    shape = check_shape(shape)
    if dist == "uniform":
        if a > b:
            raise ValueError(f"uniform needs a <= b, got ({a}, {b})")
        if a == b:
            return Tensor(np.full(shape, a, dtype=dtype))
        return Tensor(rng.uniform(a, b, size=shape).astype(dtype))
    if dist == "normal":
        if b < 0:
            raise ValueError(f"normal needs sigma >= 0, got {b}")
        return Tensor((a + b * rng.standard_normal(size=shape)).astype(dtype))
    raise ValueError(f"unknown distribution {dist!r}")
