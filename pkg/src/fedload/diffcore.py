"""Dense float64 math, parameter trees and a finite-difference gradient oracle.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. A
:class:`ParamTree` is an ordered, path-keyed collection of tensors and is the
unit that models, optimizers and the federated server pass around.
"""
from __future__ import annotations

from collections.abc import Callable, Iterator, Mapping
from dataclasses import dataclass

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when tensor dimensions do not agree."""


class LayoutError(ValueError):
    """Raised when two parameter layouts (or a layout and a vector) disagree."""


class NumericError(ArithmeticError):
    """Raised when a function evaluation produced a non-finite value."""


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


def matmul(a, b) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def sigmoid(x) -> np.ndarray:
    # tanh form saturates cleanly, no overflow warnings for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * as_tensor(x)))


def tanh_act(x) -> np.ndarray:
    return np.tanh(as_tensor(x))


def relu(x) -> np.ndarray:
    return np.maximum(as_tensor(x), 0.0)


def softmax(scores, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along ``axis``."""
    s = as_tensor(scores)
    if s.size == 0 or s.shape[axis] == 0:
        raise ValueError("softmax of an empty score vector")
    z = np.exp(s - s.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


class ParamTree(Mapping):
    """Immutable mapping ``path -> float64 array`` iterated in sorted path order.

    Arrays handed in are copied, and the stored arrays are flagged read-only so
    a tree can be shared freely between clients and threads.
    """

    __slots__ = ("_entries",)

    def __init__(self, entries: Mapping[str, np.ndarray] | None = None):
        items = {}
        for path, value in dict(entries or {}).items():
            if not isinstance(path, str) or not path:
                raise LayoutError(f"invalid parameter path {path!r}")
            arr = np.array(value, dtype=DTYPE, copy=True)
            arr.setflags(write=False)
            items[path] = arr
        self._entries = {k: items[k] for k in sorted(items)}

    def __getitem__(self, path: str) -> np.ndarray:
        return self._entries[path]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}: {v.shape}" for k, v in self._entries.items())
        return f"ParamTree({{{inner}}})"

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamTree):
            return NotImplemented
        return self.layout() == other.layout() and all(
            np.array_equal(self[k], other[k]) for k in self
        )

    __hash__ = None

    def layout(self) -> "Layout":
        return Layout(tuple((k, v.shape) for k, v in self._entries.items()))

    @property
    def size(self) -> int:
        return sum(v.size for v in self._entries.values())

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ParamTree":
        return ParamTree({k: fn(v) for k, v in self._entries.items()})

    def zip_map(self, other: "ParamTree", fn) -> "ParamTree":
        check_same_layout(self, other)
        return ParamTree({k: fn(v, other[k]) for k, v in self._entries.items()})

    def subtree(self, prefix: str) -> dict[str, np.ndarray]:
        """Entries under ``prefix.`` with the prefix stripped."""
        p = prefix + "."
        return {k[len(p):]: v for k, v in self._entries.items() if k.startswith(p)}

    def replace(self, updates: Mapping[str, np.ndarray]) -> "ParamTree":
        merged = dict(self._entries)
        for k, v in updates.items():
            if k not in merged:
                raise LayoutError(f"unknown parameter path {k!r}")
            if np.shape(v) != merged[k].shape:
                raise LayoutError(f"shape change for {k!r}: {merged[k].shape} -> {np.shape(v)}")
            merged[k] = v
        return ParamTree(merged)


@dataclass(frozen=True)
class Layout:
    entries: tuple[tuple[str, tuple[int, ...]], ...]

    @property
    def size(self) -> int:
        return int(sum(int(np.prod(s)) for _, s in self.entries))

    @property
    def paths(self) -> tuple[str, ...]:
        return tuple(p for p, _ in self.entries)


def check_same_layout(a: ParamTree, b: ParamTree) -> None:
    la, lb = a.layout(), b.layout()
    if la != lb:
        missing = set(la.paths) ^ set(lb.paths)
        detail = f"paths differ: {sorted(missing)}" if missing else "shapes differ"
        raise LayoutError(f"parameter layouts do not match ({detail})")


def flatten(p: ParamTree) -> tuple[Layout, np.ndarray]:
    """Concatenate all entries (sorted path order) into a ``1 x N`` row."""
    layout = p.layout()
    if len(p) == 0:
        return layout, np.zeros((1, 0), dtype=DTYPE)
    vec = np.concatenate([p[k].ravel() for k in p])
    return layout, vec.reshape(1, -1)


def unflatten(layout: Layout, v) -> ParamTree:
    v = as_tensor(v).ravel()
    if v.size != layout.size:
        raise LayoutError(f"vector of length {v.size} does not fit layout of size {layout.size}")
    out, pos = {}, 0
    for path, shape in layout.entries:
        n = int(np.prod(shape))
        out[path] = v[pos:pos + n].reshape(shape)
        pos += n
    return ParamTree(out)


def finite_difference_gradient(
    f: Callable[[ParamTree], float], at: ParamTree, h: float = 1e-5
) -> ParamTree:
    """Central-difference gradient of scalar ``f`` at ``at``, one coordinate at a time."""
    if not h > 0:
        raise ValueError("step h must be positive")
    grads = {}
    for path in at:
        base = np.array(at[path])
        g = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            vals = []
            for sign in (1.0, -1.0):
                bumped = base.copy()
                bumped[idx] += sign * h
                fx = float(f(at.replace({path: bumped})))
                if not np.isfinite(fx):
                    raise NumericError(f"non-finite objective at {path}{list(idx)}")
                vals.append(fx)
            g[idx] = (vals[0] - vals[1]) / (2 * h)
        grads[path] = g
    return ParamTree(grads)


def relative_error(a, b, floor: float = 1e-8) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def max_relative_error(a: ParamTree, b: ParamTree) -> float:
    check_same_layout(a, b)
    errs = [relative_error(a[k], b[k]).max() for k in a if a[k].size]
    return float(max(errs)) if errs else 0.0
