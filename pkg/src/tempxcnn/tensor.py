"""Dense tensor type, checked elementwise math, reductions and seeded RNG.

Storage is a contiguous row-major numpy array.  Every public operation
refuses to hand back NaN or Inf.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class NonFiniteError(FloatingPointError):
    """Raised when an operation would produce NaN or Inf."""


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if not shape:
        return shape
    if any(s < 1 for s in shape):
        raise ValueError(f"all extents must be >= 1, got {shape}")
    return shape


def _check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{what} produced non-finite values")
    return arr


class Tensor:
    """Shaped float storage.

    ``data`` is always a C-contiguous ndarray of float32 (default) or
    float64.  A rank-0 tensor is a scalar.
    """

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        arr = np.array(data, dtype=dtype or DEFAULT_DTYPE, order="C")
        if arr.dtype not in (np.float32, np.float64):
            raise TypeError(f"unsupported dtype {arr.dtype}")
        self.data = _check_finite(arr, "Tensor construction")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data, dtype=dtype)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name})"

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Tensor)
            and self.shape == other.shape
            and bool(np.array_equal(self.data, other.data))
        )

    __hash__ = None

    def __add__(self, other: "Tensor") -> "Tensor":
        return elementwise("add", self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return elementwise("sub", self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return elementwise("mul", self, other)


def tensor_full(shape: Sequence[int], value: float, dtype=None) -> Tensor:
    shape = _check_shape(shape)
    if not shape:
        raise ValueError("shape must have at least one extent")
    dtype = dtype or DEFAULT_DTYPE
    return Tensor(np.full(shape, value, dtype=dtype), dtype=dtype)


_ELEMENTWISE = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def elementwise(op: str, a: Tensor, b: Tensor) -> Tensor:
    if op not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise op {op!r}")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    dtype = np.result_type(a.dtype, b.dtype)
    with np.errstate(over="ignore", invalid="ignore"):
        out = _ELEMENTWISE[op](a.data, b.data, dtype=dtype)
    return Tensor(_check_finite(out, op), dtype=dtype)


def reduce(op: str, t: Tensor, axis: int | None = None) -> Tensor:
    """sum / mean / max / min over one axis or the whole tensor.

    Sums are accumulated left to right in float64 (a running cumulative
    sum), so results match a plain scalar loop bit for bit.  The result is
    cast back to the tensor's dtype.
    """
    if op not in ("sum", "mean", "max", "min"):
        raise ValueError(f"unknown reduction {op!r}")
    data = t.data
    if axis is not None:
        rank = data.ndim
        if not -rank <= axis < rank:
            raise ValueError(f"axis {axis} out of range for rank {rank}")
        axis %= rank
    else:
        data = data.reshape(-1)
        axis = 0

    if op == "max":
        out = data.max(axis=axis)
    elif op == "min":
        out = data.min(axis=axis)
    else:
        acc = np.cumsum(data, axis=axis, dtype=np.float64)
        out = np.take(acc, -1, axis=axis)
        if op == "mean":
            out = out / data.shape[axis]
    return Tensor(np.asarray(out, dtype=t.dtype), dtype=t.dtype)


class SeededRng:
    """Reproducible generator; one instance per worker."""

    def __init__(self, seed: int):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = seed
        self.gen = np.random.Generator(np.random.PCG64(seed))

    def spawn(self, *keys: int) -> "SeededRng":
        """Independent child stream keyed by integers (order independent of use)."""
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=tuple(int(k) for k in keys))
        child = SeededRng.__new__(SeededRng)
        child.seed = self.seed
        child.gen = np.random.Generator(np.random.PCG64(seq))
        return child

    def normal(self, shape, mean=0.0, stddev=1.0, dtype=None) -> np.ndarray:
        return self.gen.normal(mean, stddev, size=shape).astype(dtype or DEFAULT_DTYPE)

    def uniform(self, shape, dtype=None) -> np.ndarray:
        return self.gen.random(size=shape).astype(dtype or DEFAULT_DTYPE)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def integers(self, low: int, high: int, size=None):
        return self.gen.integers(low, high, size=size)


def rng_normal(rng: SeededRng, shape: Sequence[int], mean: float = 0.0,
               stddev: float = 1.0, dtype=None) -> Tensor:
    if stddev < 0:
        raise ValueError(f"stddev must be >= 0, got {stddev}")
    shape = _check_shape(shape)
    return Tensor(rng.normal(shape, mean, stddev, dtype=dtype), dtype=dtype)
