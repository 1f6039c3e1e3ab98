"""Dense tensors backed by arena allocations, plus the elementwise ops.

Tensors are row-major by default; packed layouts exist only inside GEMM
buffers. There is no autograd tape: layers expose explicit forward/backward
and gradients live in the optional ``grad`` slot. Broadcasting is restricted
to "vector over rows" and scalars — everything the model graph needs, and
narrow enough to keep the kernels auditable.
"""

from __future__ import annotations

import threading
import weakref
from enum import Enum

import numpy as np

from .memory import Allocation, MemorySystem, MemTier, current_system


class Dtype(Enum):
    F32 = "f32"
    F64 = "f64"

    @property
    def np(self) -> np.dtype:
        return np.dtype(np.float32 if self is Dtype.F32 else np.float64)

    @property
    def itemsize(self) -> int:
        return self.np.itemsize

    @classmethod
    def from_np(cls, dt) -> "Dtype":
        dt = np.dtype(dt)
        if dt == np.float32:
            return cls.F32
        if dt == np.float64:
            return cls.F64
        raise ValueError(f"unsupported dtype {dt}")


_debug_checks = False


def set_debug_checks(on: bool) -> bool:
    """Toggle kernel-entry residency assertions; returns the previous value."""
    global _debug_checks
    prev = _debug_checks
    _debug_checks = on
    return prev


def debug_checks_enabled() -> bool:
    return _debug_checks


class Tensor:
    """Dense n-d array with a tier placement and an optional gradient slot.

    A root tensor owns its allocation; views (transpose, reshape) share the
    root's storage and keep it alive. Writers complete before readers start;
    that ordering is the scheduler's job, not per-tensor locks.
    """

    _next_id = 0
    _id_lock = threading.Lock()

    __slots__ = ("id", "data", "alloc", "base", "dtype", "requires_grad", "grad",
                 "name", "inflight", "on_grad", "__weakref__")

    def __init__(self, data: np.ndarray, alloc: Allocation | None,
                 base: "Tensor | None" = None, requires_grad: bool = False,
                 name: str = ""):
        with Tensor._id_lock:
            Tensor._next_id += 1
            self.id = Tensor._next_id
        self.data = data
        self.alloc = alloc
        self.base = base
        self.dtype = Dtype.from_np(data.dtype)
        self.requires_grad = requires_grad
        self.grad: Tensor | None = None
        self.name = name
        self.inflight = None  # TransferRequest while a move is pending
        self.on_grad = None  # optional callback fired when .grad is produced
        if alloc is not None and base is None:
            arena = alloc.arena
            weakref.finalize(self, arena.free_if_live, alloc)

    # -- metadata ------------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def strides(self) -> tuple[int, ...]:
        return tuple(s // self.data.itemsize for s in self.data.strides)

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def nbytes(self) -> int:
        return self.data.size * self.data.itemsize

    @property
    def tier(self) -> MemTier:
        root = self.base if self.base is not None else self
        if root.alloc is None:
            return MemTier.SLOW
        return root.alloc.tier

    def root(self) -> "Tensor":
        return self.base if self.base is not None else self

    def is_contiguous(self) -> bool:
        return self.data.flags["C_CONTIGUOUS"]

    def check_readable(self) -> None:
        if _debug_checks and self.root().inflight is not None:
            raise AssertionError(
                f"kernel read of in-flight tensor {self.name or self.id}"
            )

    def free(self) -> None:
        root = self.root()
        if root.alloc is not None:
            root.alloc.arena.free_if_live(root.alloc)

    # -- gradient slot --------------------------------------------------------

    def ensure_grad(self, system: MemorySystem | None = None) -> "Tensor":
        if self.grad is None:
            self.grad = zeros(self.shape, self.dtype, system=system,
                              name=f"{self.name}.grad" if self.name else "")
        return self.grad

    def set_grad(self, g: "Tensor") -> None:
        """Install the gradient and fire the accumulation hook, if any."""
        if g.shape != self.shape or g.dtype is not self.dtype:
            raise ValueError("gradient must match its owner's shape and dtype")
        self.grad = g
        if self.on_grad is not None:
            self.on_grad(self)

    def copy_from(self, arr: np.ndarray) -> None:
        np.copyto(self.data, arr.astype(self.data.dtype, copy=False))

    def numpy(self) -> np.ndarray:
        return np.array(self.data, copy=True)

    def __repr__(self) -> str:
        return (f"Tensor({self.name or self.id}, shape={self.shape}, "
                f"dtype={self.dtype.value}, tier={self.tier.value})")


# -- factories ----------------------------------------------------------------


def _alloc_tensor(shape, dtype: Dtype, tier, system, name, requires_grad) -> Tensor:
    ms = system or current_system()
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ValueError(f"tensor extents must be positive, got {shape}")
    count = 1
    for s in shape:
        count *= s
    alloc = ms.alloc(count * dtype.itemsize, tier=tier, label=name or "tensor")
    data = alloc.buf.view(dtype.np).reshape(shape)
    return Tensor(data, alloc, requires_grad=requires_grad, name=name)


def empty(shape, dtype: Dtype = Dtype.F32, tier: MemTier | None = None,
          system: MemorySystem | None = None, name: str = "",
          requires_grad: bool = False) -> Tensor:
    return _alloc_tensor(shape, dtype, tier, system, name, requires_grad)


def zeros(shape, dtype: Dtype = Dtype.F32, tier: MemTier | None = None,
          system: MemorySystem | None = None, name: str = "",
          requires_grad: bool = False) -> Tensor:
    t = _alloc_tensor(shape, dtype, tier, system, name, requires_grad)
    t.data[...] = 0
    return t


def from_numpy(arr: np.ndarray, dtype: Dtype | None = None,
               tier: MemTier | None = None, system: MemorySystem | None = None,
               name: str = "", requires_grad: bool = False) -> Tensor:
    arr = np.asarray(arr)
    dt = dtype or Dtype.from_np(arr.dtype if arr.dtype in (np.float32, np.float64)
                                else np.float64)
    t = _alloc_tensor(arr.shape, dt, tier, system, name, requires_grad)
    np.copyto(t.data, arr.astype(dt.np, copy=False))
    return t


def randn(rng: np.random.Generator, shape, dtype: Dtype = Dtype.F32,
          scale: float = 1.0, tier: MemTier | None = None,
          system: MemorySystem | None = None, name: str = "",
          requires_grad: bool = False) -> Tensor:
    t = _alloc_tensor(shape, dtype, tier, system, name, requires_grad)
    np.copyto(t.data, (rng.standard_normal(t.shape) * scale).astype(dtype.np))
    return t


# -- elementwise / shape operations --------------------------------------------


def _check_same_dtype(a: Tensor, b: Tensor) -> None:
    if a.dtype is not b.dtype:
        raise ValueError(f"mixed dtypes {a.dtype.value} vs {b.dtype.value}")


def _broadcastable(a: Tensor, b: Tensor) -> bool:
    if b.shape == a.shape:
        return True
    if b.data.ndim == 0 or b.shape == (1,):
        return True
    # vector over rows: trailing axis matches
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return True
    return False


def _out_like(a: Tensor, system: MemorySystem | None = None, name: str = "") -> Tensor:
    # Result stays in a's tier.
    return empty(a.shape, a.dtype, tier=a.tier, system=system, name=name)


def add(a: Tensor, b: Tensor, alpha: float = 1.0,
        system: MemorySystem | None = None) -> Tensor:
    """out = a + alpha * b, with b equal-shaped, scalar, or a row vector."""
    _check_same_dtype(a, b)
    if not _broadcastable(a, b):
        raise ValueError(f"shapes {a.shape} and {b.shape} are not addable")
    a.check_readable()
    b.check_readable()
    out = _out_like(a, system)
    scaled = b.data * a.data.dtype.type(alpha)
    np.add(a.data, scaled, out=out.data)
    return out


def scale(a: Tensor, s: float, system: MemorySystem | None = None) -> Tensor:
    a.check_readable()
    out = _out_like(a, system)
    np.multiply(a.data, a.data.dtype.type(s), out=out.data)
    return out


def tanh_elem(a: Tensor, system: MemorySystem | None = None) -> Tensor:
    a.check_readable()
    out = _out_like(a, system)
    np.tanh(a.data, out=out.data)
    return out


def transpose_2d(a: Tensor) -> Tensor:
    """Strided view; writing through it is observable through the parent."""
    if a.data.ndim != 2:
        raise ValueError(f"transpose_2d requires rank 2, got rank {a.data.ndim}")
    return Tensor(a.data.T, a.root().alloc, base=a.root(), name=a.name)


def reshape(a: Tensor, new_shape) -> Tensor:
    new_shape = tuple(int(s) for s in new_shape)
    count = 1
    for s in new_shape:
        count *= s
    if count != a.size:
        raise ValueError(f"reshape {a.shape} -> {new_shape} changes element count")
    if not a.is_contiguous():
        raise ValueError("reshape requires a contiguous tensor")
    return Tensor(a.data.reshape(new_shape), a.root().alloc, base=a.root(), name=a.name)
