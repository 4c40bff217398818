"""Dense matrix storage with explicit precision, plus instrumented products.

Two kinds of arrays are kept strictly apart:

* persistent optimizer state (weights, orthogonal bases, companion
  matrices, eigenvalue tracks) lives in a :class:`StorageMatrix` whose
  buffer is FP64, FP32, or BF16 and is converted only at load/store time;
* per-step intermediates are plain numpy arrays in the *working* dtype
  (float64 when storage is FP64, float32 otherwise). BF16 never appears in
  an intermediate.

:func:`matmul` is the single instrumented chokepoint for cost accounting:
every true matrix-matrix product of a layer update goes through it and
charges a :class:`CostLedger`. Diagonal scalings, transposes, and
elementwise maps are free. A product whose dimensions all belong to the
owning layer's ``(d1, d2)`` counts as one ``mm``; anything touching a
strict subspace size counts as one ``smm`` and additionally accumulates
its flop fraction of a full product (``B^2`` for a ``(d, b) x (b, b)``
strip product with ``B = b/d``).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operands have incompatible or unexpected dimensions."""


class Precision(enum.Enum):
    """Storage format of persistent state.

    BF16 is storage-only: buffers hold raw bit patterns (uint16) and all
    arithmetic happens after promotion to float32.
    """

    FP64 = "fp64"
    FP32 = "fp32"
    BF16 = "bf16"

    @property
    def storage_dtype(self):
        return _STORAGE_DTYPE[self]

    @property
    def compute_dtype(self):
        return np.float64 if self is Precision.FP64 else np.float32

    @property
    def ortho_tol(self) -> float:
        """Max-norm tolerance on Q^T Q - I for bases kept in this format."""
        return _ORTHO_TOL[self]


_STORAGE_DTYPE = {
    Precision.FP64: np.dtype(np.float64),
    Precision.FP32: np.dtype(np.float32),
    Precision.BF16: np.dtype(np.uint16),
}

_ORTHO_TOL = {
    Precision.FP64: 1e-12,
    Precision.FP32: 1e-5,
    Precision.BF16: 1e-4,
}


# ---------------------------------------------------------------------------
# BF16 conversion.
# ---------------------------------------------------------------------------

def bf16_round(x) -> np.ndarray:
    """Round float32 value(s) to BF16 bit patterns (round-to-nearest-even).

    Interprets the binary32 pattern ``u`` as an unsigned integer, adds
    ``0x7FFF + ((u >> 16) & 1)``, and keeps the top 16 bits. NaNs skip the
    rounding add (which could silently turn a signalling NaN into an
    infinity) and instead keep their top payload bits with the quiet bit
    forced on. Total on every input, including infinities and signed zeros.
    """
    arr = np.ascontiguousarray(x, dtype=np.float32)
    u = arr.view(np.uint32)
    rounded = (u + (np.uint32(0x7FFF) + ((u >> np.uint32(16)) & np.uint32(1)))) >> np.uint32(16)
    nan_mask = (u & np.uint32(0x7F800000)) == np.uint32(0x7F800000)
    nan_mask &= (u & np.uint32(0x007FFFFF)) != np.uint32(0)
    quieted = (u >> np.uint32(16)) | np.uint32(0x0040)
    out = np.where(nan_mask, quieted, rounded).astype(np.uint16)
    if np.isscalar(x) or np.ndim(x) == 0:
        return out[()] if out.ndim == 0 else out
    return out


def bf16_to_float32(bits) -> np.ndarray:
    """Promote BF16 bit patterns back to float32 (exact)."""
    b = np.ascontiguousarray(bits, dtype=np.uint16)
    return (b.astype(np.uint32) << np.uint32(16)).view(np.float32)


# ---------------------------------------------------------------------------
# Precision-tagged storage.
# ---------------------------------------------------------------------------

@dataclass
class StorageMatrix:
    """Row-major buffer in a declared storage precision.

    Holds matrices, vectors, and scalars alike (``data.ndim`` in 0..2);
    the name reflects the dominant use. ``load`` always returns a fresh
    array in the compute dtype, so callers may mutate it freely before
    writing back with ``store``.
    """

    data: np.ndarray
    precision: Precision

    def __post_init__(self):
        if self.data.dtype != self.precision.storage_dtype:
            raise ShapeError(
                f"buffer dtype {self.data.dtype} does not match {self.precision}"
            )

    @classmethod
    def store(cls, values, precision: Precision) -> "StorageMatrix":
        """Round working values into a buffer of the given precision."""
        arr = np.ascontiguousarray(values)
        if precision is Precision.BF16:
            buf = bf16_round(arr.astype(np.float32, copy=False))
            buf = np.ascontiguousarray(buf)
        else:
            buf = arr.astype(precision.storage_dtype)
        return cls(buf, precision)

    def load(self) -> np.ndarray:
        """Promote to the compute dtype (f32 for BF16/FP32, f64 for FP64)."""
        if self.precision is Precision.BF16:
            return bf16_to_float32(self.data)
        return self.data.copy()

    @property
    def shape(self):
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]


# ---------------------------------------------------------------------------
# Cost accounting.
# ---------------------------------------------------------------------------

@dataclass
class CostLedger:
    """Counts matrix products and decompositions for one layer.

    ``mm_count`` counts products whose dimensions are all layer-sized;
    ``smm_count`` counts subspace products, with ``smm_fraction_sum``
    accumulating each one's flop fraction of the corresponding full-size
    product. Counters only ever increase.
    """

    d1: int
    d2: int
    mm_count: int = 0
    smm_count: int = 0
    qr_count: int = 0
    eig_count: int = 0
    smm_fraction_sum: float = 0.0

    def charge_matmul(self, m: int, k: int, n: int, parent_dim: int | None = None):
        full = (self.d1, self.d2)
        if m in full and k in full and n in full:
            self.mm_count += 1
            return
        if parent_dim is None:
            raise ValueError("subspace-sized product needs parent_dim for accounting")
        frac = 1.0
        for dim in (m, k, n):
            if dim not in full:
                frac *= dim / parent_dim
        self.smm_count += 1
        self.smm_fraction_sum += frac

    def snapshot(self) -> tuple:
        return (
            self.mm_count,
            self.smm_count,
            self.qr_count,
            self.eig_count,
            self.smm_fraction_sum,
        )


# ---------------------------------------------------------------------------
# Instrumented and free array operations.
# ---------------------------------------------------------------------------

def matmul(a: np.ndarray, b: np.ndarray, ledger: CostLedger | None = None,
           parent_dim: int | None = None) -> np.ndarray:
    """Matrix product with FP32-or-better accumulation, charged to a ledger."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    if ledger is not None:
        ledger.charge_matmul(a.shape[0], a.shape[1], b.shape[1], parent_dim)
    return np.matmul(a, b)


def transpose(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.T)


def elemwise(a: np.ndarray, b: np.ndarray, op) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"elemwise shapes differ: {a.shape} vs {b.shape}")
    return op(a, b)


def scale_cols(a: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Right-multiply by Diag(v). Diagonal scaling is free in the ledger."""
    v = np.asarray(v)
    if v.ndim != 1 or a.shape[1] != v.shape[0]:
        raise ShapeError(f"scale_cols: {a.shape} incompatible with {v.shape}")
    return a * v[np.newaxis, :]


def row_sum_of_squares(a: np.ndarray) -> np.ndarray:
    """Row sums of the elementwise square: the diagonal of a @ a.T."""
    return np.sum(a * a, axis=1)
