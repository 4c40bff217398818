"""Deterministic decomposition kernels: sign-fixed QR, Jacobi eig, top-k.

Any Householder QR becomes unique (for a nonsingular square input) once the
upper-triangular factor is forced to have a positive diagonal: with
``D = Diag(sign(diag(R)))`` the pair ``(Q D, D R)`` is the canonical
factorization, and it is invariant to whatever sign choices the underlying
library made. All basis refreshes in this package go through that fix so
that runs are reproducible and the two optimizer parametrizations can be
compared step by step.

The symmetric eigensolver is a cyclic Jacobi iteration. It is only needed
for the eigendecomposition flavor of subspace basis updates and as a test
oracle, both of which act on small blocks, so simplicity and a fully
deterministic sign/ordering convention win over LAPACK speed here.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .matcore import ShapeError

#: Hard floor on |R[j,j]| below which the input is treated as singular.
TAU_SING = 1e-30

#: Jacobi stops when the off-diagonal Frobenius norm falls below this
#: fraction of the input norm, or after the sweep cap.
JACOBI_TOL = 1e-10
JACOBI_MAX_SWEEPS = 30


class DecompositionError(np.linalg.LinAlgError):
    """A decomposition kernel failed on its input."""


class SingularMatrixError(DecompositionError):
    """QR input is numerically singular; carries the offending column."""

    def __init__(self, column: int, value: float):
        self.column = column
        super().__init__(
            f"R diagonal entry {column} has magnitude {value:.3e} <= {TAU_SING:.0e}"
        )


class QrResult(NamedTuple):
    q: np.ndarray
    r: np.ndarray


class EigResult(NamedTuple):
    vectors: np.ndarray
    values: np.ndarray


def canonicalize_qr(q: np.ndarray, r: np.ndarray) -> QrResult:
    """Post-multiply raw QR factors so diag(R) >= 0.

    Sign flips are exact in floating point, so composing any raw
    factorization with an arbitrary +-1 diagonal before calling this
    yields bitwise identical canonical factors.
    """
    d = np.where(np.diagonal(r) < 0, -1.0, 1.0).astype(r.dtype)
    return QrResult(q * d[np.newaxis, :], r * d[:, np.newaxis])


def qr_sign_fixed(a: np.ndarray) -> QrResult:
    """Canonical (sign-fixed) QR of a square matrix.

    Raises :class:`SingularMatrixError` when any |R[j,j]| <= ``TAU_SING``;
    in the optimizer this only happens on exactly rank-deficient inputs,
    since rounding noise keeps near-singular diagonals above the floor.
    """
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"qr_sign_fixed needs a square matrix, got {a.shape}")
    q, r = np.linalg.qr(a)
    diag = np.abs(np.diagonal(r))
    small = np.flatnonzero(diag <= TAU_SING)
    if small.size:
        j = int(small[0])
        raise SingularMatrixError(j, float(diag[j]))
    return canonicalize_qr(q, r)


def eig_symmetric(a: np.ndarray) -> EigResult:
    """Full eigendecomposition of a (symmetrized) square matrix.

    Cyclic Jacobi sweeps until the off-diagonal Frobenius norm is below
    ``JACOBI_TOL`` times the input Frobenius norm or ``JACOBI_MAX_SWEEPS``
    sweeps have run. Each sweep visits every index pair exactly once, in a
    fixed round-robin schedule whose rounds consist of disjoint pairs;
    disjoint rotations commute, so a whole round is applied in one
    vectorized pass. Eigenvalues are returned ascending. Each eigenvector
    is sign-normalized so its largest-magnitude entry is positive, ties
    broken by the lowest row index.
    """
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"eig_symmetric needs a square matrix, got {a.shape}")
    n = a.shape[0]
    work = ((a + a.T) * 0.5).astype(np.float64)
    v = np.eye(n)
    if n > 1:
        target = JACOBI_TOL * np.linalg.norm(work)
        rounds = _round_robin_pairs(n)
        for _ in range(JACOBI_MAX_SWEEPS):
            if _off_frobenius(work) <= target:
                break
            for p_idx, q_idx in rounds:
                _jacobi_round(work, v, p_idx, q_idx)
    values = np.diagonal(work).copy()
    order = np.argsort(values, kind="stable")
    values = values[order]
    vectors = v[:, order]
    for j in range(n):
        col = vectors[:, j]
        lead = int(np.argmax(np.abs(col)))
        if col[lead] < 0:
            vectors[:, j] = -col
    dtype = np.result_type(a.dtype, np.float32)
    return EigResult(vectors.astype(dtype), values.astype(dtype))


def _off_frobenius(a: np.ndarray) -> float:
    off = a.copy()
    np.fill_diagonal(off, 0.0)
    return float(np.linalg.norm(off))


def _round_robin_pairs(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Tournament schedule: n-1 rounds of disjoint (p, q) pairs, p < q."""
    m = n if n % 2 == 0 else n + 1  # odd n gets a bye slot
    idx = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = [
            (min(idx[i], idx[m - 1 - i]), max(idx[i], idx[m - 1 - i]))
            for i in range(m // 2)
        ]
        pairs = [(p, q) for p, q in pairs if q < n]
        if pairs:
            p_arr = np.array([p for p, _ in pairs])
            q_arr = np.array([q for _, q in pairs])
            rounds.append((p_arr, q_arr))
        idx = [idx[0], idx[-1], *idx[1:-1]]
    return rounds


def _jacobi_round(a: np.ndarray, v: np.ndarray, p_idx: np.ndarray, q_idx: np.ndarray):
    """Apply two-sided Givens rotations zeroing a[p, q] for disjoint pairs."""
    apq = a[p_idx, q_idx]
    active = apq != 0.0
    if not active.any():
        return
    app = a[p_idx, p_idx]
    aqq = a[q_idx, q_idx]
    with np.errstate(divide="ignore", invalid="ignore"):
        theta = np.where(active, (aqq - app) / (2.0 * apq), 0.0)
        # Stable tangent of the smaller rotation angle (Golub & Van Loan).
        root = np.sqrt(1.0 + theta * theta)
        t = np.where(theta >= 0.0, 1.0 / (theta + root), 1.0 / (theta - root))
    t = np.where(active, t, 0.0)
    c = 1.0 / np.sqrt(1.0 + t * t)
    s = t * c
    col_p = a[:, p_idx].copy()
    col_q = a[:, q_idx].copy()
    a[:, p_idx] = c * col_p - s * col_q
    a[:, q_idx] = s * col_p + c * col_q
    row_p = a[p_idx, :].copy()
    row_q = a[q_idx, :].copy()
    a[p_idx, :] = c[:, None] * row_p - s[:, None] * row_q
    a[q_idx, :] = s[:, None] * row_p + c[:, None] * row_q
    a[p_idx, q_idx] = 0.0
    a[q_idx, p_idx] = 0.0
    col_p = v[:, p_idx].copy()
    col_q = v[:, q_idx].copy()
    v[:, p_idx] = c * col_p - s * col_q
    v[:, q_idx] = s * col_p + c * col_q


def top_k(values, k: int) -> np.ndarray:
    """Indices of the k largest entries, ascending; ties favor lower index."""
    v = np.asarray(values)
    if v.ndim != 1:
        raise ShapeError(f"top_k needs a vector, got shape {v.shape}")
    if k > v.shape[0]:
        raise ValueError(f"k={k} exceeds vector length {v.shape[0]}")
    if k < 0:
        raise ValueError("k must be non-negative")
    order = np.argsort(-v, kind="stable")[:k]
    return np.sort(order)
