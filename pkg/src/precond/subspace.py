"""Block selection and subspace basis updates.

A subspace refresh replaces the full-basis QR of the companion matrix with
a decomposition of a small ``b x b`` block ``P[I, I]``. The resulting
local orthogonal factor ``O`` is embedded (conceptually) as the
block-diagonal ``O (+) I`` and pushed through the same update rules as the
full-basis refresh: only the selected columns of ``Q`` change, and only
the selected rows/columns of ``P`` rotate, leaving the ``(Y, Y)`` block
untouched. With eigendecomposition in place of QR this is exactly a block
Jacobi sweep, which is why repeated passes drive ``P`` toward diagonal.

Only the rotated parametrization keeps ``P`` on hand; the ambient
parametrization must first materialize it (``P = Q^T S Q``, 4 mm per
refresh event) and drops it afterwards, keeping just the updated basis.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .decomp import DecompositionError, SingularMatrixError, eig_symmetric, top_k
from .matcore import ShapeError, StorageMatrix, matmul
from .shampoo import (
    BasisSolver,
    LayerState,
    Parametrization,
    Selection,
    _basis_qr,
)


@dataclass(frozen=True)
class BlockIndexSet:
    """A sorted set of at least two distinct column indices of one factor."""

    indices: tuple[int, ...]
    parent_dim: int

    def __post_init__(self):
        idx = self.indices
        if not 2 <= len(idx) <= self.parent_dim:
            raise ValueError(f"block size {len(idx)} invalid for dim {self.parent_dim}")
        if list(idx) != sorted(set(idx)):
            raise ValueError("indices must be sorted and distinct")
        if idx[0] < 0 or idx[-1] >= self.parent_dim:
            raise ValueError(f"indices out of range for dim {self.parent_dim}")

    def __len__(self):
        return len(self.indices)


def block_size(d: int, fraction) -> int:
    """Block size b = max(2, round(B*d)) clamped to d; round half-to-even."""
    if d < 2:
        raise ValueError(f"factor dim {d} too small for a block update")
    b = int(round(Fraction(fraction) * d))
    return max(2, min(b, d))


def select_random(p: np.ndarray, b: int, rng: np.random.Generator) -> BlockIndexSet:
    """Uniform sample of b distinct indices; the matrix itself is ignored."""
    d = p.shape[0]
    idx = rng.choice(d, size=b, replace=False)
    return BlockIndexSet(tuple(sorted(int(i) for i in idx)), d)


def select_greedy(p: np.ndarray, b: int) -> BlockIndexSet:
    """Two-phase greedy block selection on the symmetrized matrix.

    Phase 1 picks the classical Jacobi pivot pair: the off-diagonal entry
    with the largest square, first maximizer in row-major order. Phase 2
    grows the pair to size b with the indices of largest total coupling
    ``P[x,k*]^2 + P[x,j*]^2``, ties favoring lower index.
    """
    if b < 2:
        raise ValueError(f"greedy selection needs b >= 2, got {b}")
    d = p.shape[0]
    if p.ndim != 2 or p.shape[1] != d:
        raise ShapeError(f"selection needs a square matrix, got {p.shape}")
    sym = (p + p.T) * 0.5
    sq = sym * sym
    masked = sq.copy()
    np.fill_diagonal(masked, -1.0)
    flat = int(np.argmax(masked))
    k_star, j_star = divmod(flat, d)
    chosen = [k_star, j_star]
    if b > 2:
        scores = sq[:, k_star] + sq[:, j_star]
        candidates = np.array([x for x in range(d) if x not in (k_star, j_star)])
        picked = top_k(scores[candidates], b - 2)
        chosen.extend(int(candidates[i]) for i in picked)
    return BlockIndexSet(tuple(sorted(chosen)), d)


def off_diagonal_frobenius(p: np.ndarray) -> float:
    """Frobenius norm of the off-diagonal part; the selection objective."""
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise ShapeError(f"expected a square matrix, got {p.shape}")
    off = np.array(p, dtype=np.float64, copy=True)
    np.fill_diagonal(off, 0.0)
    return float(np.linalg.norm(off))


def subspace_refresh(state: LayerState) -> tuple[int, ...]:
    """Run K subspace passes on each factor; returns skipped factor ids.

    Each pass selects a block (fresh selection per pass, on the current
    companion), decomposes it, and applies the strip updates::

        Q[:, I] <- Q[:, I] O          # 1 smm
        P[:, I] <- P[:, I] O          # 1 smm
        P[I, :] <- O^T P[I, :]        # 1 smm

    then re-symmetrizes P[I, I]. An exactly diagonal block is a fixed
    point and is skipped outright, so both solvers are no-ops there.
    Factors with dim < 2 are reported as skipped.
    """
    cfg = state.config
    skipped = []
    for pos, factor in enumerate(state.factors, start=1):
        d = factor.dim
        if d < 2:
            skipped.append(pos)
            continue
        b = block_size(d, cfg.subspace_fraction)
        q = factor.basis.load()
        if cfg.parametrization is Parametrization.NEW:
            p = factor.companion.load()
        else:
            s = factor.companion.load()
            p = matmul(q.T, matmul(s, q, state.ledger), state.ledger)
        for pass_k in range(cfg.inner_steps_k):
            if cfg.selection is Selection.RANDOM:
                sel = select_random(p, b, state.rng)
            else:
                sel = select_greedy(p, b)
            idx = np.asarray(sel.indices)
            block = p[np.ix_(idx, idx)]
            if _is_diagonal(block):
                continue
            if cfg.basis_solver is BasisSolver.QR:
                try:
                    o = _basis_qr(block, cfg).q
                except SingularMatrixError as err:
                    raise DecompositionError(
                        f"singular block on factor {pos}, pass {pass_k}: {err}"
                    ) from err
                state.ledger.qr_count += 1
            else:
                res = eig_symmetric(block)
                # Descending eigenvalues so the rotated block's diagonal
                # comes out sorted.
                o = np.ascontiguousarray(res.vectors[:, ::-1])
                state.ledger.eig_count += 1
            q[:, idx] = matmul(q[:, idx], o, state.ledger, parent_dim=d)
            p[:, idx] = matmul(p[:, idx], o, state.ledger, parent_dim=d)
            p[idx, :] = matmul(o.T, p[idx, :], state.ledger, parent_dim=d)
            blk = p[np.ix_(idx, idx)]
            p[np.ix_(idx, idx)] = (blk + blk.T) * 0.5
            if state.moments is not None:
                from .soap import rotate_moments_strip

                rotate_moments_strip(
                    state.moments,
                    o,
                    idx,
                    side="left" if pos == 1 else "right",
                    ledger=state.ledger,
                    parent_dim=d,
                    approx_second=cfg.rotate_second_moment,
                )
        factor.basis = StorageMatrix.store(q, cfg.storage)
        if cfg.parametrization is Parametrization.NEW:
            factor.companion = StorageMatrix.store(p, cfg.storage)
    state.cached_rotated_grad = None
    return tuple(skipped)


def _is_diagonal(block: np.ndarray) -> bool:
    off = block.copy()
    np.fill_diagonal(off, 0.0)
    return not off.any()
