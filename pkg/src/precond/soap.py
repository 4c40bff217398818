"""SOAP-type preconditioning: Adam moments kept in the rotating eigenbasis.

SOAP-type methods share the covariance and basis-update machinery of the
pure Shampoo path but replace the preconditioned weight update: first and
second Adam moments are maintained on the rotated gradient
``Gt = Q_1^T G Q_2`` and the update direction is ``m / (sqrt(v) + eps)``
mapped back through the bases. Because the moments live in basis
coordinates, the first moment must be rotated exactly whenever the basis
changes; the second moment has no exact rotation (it is elementwise), so
by default it is left stale across rotations, with an approximate
rotation available behind a flag.

Method variants differ only in the covariance statistic:

* ``KL_SOAP`` uses the same whitened statistic as KL-Shampoo (and
  therefore still tracks eigenvalues, which feed the whitening);
* ``SOAP`` uses the unwhitened ``Gt Gt^T / d`` and never reads the
  eigenvalue track.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .matcore import Precision, StorageMatrix, matmul
from .shampoo import (
    LayerState,
    Method,
    Parametrization,
    _ema,
    step_covariance_new,
    step_covariance_old,
)


@dataclass
class RotatedMoments:
    """Adam moments in basis coordinates, plus an update counter."""

    m: StorageMatrix
    v: StorageMatrix
    t: int = 0

    @classmethod
    def zeros(cls, d1: int, d2: int, precision: Precision) -> "RotatedMoments":
        z = np.zeros((d1, d2), dtype=precision.compute_dtype)
        return cls(StorageMatrix.store(z, precision), StorageMatrix.store(z, precision))


def covariance_variant(method: Method, state: LayerState, g: np.ndarray):
    """Dispatch the step-2 covariance statistic for SOAP-type methods."""
    if method is Method.KL_SOAP:
        if state.config.parametrization is Parametrization.NEW:
            step_covariance_new(state, g)
        else:
            step_covariance_old(state, g)
        return
    if method is not Method.SOAP:
        raise ValueError(f"unknown SOAP-type method: {method}")
    _covariance_unwhitened(state, g)


def _covariance_unwhitened(state: LayerState, g: np.ndarray):
    """SOAP covariance: Delta~_1 = Gt Gt^T / d2, Delta~_2 = Gt^T Gt / d1.

    No eigenvalue whitening; the 1/d normalization keeps the companion's
    scale comparable with the whitened variants (it cancels in Adam's
    ratio anyway).
    """
    cfg = state.config
    f1, f2 = state.factors
    led = state.ledger
    if cfg.parametrization is Parametrization.NEW:
        q1 = f1.basis.load()
        q2 = f2.basis.load()
        gt = matmul(matmul(q1.T, g, led), q2, led)
        d1t = matmul(gt, gt.T, led) / f2.dim
        d2t = matmul(gt.T, gt, led) / f1.dim
        state.cached_rotated_grad = gt
    else:
        q1 = f1.basis.load()
        q2 = f2.basis.load()
        gp1 = matmul(g, q2, led)
        gp2 = matmul(g.T, q1, led)
        d1t = matmul(gp1, gp1.T, led) / f2.dim
        d2t = matmul(gp2, gp2.T, led) / f1.dim
        state.cached_rotated_grad = None
    for f, delta in ((f1, d1t), (f2, d2t)):
        f.companion = StorageMatrix.store(
            _ema(f.companion.load(), delta, cfg.beta2), cfg.storage
        )
    state.whitened_grads = None
    state.rotated_whitened = None


def soap_precondition(state: LayerState, g: np.ndarray, gamma: float | None = None):
    """Adam step in the current basis, replacing the pure-Shampoo update."""
    cfg = state.config
    gamma = cfg.gamma if gamma is None else gamma
    mom = state.moments
    if mom is None:
        raise RuntimeError("SOAP preconditioning needs RotatedMoments on the state")
    f1, f2 = state.factors
    q1 = f1.basis.load()
    q2 = f2.basis.load()
    gt = state.cached_rotated_grad
    if gt is None:
        gt = matmul(matmul(q1.T, g, state.ledger), q2, state.ledger)
    m = _ema(mom.m.load(), gt, cfg.beta1)
    v = _ema(mom.v.load(), gt * gt, cfg.beta2)
    u = m / (np.sqrt(v) + cfg.damping)
    update = matmul(matmul(q1, u, state.ledger), q2.T, state.ledger)
    theta = state.theta.load()
    theta = theta - gamma * update - (gamma * cfg.weight_decay) * theta
    state.theta = StorageMatrix.store(theta, cfg.storage)
    mom.m = StorageMatrix.store(m, cfg.storage)
    mom.v = StorageMatrix.store(v, cfg.storage)
    mom.t += 1


def rotate_moments(moments: RotatedMoments, o1, o2, ledger=None,
                   approx_second: bool = False):
    """Carry the moments across a full-basis change.

    The first moment rotates exactly: ``m <- O_1^T m O_2`` (either side may
    be None for a one-sided change). The second moment stays stale unless
    ``approx_second`` is set, in which case ``v <- (O_1^T sqrt(v) O_2)^2``
    is applied as an elementwise-positive surrogate.
    """
    prec = moments.m.precision
    m = moments.m.load()
    if o1 is not None:
        m = matmul(o1.T, m, ledger)
    if o2 is not None:
        m = matmul(m, o2, ledger)
    moments.m = StorageMatrix.store(m, prec)
    if approx_second:
        sv = np.sqrt(moments.v.load())
        if o1 is not None:
            sv = matmul(o1.T, sv, ledger)
        if o2 is not None:
            sv = matmul(sv, o2, ledger)
        moments.v = StorageMatrix.store(sv * sv, prec)


def rotate_moments_strip(moments: RotatedMoments, o: np.ndarray, indices,
                         side: str, ledger=None, parent_dim: int | None = None,
                         approx_second: bool = False):
    """Subspace variant: rotate only the affected strip of the first moment."""
    idx = np.asarray(indices)
    prec = moments.m.precision
    m = moments.m.load()
    if side == "left":
        m[idx, :] = matmul(o.T, m[idx, :], ledger, parent_dim=parent_dim)
    elif side == "right":
        m[:, idx] = matmul(m[:, idx], o, ledger, parent_dim=parent_dim)
    else:
        raise ValueError(f"side must be 'left' or 'right', got {side!r}")
    moments.m = StorageMatrix.store(m, prec)
    if approx_second:
        sv = np.sqrt(moments.v.load())
        if side == "left":
            sv[idx, :] = matmul(o.T, sv[idx, :], ledger, parent_dim=parent_dim)
        else:
            sv[:, idx] = matmul(sv[:, idx], o, ledger, parent_dim=parent_dim)
        moments.v = StorageMatrix.store(sv * sv, prec)
