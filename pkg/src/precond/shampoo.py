"""Kronecker-factored preconditioned optimizer state and step pipeline.

For one weight matrix ``Theta`` (d1 x d2) the optimizer keeps, per factor
``i`` in {1, 2}: an eigenvalue track ``lam_i``, an orthogonal basis
``Q_i``, and a companion matrix. The companion is either the ambient
covariance factor ``S_i`` (the original parametrization) or its rotated
form ``P_i = Q_i^T S_i Q_i`` (the reparametrized one). Given matched
initial state and a canonical sign-fixed QR, the two parametrizations
produce equivalent iterates; they differ in cost and in how gracefully the
state survives BF16 storage (``P_i`` stays near-diagonal, so rounding it
is far more benign than rounding ``S_i``).

One gradient step runs, in order:

  1. receive the gradient ``G``;
  2. update the companions from whitened covariance statistics;
  3. update the eigenvalue tracks by EMA;
  4. every ``T`` steps, refresh the basis (full QR here, subspace variants
     in :mod:`precond.subspace`), *before* preconditioning;
  5. precondition and apply the weight update.

EMA convention throughout: ``x <- (1 - beta) * x + beta * new`` -- beta
weights the NEW statistic, which is the reverse of the Adam-literature
convention.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .decomp import QrResult, qr_sign_fixed
from .matcore import (
    CostLedger,
    Precision,
    ShapeError,
    StorageMatrix,
    matmul,
    row_sum_of_squares,
    scale_cols,
)


class StateError(RuntimeError):
    """A pipeline op ran out of order (e.g. eigenvalue tracking before
    the covariance update of the same step)."""


class Method(enum.Enum):
    KL_SHAMPOO = "kl-shampoo"
    KL_SOAP = "kl-soap"
    SOAP = "soap"

    @property
    def is_soap_type(self) -> bool:
        return self in (Method.KL_SOAP, Method.SOAP)


class Parametrization(enum.Enum):
    OLD = "old"  # companion holds S_i
    NEW = "new"  # companion holds P_i = Q_i^T S_i Q_i


class Selection(enum.Enum):
    FULL = "full"
    RANDOM = "random"
    GREEDY = "greedy"


class BasisSolver(enum.Enum):
    QR = "qr"
    EIG = "eig"


@dataclass
class OptimConfig:
    """Hyperparameters and mode switches for one optimizer instance.

    ``subspace_fraction`` is kept as an exact :class:`fractions.Fraction`
    so block sizes round deterministically (half-to-even).
    """

    gamma: float = 1e-2
    beta2: float = 0.05
    beta1: float = 0.1
    damping: float = 1e-8
    interval_t: int = 10
    subspace_fraction: Fraction = Fraction(1)
    inner_steps_k: int = 1
    method: Method = Method.KL_SHAMPOO
    parametrization: Parametrization = Parametrization.NEW
    selection: Selection = Selection.FULL
    basis_solver: BasisSolver = BasisSolver.QR
    storage: Precision = Precision.FP32
    weight_decay: float = 0.0
    seed: int = 0
    refresh_lambda: bool = False
    rotate_second_moment: bool = False
    # Canonical QR is always wanted in practice; the switch exists so the
    # equivalence checker can inject a known failure mode.
    sign_fix: bool = True

    def __post_init__(self):
        if not isinstance(self.subspace_fraction, Fraction):
            self.subspace_fraction = Fraction(self.subspace_fraction)
        self.validate()

    def validate(self):
        if self.gamma < 0:
            raise ValueError(f"learning rate must be >= 0, got {self.gamma}")
        if not 0 < self.beta2 <= 1:
            raise ValueError(f"beta2 must be in (0, 1], got {self.beta2}")
        if not 0 <= self.beta1 <= 1:
            raise ValueError(f"beta1 must be in [0, 1], got {self.beta1}")
        if self.damping < 0:
            raise ValueError(f"damping must be >= 0, got {self.damping}")
        if self.interval_t < 1:
            raise ValueError(f"interval T must be >= 1, got {self.interval_t}")
        if not 0 < self.subspace_fraction <= 1:
            raise ValueError(f"B must be in (0, 1], got {self.subspace_fraction}")
        if self.inner_steps_k < 1:
            raise ValueError(f"K must be >= 1, got {self.inner_steps_k}")
        if self.weight_decay < 0:
            raise ValueError(f"weight decay must be >= 0, got {self.weight_decay}")
        if (self.selection is Selection.FULL) != (self.subspace_fraction == 1):
            raise ValueError("selection=full if and only if B=1")
        if self.basis_solver is BasisSolver.EIG and self.parametrization is not Parametrization.NEW:
            raise ValueError("eig basis updates need the rotated companion (param=new)")
        if self.refresh_lambda and self.parametrization is not Parametrization.NEW:
            raise ValueError("refresh-lambda reads diag(P) and needs param=new")

    @property
    def work_dtype(self):
        return self.storage.compute_dtype


@dataclass
class FactorState:
    """Per-Kronecker-factor state: eigenvalue track, basis, companion."""

    dim: int
    eigvals: StorageMatrix
    basis: StorageMatrix
    companion: StorageMatrix
    parametrization: Parametrization


@dataclass
class LayerState:
    """Everything the optimizer keeps for one weight matrix."""

    theta: StorageMatrix
    factor1: FactorState
    factor2: FactorState
    config: OptimConfig
    ledger: CostLedger
    rng: np.random.Generator
    step_count: int = 0
    moments: "object | None" = None  # RotatedMoments for SOAP-type methods
    # Valid within the current step only:
    cached_rotated_grad: np.ndarray | None = None
    whitened_grads: tuple | None = None
    rotated_whitened: tuple | None = None

    @property
    def factors(self) -> tuple[FactorState, FactorState]:
        return (self.factor1, self.factor2)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.factor1.dim, self.factor2.dim)


@dataclass(frozen=True)
class StepReport:
    """Ledger deltas and diagnostics for one completed step."""

    mm: int
    smm: int
    qr: int
    eig: int
    smm_fraction: float
    mm_stats: int
    mm_refresh: int
    mm_precondition: int
    smm_refresh: int
    offdiag_p1: float | None
    offdiag_p2: float | None
    wall_ms: float
    refreshed: bool
    skipped_factors: tuple[int, ...] = ()


def init_layer(d1: int, d2: int, config: OptimConfig, theta0=None,
               seed: int | None = None) -> LayerState:
    """Fresh layer state: Q_i = I, companion = 0, lam_i = 0.

    Starting both parametrizations from the identity basis and a zero
    companion makes them identically initialized (P = Q^T S Q holds
    trivially); early preconditioned steps are governed by the damping.
    """
    if d1 < 1 or d2 < 1:
        raise ShapeError(f"layer dims must be >= 1, got {d1} x {d2}")
    storage = config.storage
    wt = config.work_dtype

    def factor(dim: int) -> FactorState:
        return FactorState(
            dim=dim,
            eigvals=StorageMatrix.store(np.zeros(dim, dtype=wt), storage),
            basis=StorageMatrix.store(np.eye(dim, dtype=wt), storage),
            companion=StorageMatrix.store(np.zeros((dim, dim), dtype=wt), storage),
            parametrization=config.parametrization,
        )

    if theta0 is None:
        theta0 = np.zeros((d1, d2), dtype=wt)
    theta0 = np.asarray(theta0)
    if theta0.shape != (d1, d2):
        raise ShapeError(f"theta0 shape {theta0.shape} != ({d1}, {d2})")

    state = LayerState(
        theta=StorageMatrix.store(theta0, storage),
        factor1=factor(d1),
        factor2=factor(d2),
        config=config,
        ledger=CostLedger(d1, d2),
        rng=np.random.default_rng(config.seed if seed is None else seed),
    )
    if config.method.is_soap_type:
        from .soap import RotatedMoments

        state.moments = RotatedMoments.zeros(d1, d2, storage)
    return state


def _inv_sqrt_scaled(lam: np.ndarray, damping: float, dim: int) -> np.ndarray:
    """(lam + eps)^(-1/2) / sqrt(dim), the whitening column scale."""
    return 1.0 / np.sqrt((lam + damping) * dim)


def _ema(old: np.ndarray, new: np.ndarray, beta: float) -> np.ndarray:
    return (1.0 - beta) * old + beta * new


def _basis_qr(a: np.ndarray, config: OptimConfig) -> QrResult:
    if config.sign_fix:
        return qr_sign_fixed(a)
    return QrResult(*np.linalg.qr(a))


def step_covariance_old(state: LayerState, g: np.ndarray):
    """Covariance EMA in ambient coordinates: S_i <- EMA(S_i, Delta_i).

    Whitened one-sided factors: G'_1 = G Q_2 Diag((lam_2+eps)^-1/2)/sqrt(d2)
    and G'_2 = G^T Q_1 Diag((lam_1+eps)^-1/2)/sqrt(d1); Delta_i = G'_i G'_i^T.
    Costs 4 mm (diagonal scalings are free).
    """
    cfg = state.config
    f1, f2 = state.factors
    _check_grad_shape(state, g)
    q1 = f1.basis.load()
    q2 = f2.basis.load()
    w1 = _inv_sqrt_scaled(f1.eigvals.load(), cfg.damping, f1.dim)
    w2 = _inv_sqrt_scaled(f2.eigvals.load(), cfg.damping, f2.dim)
    gp1 = scale_cols(matmul(g, q2, state.ledger), w2)
    gp2 = scale_cols(matmul(g.T, q1, state.ledger), w1)
    for f, gp in ((f1, gp1), (f2, gp2)):
        delta = matmul(gp, gp.T, state.ledger)
        f.companion = StorageMatrix.store(
            _ema(f.companion.load(), delta, cfg.beta2), cfg.storage
        )
    state.whitened_grads = (gp1, gp2)
    state.rotated_whitened = None
    state.cached_rotated_grad = None


def step_covariance_new(state: LayerState, g: np.ndarray):
    """Covariance EMA in basis coordinates: P_i <- EMA(P_i, Delta~_i).

    The shared rotated gradient Gt = Q_1^T G Q_2 (2 mm) yields both
    whitened factors by free diagonal scaling, and Delta~_i = Gt_i Gt_i^T
    (2 mm) equals Q_i^T Delta_i Q_i of the ambient path. Gt is cached for
    the preconditioning step; total 4 mm, two fewer than the ambient
    path's combined covariance + eigenvalue-tracking cost.
    """
    cfg = state.config
    f1, f2 = state.factors
    _check_grad_shape(state, g)
    q1 = f1.basis.load()
    q2 = f2.basis.load()
    w1 = _inv_sqrt_scaled(f1.eigvals.load(), cfg.damping, f1.dim)
    w2 = _inv_sqrt_scaled(f2.eigvals.load(), cfg.damping, f2.dim)
    gt = matmul(matmul(q1.T, g, state.ledger), q2, state.ledger)
    gt1 = scale_cols(gt, w2)
    gt2 = scale_cols(gt.T, w1)
    for f, gti in ((f1, gt1), (f2, gt2)):
        delta = matmul(gti, gti.T, state.ledger)
        f.companion = StorageMatrix.store(
            _ema(f.companion.load(), delta, cfg.beta2), cfg.storage
        )
    state.cached_rotated_grad = gt
    state.rotated_whitened = (gt1, gt2)
    state.whitened_grads = None


def track_eigenvalues(state: LayerState):
    """EMA the eigenvalue tracks from diag(Delta~_i) = row sums of squares.

    The rotated-companion path reuses the whitened rotated factors already
    produced by the covariance update (no products); the ambient path must
    first rotate them, Gt_i = Q_i^T G'_i, at 2 mm.
    """
    cfg = state.config
    if state.config.parametrization is Parametrization.NEW:
        if state.rotated_whitened is None:
            raise StateError("eigenvalue tracking needs this step's covariance update")
        gts = state.rotated_whitened
    else:
        if state.whitened_grads is None:
            raise StateError("eigenvalue tracking needs this step's covariance update")
        gts = tuple(
            matmul(f.basis.load().T, gp, state.ledger)
            for f, gp in zip(state.factors, state.whitened_grads)
        )
    for f, gt in zip(state.factors, gts):
        lam = _ema(f.eigvals.load(), row_sum_of_squares(gt), cfg.beta2)
        f.eigvals = StorageMatrix.store(lam, cfg.storage)


def refresh_basis_full_old(state: LayerState):
    """Full-basis refresh in the ambient parametrization: Q_i <- qr(S_i Q_i).

    Costs 2 mm + 2 qr. Returns per-factor rotations O_i = Q_old^T Q_new
    (2 extra mm) only when moments need rotating, else None.
    """
    cfg = state.config
    rotations = []
    for f in state.factors:
        z = matmul(f.companion.load(), f.basis.load(), state.ledger)
        res = _basis_qr(z, cfg)
        state.ledger.qr_count += 1
        if state.moments is not None:
            rotations.append(matmul(f.basis.load().T, res.q, state.ledger))
        f.basis = StorageMatrix.store(res.q, cfg.storage)
    state.cached_rotated_grad = None
    return tuple(rotations) if rotations else None


def refresh_basis_full_new(state: LayerState):
    """Full-basis refresh in the rotated parametrization.

    O_i = qr(P_i).Q, then Q_i <- Q_i O_i and P_i <- O_i^T (P_i O_i),
    re-symmetrized. Costs 6 mm + 2 qr, 4 mm more than the ambient refresh,
    which amortizes against the cheaper per-step work whenever T >= 2.
    """
    cfg = state.config
    rotations = []
    for f in state.factors:
        p = f.companion.load()
        res = _basis_qr(p, cfg)
        state.ledger.qr_count += 1
        o = res.q
        q_new = matmul(f.basis.load(), o, state.ledger)
        p_new = matmul(o.T, matmul(p, o, state.ledger), state.ledger)
        p_new = (p_new + p_new.T) * 0.5
        f.basis = StorageMatrix.store(q_new, cfg.storage)
        f.companion = StorageMatrix.store(p_new, cfg.storage)
        rotations.append(o)
    state.cached_rotated_grad = None
    return tuple(rotations)


def precondition(state: LayerState, g: np.ndarray, gamma: float | None = None):
    """Apply Theta <- Theta - gamma * Q1 (U / sqrt-scale) Q2^T - gamma*wd*Theta.

    U = Q_1^T G Q_2 is reused from the covariance cache when the basis did
    not change this step; each entry is divided by
    sqrt((lam1_k + eps)(lam2_j + eps)). Weight decay is decoupled.
    """
    cfg = state.config
    gamma = cfg.gamma if gamma is None else gamma
    _check_grad_shape(state, g)
    f1, f2 = state.factors
    q1 = f1.basis.load()
    q2 = f2.basis.load()
    u = state.cached_rotated_grad
    if u is None:
        u = matmul(matmul(q1.T, g, state.ledger), q2, state.ledger)
    lam1 = f1.eigvals.load() + cfg.damping
    lam2 = f2.eigvals.load() + cfg.damping
    u = u / np.sqrt(np.outer(lam1, lam2))
    update = matmul(matmul(q1, u, state.ledger), q2.T, state.ledger)
    theta = state.theta.load()
    theta = theta - gamma * update - (gamma * cfg.weight_decay) * theta
    state.theta = StorageMatrix.store(theta, cfg.storage)


def step(state: LayerState, g, gamma: float | None = None) -> StepReport:
    """Run one full optimizer step on a gradient; returns cost diagnostics."""
    t0 = time.perf_counter()
    cfg = state.config
    g = np.ascontiguousarray(g, dtype=cfg.work_dtype)
    _check_grad_shape(state, g)
    led = state.ledger
    before = led.snapshot()

    if cfg.method is Method.KL_SHAMPOO:
        if cfg.parametrization is Parametrization.NEW:
            step_covariance_new(state, g)
        else:
            step_covariance_old(state, g)
        track_eigenvalues(state)
    else:
        from . import soap as soap_mod

        soap_mod.covariance_variant(cfg.method, state, g)
        if cfg.method is Method.KL_SOAP:
            track_eigenvalues(state)
    after_stats = led.snapshot()

    skipped: tuple[int, ...] = ()
    refreshed = state.step_count % cfg.interval_t == 0
    if refreshed:
        if cfg.selection is Selection.FULL:
            if cfg.parametrization is Parametrization.NEW:
                rotations = refresh_basis_full_new(state)
            else:
                rotations = refresh_basis_full_old(state)
            if state.moments is not None and rotations is not None:
                from .soap import rotate_moments

                rotate_moments(
                    state.moments,
                    rotations[0],
                    rotations[1],
                    approx_second=cfg.rotate_second_moment,
                )
        else:
            from .subspace import subspace_refresh

            skipped = subspace_refresh(state)
        if cfg.refresh_lambda:
            for f in state.factors:
                lam = np.diagonal(f.companion.load()).copy()
                f.eigvals = StorageMatrix.store(lam, cfg.storage)
    after_refresh = led.snapshot()

    if cfg.method.is_soap_type:
        from . import soap as soap_mod

        soap_mod.soap_precondition(state, g, gamma)
    else:
        precondition(state, g, gamma)
    after_all = led.snapshot()

    offdiag: list[float | None] = [None, None]
    if cfg.parametrization is Parametrization.NEW:
        from .subspace import off_diagonal_frobenius

        offdiag = [
            float(off_diagonal_frobenius(f.companion.load())) for f in state.factors
        ]

    state.whitened_grads = None
    state.rotated_whitened = None
    state.cached_rotated_grad = None
    state.step_count += 1

    return StepReport(
        mm=after_all[0] - before[0],
        smm=after_all[1] - before[1],
        qr=after_all[2] - before[2],
        eig=after_all[3] - before[3],
        smm_fraction=after_all[4] - before[4],
        mm_stats=after_stats[0] - before[0],
        mm_refresh=after_refresh[0] - after_stats[0],
        mm_precondition=after_all[0] - after_refresh[0],
        smm_refresh=after_refresh[1] - after_stats[1],
        offdiag_p1=offdiag[0],
        offdiag_p2=offdiag[1],
        wall_ms=(time.perf_counter() - t0) * 1e3,
        refreshed=refreshed,
        skipped_factors=skipped,
    )


def _check_grad_shape(state: LayerState, g: np.ndarray):
    if g.shape != state.theta.shape:
        raise ShapeError(f"gradient shape {g.shape} != theta shape {state.theta.shape}")


def make_config(**kwargs) -> OptimConfig:
    """Convenience constructor accepting enum values or their string names."""
    coerce = {
        "method": Method,
        "parametrization": Parametrization,
        "selection": Selection,
        "basis_solver": BasisSolver,
        "storage": Precision,
    }
    for key, enum_cls in coerce.items():
        if key in kwargs and isinstance(kwargs[key], str):
            kwargs[key] = enum_cls(kwargs[key])
    return OptimConfig(**kwargs)
