"""Shampoo-family preconditioned optimizers with a rotated companion state.

The package implements two interchangeable parametrizations of the
Kronecker-factored optimizer state -- ambient covariance factors S_i, or
their rotated form P_i = Q_i^T S_i Q_i -- together with full-basis and
subspace QR/eig basis refreshes, greedy and random block selection,
sign-fixed unique QR, BF16-storage/FP32-compute mixed precision, and an
instrumented cost ledger. A CLI harness (``precond``) drives toy training
tasks, equivalence and cost-accounting checks, decomposition benchmarks,
and checkpointing.
"""

from .matcore import CostLedger, Precision, StorageMatrix, bf16_round, bf16_to_float32
from .decomp import (
    DecompositionError,
    EigResult,
    QrResult,
    SingularMatrixError,
    eig_symmetric,
    qr_sign_fixed,
    top_k,
)
from .shampoo import (
    BasisSolver,
    FactorState,
    LayerState,
    Method,
    OptimConfig,
    Parametrization,
    Selection,
    StepReport,
    init_layer,
    make_config,
    step,
)
from .subspace import (
    BlockIndexSet,
    block_size,
    off_diagonal_frobenius,
    select_greedy,
    select_random,
    subspace_refresh,
)
from .soap import RotatedMoments

__all__ = [
    "BasisSolver",
    "BlockIndexSet",
    "CostLedger",
    "DecompositionError",
    "EigResult",
    "FactorState",
    "LayerState",
    "Method",
    "OptimConfig",
    "Parametrization",
    "Precision",
    "QrResult",
    "RotatedMoments",
    "Selection",
    "SingularMatrixError",
    "StepReport",
    "StorageMatrix",
    "bf16_round",
    "bf16_to_float32",
    "block_size",
    "eig_symmetric",
    "init_layer",
    "make_config",
    "off_diagonal_frobenius",
    "qr_sign_fixed",
    "select_greedy",
    "select_random",
    "step",
    "subspace_refresh",
    "top_k",
]

__version__ = "0.1.0"
