"""Training loops, equivalence and cost-accounting checkers, benchmarks.

Everything here is deterministic given (config, seed): task data, weight
init, batch order, and the optimizer's own randomness all derive from
seeded generators, so a rerun reproduces every CSV byte and checkpoint.
"""

from __future__ import annotations

import concurrent.futures
import time
from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np

from .decomp import DecompositionError, qr_sign_fixed
from .matcore import Precision, StorageMatrix
from .shampoo import (
    LayerState,
    Method,
    OptimConfig,
    Parametrization,
    Selection,
    init_layer,
    precondition,
    step,
    step_covariance_new,
    track_eigenvalues,
)
from .subspace import block_size, off_diagonal_frobenius
from .tasks import make_task

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_VIOLATION = 4

THETA_TOL = 1e-9       # max relative deviation between parametrizations
COMPANION_TOL = 1e-10  # max |P - Q^T S Q| across parametrizations


class TrainingNumericsError(RuntimeError):
    """Loss went non-finite or a decomposition failed; carries the step."""

    def __init__(self, step_index: int, message: str):
        self.step_index = step_index
        super().__init__(f"step {step_index}: {message}")


# ---------------------------------------------------------------------------
# Learning-rate schedules.
# ---------------------------------------------------------------------------

SCHEDULES = ("const", "cosine", "warmup-const")


def schedule_lr(kind: str, step_idx: int, total: int, gamma: float,
                gamma_min: float = 0.0, warmup_frac: float = 0.1) -> float:
    """Per-step learning rate. Cosine hits gamma and gamma_min exactly at
    the endpoints; warmup-const ramps linearly up and back down."""
    if kind == "const":
        return gamma
    if kind == "cosine":
        if step_idx == 0 or total <= 1:
            return gamma
        if step_idx == total - 1:
            return gamma_min
        frac = step_idx / (total - 1)
        return gamma_min + 0.5 * (gamma - gamma_min) * (1.0 + np.cos(np.pi * frac))
    if kind == "warmup-const":
        w = max(1, int(round(warmup_frac * total)))
        if step_idx < w:
            return gamma * (step_idx + 1) / w
        if step_idx >= total - w:
            return gamma * (total - step_idx) / w
        return gamma
    raise ValueError(f"unknown schedule {kind!r}; expected one of {SCHEDULES}")


# ---------------------------------------------------------------------------
# Training loop.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunRecord:
    step: int
    train_loss: float
    eval_loss: float
    mm: int
    smm: int
    qr: int
    eig: int
    offdiag_p1: float | None
    offdiag_p2: float | None
    wall_ms: float


CSV_HEADER = "step,train_loss,eval_loss,mm,smm,qr,eig,offdiag_p1,offdiag_p2,wall_ms"


def run_training(config: OptimConfig, task_kind: str = "quadratic", dims=None,
                 steps: int = 100, seed: int = 0, schedule: str = "const",
                 gamma_min: float = 0.0, warmup_frac: float = 0.1,
                 batch_size: int = 32, noise_scale: float = 0.0,
                 parallel_layers: bool = False):
    """Train one toy task; returns (records, states, task).

    Each weight matrix of the task gets its own layer state (seeded
    ``config.seed + layer_index``). The off-diagonal columns of the record
    report the first layer's companion matrices.
    """
    task = make_task(task_kind, dims=dims, dataset_seed=seed,
                     batch_size=batch_size, noise_scale=noise_scale)
    rng = np.random.default_rng(seed)
    params = task.init_params(rng)
    states = [
        init_layer(p.shape[0], p.shape[1], config, theta0=p, seed=config.seed + i)
        for i, p in enumerate(params)
    ]
    records: list[RunRecord] = []
    pool = None
    if parallel_layers and len(states) > 1:
        pool = concurrent.futures.ThreadPoolExecutor(max_workers=len(states))
    try:
        for t in range(steps):
            t0 = time.perf_counter()
            current = [s.theta.load().astype(np.float64) for s in states]
            batch = task.sample_batch(rng)
            train_loss = task.loss(current, batch)
            eval_loss = task.loss(current, None)
            if not np.isfinite(train_loss):
                raise TrainingNumericsError(t, f"non-finite loss {train_loss}")
            grads = task.gradients(current, batch)
            gamma_t = schedule_lr(schedule, t, steps, config.gamma, gamma_min,
                                  warmup_frac)
            try:
                if pool is not None:
                    reports = list(pool.map(
                        lambda sg: step(sg[0], sg[1], gamma=gamma_t),
                        zip(states, grads)))
                else:
                    reports = [step(s, g, gamma=gamma_t)
                               for s, g in zip(states, grads)]
            except DecompositionError as err:
                raise TrainingNumericsError(t, str(err)) from err
            records.append(RunRecord(
                step=t,
                train_loss=train_loss,
                eval_loss=eval_loss,
                mm=sum(s.ledger.mm_count for s in states),
                smm=sum(s.ledger.smm_count for s in states),
                qr=sum(s.ledger.qr_count for s in states),
                eig=sum(s.ledger.eig_count for s in states),
                offdiag_p1=reports[0].offdiag_p1,
                offdiag_p2=reports[0].offdiag_p2,
                wall_ms=(time.perf_counter() - t0) * 1e3,
            ))
    finally:
        if pool is not None:
            pool.shutdown()
    return records, states, task


def format_records_csv(records) -> str:
    lines = [CSV_HEADER]
    for r in records:
        off1 = "" if r.offdiag_p1 is None else repr(r.offdiag_p1)
        off2 = "" if r.offdiag_p2 is None else repr(r.offdiag_p2)
        lines.append(
            f"{r.step},{r.train_loss!r},{r.eval_loss!r},{r.mm},{r.smm},"
            f"{r.qr},{r.eig},{off1},{off2},{r.wall_ms!r}"
        )
    return "\n".join(lines) + "\n"


def write_records_csv(path, records):
    with open(path, "w", newline="") as fh:
        fh.write(format_records_csv(records))


# ---------------------------------------------------------------------------
# Parametrization equivalence checker.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EquivalenceReport:
    d1: int
    d2: int
    steps: int
    interval: int
    max_theta_dev: float
    max_companion_dev: float
    theta_tol: float
    companion_tol: float

    @property
    def passed(self) -> bool:
        return (self.max_theta_dev <= self.theta_tol
                and self.max_companion_dev <= self.companion_tol)


def check_equivalence(d1: int, d2: int, steps: int = 200, interval: int = 5,
                      seed: int = 0, method: Method = Method.KL_SHAMPOO,
                      inject: str | None = None) -> EquivalenceReport:
    """Run ambient and rotated parametrizations in lockstep on one FP64
    gradient stream and compare their trajectories at every step.

    Asserted quantities: max relative deviation of Theta (tolerance 1e-9)
    and max |P - Q^T S Q| across the two runs (tolerance 1e-10), where P
    and Q come from the rotated run and S from the ambient run.

    ``inject`` plants a known failure in the rotated path:

    * ``"skip-companion-rotation"`` -- the basis refresh updates Q but
      forgets to rotate P, the canonical bug this checker must catch;
    * ``"no-sign-fix-old"`` / ``"no-sign-fix-new"`` -- drops the QR sign
      canonicalization on one side. Measured behavior: no deviation; the
      whole pipeline is exactly equivariant to per-column QR sign choices,
      so trajectories re-align bitwise at the next refresh.
    """
    base = OptimConfig(
        gamma=0.05, beta2=0.05, beta1=0.1, damping=1e-2, interval_t=interval,
        method=method, storage=Precision.FP64, seed=seed,
    )
    cfg_old = replace(base, parametrization=Parametrization.OLD,
                      sign_fix=inject != "no-sign-fix-old")
    cfg_new = replace(base, parametrization=Parametrization.NEW,
                      sign_fix=inject != "no-sign-fix-new")
    rng = np.random.default_rng(seed)
    theta0 = rng.normal(size=(d1, d2))
    state_old = init_layer(d1, d2, cfg_old, theta0=theta0)
    state_new = init_layer(d1, d2, cfg_new, theta0=theta0)
    max_theta = 0.0
    max_comp = 0.0
    for t in range(steps):
        g = 0.1 * rng.normal(size=(d1, d2))
        step(state_old, g)
        if inject == "skip-companion-rotation":
            _step_without_companion_rotation(state_new, g)
        else:
            step(state_new, g)
        theta_o = state_old.theta.load()
        theta_n = state_new.theta.load()
        denom = max(np.abs(theta_o).max(), 1e-300)
        max_theta = max(max_theta, float(np.abs(theta_o - theta_n).max() / denom))
        for f_old, f_new in zip(state_old.factors, state_new.factors):
            q = f_new.basis.load()
            s = f_old.companion.load()
            p = f_new.companion.load()
            max_comp = max(max_comp, float(np.abs(p - q.T @ s @ q).max()))
    return EquivalenceReport(d1, d2, steps, interval, max_theta, max_comp,
                             THETA_TOL, COMPANION_TOL)


def _step_without_companion_rotation(state: LayerState, g):
    """Broken rotated-parametrization step: the refresh rotates Q but not P."""
    cfg = state.config
    g = np.ascontiguousarray(g, dtype=cfg.work_dtype)
    step_covariance_new(state, g)
    track_eigenvalues(state)
    if state.step_count % cfg.interval_t == 0:
        for f in state.factors:
            res = qr_sign_fixed(f.companion.load())
            q_new = f.basis.load() @ res.q
            state.ledger.qr_count += 1
            f.basis = StorageMatrix.store(q_new, cfg.storage)
            # companion left unrotated: P no longer equals Q^T S Q
        state.cached_rotated_grad = None
    precondition(state, g)
    state.whitened_grads = None
    state.rotated_whitened = None
    state.cached_rotated_grad = None
    state.step_count += 1


# ---------------------------------------------------------------------------
# Cost audit.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CostAuditRow:
    interval: int
    steps: int
    mm_old: int
    mm_new: int
    mm_old_expected: int
    mm_new_expected: int
    smm_new: int
    smm_fraction_new: float


@dataclass(frozen=True)
class CostAuditResult:
    rows: list
    violations: list

    @property
    def passed(self) -> bool:
        return not self.violations


def predicted_mm_total(param: Parametrization, n_steps: int, interval: int) -> int:
    """Closed-form mm totals for the full-basis KL-Shampoo pipeline.

    Per step, the covariance + eigenvalue phase costs 6 (ambient) or 4
    (rotated) mm. Each refresh (n/T of them) costs 2 or 6 mm. The weight
    update costs 4 mm for the ambient path; the rotated path reuses its
    cached rotated gradient (2 mm), except after a refresh invalidates it
    (4 mm on those steps). Rotated total 6n + 8n/T beats ambient
    10n + 2n/T strictly whenever T >= 2.
    """
    refreshes = n_steps // interval
    if param is Parametrization.OLD:
        return 10 * n_steps + 2 * refreshes
    return 6 * n_steps + 8 * refreshes


def cost_audit(d1: int, d2: int, intervals, steps: int,
               subspace_fraction: Fraction | None = None,
               inner_steps_k: int = 1,
               selection: Selection = Selection.RANDOM) -> CostAuditResult:
    """Assert the exact ledger counts of both parametrizations.

    Runs both paths over each interval in ``intervals`` on a synthetic
    gradient stream and checks: per-step covariance+tracking mm (6 vs 4),
    per-refresh mm (2 vs 6 full-basis), closed-form totals, and the strict
    total advantage of the rotated parametrization for every T >= 2 (at
    T = 1 the rotated path is dearer; reported, not failed). With a
    subspace fraction, additionally checks smm counts (3 per factor per
    pass) and the B^2-weighted fraction sum per refresh.
    """
    rows = []
    violations = []
    for interval in intervals:
        if steps < interval:
            raise ValueError(f"steps={steps} must be >= interval T={interval}")
        n = (steps // interval) * interval
        per_param: dict[Parametrization, tuple] = {}
        for param in (Parametrization.OLD, Parametrization.NEW):
            full = subspace_fraction is None
            cfg = OptimConfig(
                gamma=0.05, beta2=0.05, damping=1e-2, interval_t=interval,
                parametrization=param, storage=Precision.FP64,
                selection=Selection.FULL if full else selection,
                subspace_fraction=Fraction(1) if full else Fraction(subspace_fraction),
                inner_steps_k=1 if full else inner_steps_k,
            )
            rng = np.random.default_rng(1234)
            state = init_layer(d1, d2, cfg, theta0=rng.normal(size=(d1, d2)))
            reports = []
            for _ in range(n):
                g = 0.1 * rng.normal(size=(d1, d2))
                reports.append(step(state, g))
            per_param[param] = (state, reports)
            stats_expected = 6 if param is Parametrization.OLD else 4
            for t, rep in enumerate(reports):
                if rep.mm_stats != stats_expected:
                    violations.append(
                        f"T={interval} {param.value}: step {t} covariance+tracking "
                        f"mm={rep.mm_stats}, expected {stats_expected}")
                    break
            if full:
                refresh_expected = 2 if param is Parametrization.OLD else 6
                for t, rep in enumerate(reports):
                    want = refresh_expected if rep.refreshed else 0
                    if rep.mm_refresh != want:
                        violations.append(
                            f"T={interval} {param.value}: step {t} refresh "
                            f"mm={rep.mm_refresh}, expected {want}")
                        break
            else:
                _audit_subspace(d1, d2, interval, param, reports, cfg, violations)
        state_old, _ = per_param[Parametrization.OLD]
        state_new, _ = per_param[Parametrization.NEW]
        if subspace_fraction is None:
            expect_old = predicted_mm_total(Parametrization.OLD, n, interval)
            expect_new = predicted_mm_total(Parametrization.NEW, n, interval)
            if state_old.ledger.mm_count != expect_old:
                violations.append(
                    f"T={interval} old total mm {state_old.ledger.mm_count} != "
                    f"closed form {expect_old}")
            if state_new.ledger.mm_count != expect_new:
                violations.append(
                    f"T={interval} new total mm {state_new.ledger.mm_count} != "
                    f"closed form {expect_new}")
            if interval >= 2 and state_new.ledger.mm_count >= state_old.ledger.mm_count:
                violations.append(
                    f"T={interval}: rotated parametrization not strictly cheaper "
                    f"({state_new.ledger.mm_count} vs {state_old.ledger.mm_count})")
        rows.append(CostAuditRow(
            interval=interval,
            steps=n,
            mm_old=state_old.ledger.mm_count,
            mm_new=state_new.ledger.mm_count,
            mm_old_expected=predicted_mm_total(Parametrization.OLD, n, interval),
            mm_new_expected=predicted_mm_total(Parametrization.NEW, n, interval),
            smm_new=state_new.ledger.smm_count,
            smm_fraction_new=state_new.ledger.smm_fraction_sum,
        ))
    return CostAuditResult(rows, violations)


def _audit_subspace(d1, d2, interval, param, reports, cfg, violations):
    """Per-refresh smm accounting: 3 smm per factor per pass, each B^2."""
    k = cfg.inner_steps_k
    b1 = block_size(d1, cfg.subspace_fraction)
    b2 = block_size(d2, cfg.subspace_fraction)
    smm_expected = 0
    frac_expected = 0.0
    for b, d in ((b1, d1), (b2, d2)):
        if b in (d1, d2):
            continue  # block size collides with a layer dim; counted as mm
        smm_expected += 3 * k
        frac_expected += 3 * k * (b / d) ** 2
    mm_materialize = 4 if param is Parametrization.OLD else 0
    for t, rep in enumerate(reports):
        want_smm = smm_expected if rep.refreshed else 0
        want_mm = mm_materialize if rep.refreshed else 0
        if rep.smm_refresh != want_smm or rep.mm_refresh != want_mm:
            violations.append(
                f"T={interval} {param.value} subspace: step {t} smm={rep.smm_refresh} "
                f"mm={rep.mm_refresh}, expected smm={want_smm} mm={want_mm}")
            return
        want_frac = frac_expected if rep.refreshed else 0.0
        if abs(rep.smm_fraction - want_frac) > 1e-12:
            violations.append(
                f"T={interval} {param.value} subspace: step {t} smm fraction "
                f"{rep.smm_fraction}, expected {want_frac}")
            return


# ---------------------------------------------------------------------------
# Decomposition micro-benchmark.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BenchRow:
    kernel: str
    d: int
    fraction: Fraction | None
    median_ms: float


def bench_decomp(sizes, fractions, precision: Precision = Precision.FP32,
                 reps: int = 3, include_eig: bool = True) -> list[BenchRow]:
    """Time the basis-refresh kernels at each size; median over reps.

    * ``full_qr``  -- sign-fixed QR of P plus the Q and P rotations;
    * ``sub_qr``   -- block QR at fraction B plus the three strip updates;
    * ``mm``       -- one full-size matrix product;
    * ``full_eig`` -- the Jacobi eigendecomposition of P.
    """
    rng = np.random.default_rng(0)
    rows = []
    dtype = precision.compute_dtype
    for d in sizes:
        a = rng.normal(size=(d, d)).astype(dtype)
        p = (a @ a.T) / d + np.eye(d, dtype=dtype)
        q = np.linalg.qr(rng.normal(size=(d, d)).astype(dtype))[0]
        rows.append(BenchRow("mm", d, None, _median_time(lambda: a @ a, reps)))
        rows.append(BenchRow("full_qr", d, None,
                             _median_time(lambda: _full_refresh_kernel(p, q), reps)))
        for frac in fractions:
            frac = Fraction(frac)
            b = block_size(d, frac)
            idx = np.sort(rng.choice(d, size=b, replace=False))
            rows.append(BenchRow(
                "sub_qr", d, frac,
                _median_time(lambda: _sub_refresh_kernel(p, q, idx), reps)))
        if include_eig:
            from .decomp import eig_symmetric

            rows.append(BenchRow("full_eig", d, None,
                                 _median_time(lambda: eig_symmetric(p), reps)))
    return rows


def bench_ordering_violations(rows, min_d: int = 512) -> list:
    """Expected qualitative ordering at d >= min_d:
    sub_qr(B small) < sub_qr(B large) < full_qr, mm < full_qr < full_eig."""
    violations = []
    by_d: dict[int, dict] = {}
    for r in rows:
        slot = by_d.setdefault(r.d, {"sub": {}})
        if r.kernel == "sub_qr":
            slot["sub"][r.fraction] = r.median_ms
        else:
            slot[r.kernel] = r.median_ms
    for d, slot in by_d.items():
        if d < min_d:
            continue
        subs = sorted(slot["sub"].items())
        for (f_small, t_small), (f_big, t_big) in zip(subs, subs[1:]):
            if not t_small < t_big:
                violations.append(
                    f"d={d}: sub_qr(B={f_small}) {t_small:.3f}ms !< "
                    f"sub_qr(B={f_big}) {t_big:.3f}ms")
        for frac, t in subs:
            if frac <= Fraction(1, 2) and not t < slot["full_qr"]:
                violations.append(
                    f"d={d}: sub_qr(B={frac}) {t:.3f}ms !< full_qr "
                    f"{slot['full_qr']:.3f}ms")
        if not slot["mm"] < slot["full_qr"]:
            violations.append(f"d={d}: mm !< full_qr")
        if "full_eig" in slot and not slot["full_qr"] < slot["full_eig"]:
            violations.append(f"d={d}: full_qr !< full_eig")
    return violations


def _full_refresh_kernel(p, q):
    o = qr_sign_fixed(p).q
    q2 = q @ o
    p2 = o.T @ (p @ o)
    return q2, p2


def _sub_refresh_kernel(p, q, idx):
    block = p[np.ix_(idx, idx)]
    o = qr_sign_fixed(block).q
    qs = q[:, idx] @ o
    pc = p[:, idx] @ o
    pr = o.T @ p[idx, :]
    return qs, pc, pr


def _median_time(fn, reps: int) -> float:
    times = []
    for _ in range(max(1, reps)):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return float(np.median(times))


def format_bench_csv(rows) -> str:
    lines = ["kernel,d,B,median_ms"]
    for r in rows:
        frac = "" if r.fraction is None else str(r.fraction)
        lines.append(f"{r.kernel},{r.d},{frac},{r.median_ms!r}")
    return "\n".join(lines) + "\n"
