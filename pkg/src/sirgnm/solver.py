"""Iteratively regularized Gauss-Newton iteration and its sketched / dynamic variants.

One kernel serves all four variants.  At step ``n`` the linearized,
possibly sketched problem

    min_u  1/2 ||P(F_n + J_n (u - u_n))||^2 - <Z_n, P(F_n + J_n (u - u_n))>
           + alpha_n / 2 ||u - u_0||^2_{C^-1}

is solved in closed form.  The production path works in data space
(Woodbury form, through an SVD of the b x N factor J L); the parameter-space normal equations are
kept as an independent check.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import linalg
from scipy.linalg import blas

from .core import (ConditioningError, DivergenceError, GridField, ObservationStream, SolverConfig,
                   SolverState, ValidationError, make_rng)
from .diagnostics import MetricsRecord
from .sketching import SketchPlan, draw_plan, project

log = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 1e8


@dataclass
class StepInputs:
    """Quantities of one linearized step, already mapped into the sketched data space."""

    u_n: np.ndarray
    u_0: np.ndarray
    alpha_n: float
    z_n: np.ndarray
    F_n: np.ndarray
    J_n: np.ndarray
    plan: Optional[SketchPlan] = None

    def __post_init__(self):
        self.u_n = np.asarray(getattr(self.u_n, "values", self.u_n), dtype=np.float64)
        self.u_0 = np.asarray(getattr(self.u_0, "values", self.u_0), dtype=np.float64)
        self.J_n = np.atleast_2d(np.asarray(self.J_n, dtype=np.float64))
        if not (self.J_n.shape[0] == len(self.F_n) == len(self.z_n)):
            raise ValidationError("J_n rows, F_n and z_n must have equal length")
        if self.J_n.shape[1] != self.u_n.size:
            raise ValidationError("J_n columns must match the parameter size")
        if not self.alpha_n > 0:
            raise ValidationError("alpha_n must be positive")


def sketch_inputs(plan: Optional[SketchPlan], u_n, u_0, alpha_n, z_full, F_full, J_rows) -> StepInputs:
    """Map full-length data and the Jacobian rows of ``plan.indices`` into the sketched space.

    ``J_rows`` holds only the drawn rows (all rows when ``plan`` is None).
    """
    if plan is None:
        return StepInputs(u_n, u_0, alpha_n, np.asarray(z_full), np.asarray(F_full), J_rows)
    z, F = project(plan, z_full), project(plan, F_full)
    if plan.mode == "select":
        J = J_rows if plan.scale == 1.0 else plan.scale * J_rows
    else:
        J = np.zeros((plan.m, J_rows.shape[1]))
        J[plan.indices] = plan.scale * J_rows
    return StepInputs(u_n, u_0, alpha_n, z, F, J, plan)


def _spd_solve(K, r, what):
    try:
        c = linalg.cho_factor(K, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise ConditioningError(f"{what} system is not numerically SPD") from exc
    x = linalg.cho_solve(c, r, check_finite=False)
    if not np.all(np.isfinite(x)):
        raise ConditioningError(f"{what} solve produced non-finite values")
    return x


def _times_lower(J, L):
    """``J @ L`` for lower-triangular ``L`` via BLAS trmm."""
    if L.flags.c_contiguous:
        # L.T is a Fortran-ordered upper-triangular view
        return blas.dtrmm(1.0, L.T, J, side=1, lower=0, trans_a=1)
    return J @ L


def step_woodbury(inputs: StepInputs, cov) -> np.ndarray:
    """``u_0 + C J^T (J C J^T + alpha I)^{-1} (z - F - J (u_0 - u_n))``.

    With ``C = L L^T`` and ``B = J L = U S W^T`` the data-space matrix is
    ``U (S^2 + alpha) U^T``, whose eigenvalues stay ``>= alpha`` in floating
    point even when ``J C J^T`` spans many decades.
    """
    J = inputs.J_n
    r = inputs.z_n - inputs.F_n - J @ (inputs.u_0 - inputs.u_n)
    L = cov.sqrt_factor
    B = _times_lower(J, L)
    try:
        if B.shape[0] <= B.shape[1]:
            # B^T = Q R, R = P S V^T  =>  U = V, W = Q P
            Q, R = linalg.qr(B.T, mode="economic", check_finite=False)
            P, s, Vt = linalg.svd(R, check_finite=False)
            U, W = Vt.T, Q @ P
        else:
            U, s, Wt = linalg.svd(B, full_matrices=False, check_finite=False)
            W = Wt.T
    except (linalg.LinAlgError, ValueError) as exc:
        raise ConditioningError(f"SVD of the sketched factor failed: {exc}") from exc
    coef = (U.T @ r) / (s * s + inputs.alpha_n)
    # C J^T U c = L W S c
    x = inputs.u_0 + L @ (W @ (s * coef))
    if not np.all(np.isfinite(x)):
        raise ConditioningError("data-space solve produced non-finite values")
    return x


def step_primal(inputs: StepInputs, cov, tol: float = 1e-9) -> np.ndarray:
    """Parameter-space normal equations ``(J^T J + alpha C^-1) s = J^T (z - F) + alpha C^-1 (u_0 - u_n)``."""
    J, a = inputs.J_n, inputs.alpha_n
    Cinv = cov.solve(np.eye(J.shape[1]))
    Cinv = 0.5 * (Cinv + Cinv.T)
    H = J.T @ J + a * Cinv
    rhs = J.T @ (inputs.z_n - inputs.F_n) + a * (Cinv @ (inputs.u_0 - inputs.u_n))
    s = _spd_solve(H, rhs, "parameter-space")
    res = np.linalg.norm(H @ s - rhs)
    if res > tol * max(np.linalg.norm(rhs), np.finfo(float).tiny):
        raise ConditioningError(f"normal-equation residual {res:.2e} above tolerance")
    return inputs.u_n + s


def sketched_objective(inputs: StepInputs, cov, u) -> float:
    """Value of the step's sketched, linearized objective at ``u``."""
    u = np.asarray(getattr(u, "values", u), dtype=np.float64)
    g = inputs.F_n + inputs.J_n @ (u - inputs.u_n)
    return float(0.5 * g @ g - inputs.z_n @ g
                 + 0.5 * inputs.alpha_n * cov.weighted_norm2(u - inputs.u_0))


# --------------------------------------------------------------------------
# outer loop
# --------------------------------------------------------------------------


@dataclass
class RunResult:
    u: np.ndarray
    history: list
    plans: list = field(default_factory=list)
    stopped_early: bool = False

    @property
    def final(self) -> MetricsRecord:
        return self.history[-1]


class _Metrics:
    def __init__(self, truth, y_true, t0):
        self.truth = None if truth is None else np.asarray(getattr(truth, "values", truth), dtype=np.float64)
        self.y_true = None if y_true is None else np.asarray(y_true, dtype=np.float64)
        self.truth_norm = None if self.truth is None else np.linalg.norm(self.truth)
        self.t0 = t0

    def record(self, it, alpha, u, F, gap):
        if self.truth is not None:
            diff = u - self.truth
            d = float(diff @ diff)
            rel = float(np.sqrt(d) / self.truth_norm)
        else:
            d = rel = float("nan")
        t = float(0.5 * np.sum((F - self.y_true) ** 2)) if self.y_true is not None else float("nan")
        return MetricsRecord(it, alpha, rel, t, d, gap, (time.perf_counter() - self.t0) * 1e3)


def run(config: SolverConfig, model, cov, u0, data, truth=None, y_true=None, run_id: int = 0,
        on_record: Optional[Callable[[MetricsRecord], None]] = None) -> RunResult:
    """Run one solver variant for at most ``config.max_iters`` steps.

    ``data`` is either a fixed data vector or an :class:`ObservationStream`.
    Dynamic variants draw from the stream every step and use its running
    average; static variants use a fixed vector (a stream contributes its
    first draw).  ``truth`` enables error metrics and early stopping;
    ``y_true`` defaults to ``F(truth)``.
    """
    u0 = np.asarray(getattr(u0, "values", u0), dtype=np.float64).copy()
    m = model.m
    stream = data if isinstance(data, ObservationStream) else None
    if config.dynamic and stream is None:
        raise ValidationError(f"{config.variant} needs an ObservationStream")
    if stream is not None and not config.dynamic:
        z_fixed = stream.draw()[0]
    elif stream is None:
        z_fixed = np.asarray(data, dtype=np.float64)
        if z_fixed.size != m:
            raise ValidationError(f"data has length {z_fixed.size}, model has {m} observations")
    if config.stochastic and config.sketch_batch > m:
        raise ValidationError(f"sketch_batch {config.sketch_batch} exceeds {m} observations")
    if y_true is None and truth is not None:
        y_true = model.forward(truth)

    metrics = _Metrics(truth, y_true, time.perf_counter())
    history, plans = [], []
    u = u0.copy()
    u_norm_cap = DIVERGENCE_FACTOR * (1.0 + np.linalg.norm(u0))
    gap = 0.0

    def emit(rec):
        history.append(rec)
        if on_record is not None:
            on_record(rec)

    def diverged(msg):
        grid = getattr(model, "grid", None)
        last = GridField(grid, u) if grid is not None else u
        state = SolverState(last, config.schedule, len(history) - 1 if history else 0, history)
        return DivergenceError(msg, state=state)

    for n in range(config.max_iters):
        alpha = config.schedule.alpha(n)
        plan = None
        if config.stochastic:
            plan = draw_plan(m, config.sketch_batch, config.sketch_mode,
                             make_rng(config.seed, "sketch", run_id, n))
            plans.append(plan)
        F_full, J_rows = model.evaluate(u, None if plan is None else plan.indices)
        rec = metrics.record(n, alpha, u, F_full, gap)
        emit(rec)
        if config.stop_rel_err is not None and rec.rel_err <= config.stop_rel_err:
            return RunResult(u, history, plans, stopped_early=True)
        z_full = stream.draw()[1] if config.dynamic else z_fixed
        prior = u if config.lm_prior else u0
        inputs = sketch_inputs(plan, u, prior, alpha, z_full, F_full, J_rows)
        try:
            u_next = step_woodbury(inputs, cov)
        except ConditioningError as exc:
            raise diverged(f"step {n} failed: {exc}") from exc
        if not np.all(np.isfinite(u_next)) or np.linalg.norm(u_next) > u_norm_cap:
            raise diverged(f"iterate {n + 1} is non-finite or exceeds the divergence cap")
        gap = float(np.linalg.norm(inputs.F_n + inputs.J_n @ (u_next - u) - inputs.z_n))
        u = u_next

    F_full = model.forward(u)
    emit(metrics.record(config.max_iters, config.schedule.alpha(config.max_iters), u, F_full, gap))
    stop = config.stop_rel_err is not None and history[-1].rel_err <= config.stop_rel_err
    return RunResult(u, history, plans, stopped_early=stop)
