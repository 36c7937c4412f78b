"""Build inverse problems from a configuration and run replicated experiments.

A replicate is addressed by ``(seed, run_id)``.  The truth is fixed by the
problem section; replicates differ in measurement noise and sketch draws.
Static variants see ``y_true + delta * xi_1`` where ``xi_1`` is the first
noise vector of the replicate's observation stream, so with
``delta == sigma_stream`` they get exactly the stream's first draw.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from .config import ExperimentConfig
from .core import DivergenceError, Grid2D, ObservationStream, SolverConfig, ValidationError
from .covariance import CovarianceOperator, MaternParams, assemble_covariance
from .darcy import DarcyModel, ObservationOperator, ground_truth
from .diagnostics import MetricsRecord
from .solver import run

log = logging.getLogger(__name__)

TRUTH_LABELS = {"levelset": "discontinuous", "smooth": "smooth"}


@dataclass
class Problem:
    grid: Grid2D
    cov: CovarianceOperator
    model: DarcyModel
    truth: np.ndarray
    u0: np.ndarray
    y_true: np.ndarray
    truth_kind: str


@lru_cache(maxsize=8)
def _covariance(grid: Grid2D, params: MaternParams) -> CovarianceOperator:
    return assemble_covariance(grid, params)


def build_problem(config: ExperimentConfig, truth_kind: Optional[str] = None) -> Problem:
    p = config.problem
    kind = truth_kind or p.truth_kind
    grid = Grid2D(p.grid_n, p.grid_n, p.domain_size, p.domain_size)
    cov = _covariance(grid, config.matern)
    obs = ObservationOperator.lattice(grid, int(round(p.obs_count ** 0.5)))
    model = DarcyModel(grid, obs, parameterization=p.parameterization)
    truth = ground_truth(kind, grid, cov, seed=p.truth_seed, kappa_low=p.kappa_low,
                         kappa_high=p.kappa_high).values.copy()
    u0 = np.full(grid.size, p.initial_value(kind))
    if p.parameterization == "exp":
        # the unknown is log-permeability; the level-set values are permeabilities
        if kind == "levelset":
            truth = np.log(truth)
        u0 = np.log(u0) if p.u0 is None else u0
    return Problem(grid, cov, model, truth, u0, model.forward(truth), kind)


def replicate_data(problem: Problem, config: ExperimentConfig, solver: SolverConfig, run_id: int):
    """Data argument for :func:`solver.run`: a stream for dynamic variants, a fixed vector otherwise."""
    stream = ObservationStream(problem.y_true, config.noise.sigma_stream, solver.seed, run_id)
    if solver.dynamic:
        return stream
    return problem.y_true + config.noise.delta * stream.noise(1)


@dataclass
class ReplicateResult:
    truth_kind: str
    variant: str
    batch: Optional[int]
    run_id: int
    history: list
    u: np.ndarray
    status: str = "ok"  # "ok", "stopped" or "diverged"
    message: str = ""
    solver_ms: float = 0.0

    @property
    def final(self) -> MetricsRecord:
        return self.history[-1]

    @property
    def reached(self) -> bool:
        return self.status == "stopped"


@dataclass(frozen=True)
class Task:
    config: ExperimentConfig
    truth_kind: str
    solver: SolverConfig
    run_id: int


def run_task(task: Task) -> ReplicateResult:
    problem = build_problem(task.config, task.truth_kind)
    data = replicate_data(problem, task.config, task.solver, task.run_id)
    batch = task.solver.sketch_batch
    t0 = time.perf_counter()
    try:
        res = run(task.solver, problem.model, problem.cov, problem.u0, data,
                  truth=problem.truth, y_true=problem.y_true, run_id=task.run_id)
    except DivergenceError as exc:
        ms = (time.perf_counter() - t0) * 1e3
        u = np.asarray(getattr(exc.state.u_current, "values", exc.state.u_current))
        return ReplicateResult(task.truth_kind, task.solver.variant, batch, task.run_id,
                               list(exc.state.history), u, "diverged", str(exc), ms)
    ms = (time.perf_counter() - t0) * 1e3
    status = "stopped" if res.stopped_early else "ok"
    return ReplicateResult(task.truth_kind, task.solver.variant, batch, task.run_id,
                           res.history, res.u, status, "", ms)


def worker_count(config: ExperimentConfig) -> int:
    env = os.environ.get("IRGN_WORKERS")
    if env:
        try:
            n = int(env)
        except ValueError as exc:
            raise ValidationError(f"IRGN_WORKERS must be an integer, got {env!r}") from exc
        if n < 1:
            raise ValidationError("IRGN_WORKERS must be at least 1")
        return n
    return config.workers


def run_tasks(tasks: Sequence[Task], workers: int = 1) -> list:
    """Run tasks, in parallel when ``workers > 1``; results keep task order."""
    if workers <= 1 or len(tasks) <= 1:
        return [run_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
        return list(pool.map(run_task, tasks))


def solver_for(config: ExperimentConfig, variant: Optional[str] = None, batch: Optional[int] = None,
               seed: Optional[int] = None, **changes) -> SolverConfig:
    """The configured solver with a different variant / batch / seed."""
    s = config.solver
    variant = variant or s.variant
    stochastic = variant in ("SIRGNM", "SdIRGNM")
    if stochastic:
        batch = batch if batch is not None else (s.sketch_batch or 32)
    else:
        batch = None
    return replace(s, variant=variant, sketch_batch=batch,
                   seed=s.seed if seed is None else seed, **changes)


def replicate_tasks(config: ExperimentConfig, solver: SolverConfig, truth_kind: Optional[str] = None,
                    replicates: Optional[int] = None) -> list:
    kind = truth_kind or config.problem.truth_kind
    n = config.replicates if replicates is None else replicates
    return [Task(config, kind, solver, r) for r in range(n)]
