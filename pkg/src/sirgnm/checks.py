"""Self-check suites run by ``sirgnm check``.

Each suite compares the implementation with an independent route to the same
number: enumeration, dense linear algebra, finite differences, closed forms
or numerical quadrature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import integrate

from .bessel import bessel_k
from .core import Grid2D, SolverConfig, StepSchedule, make_rng
from .covariance import CovarianceOperator, MaternParams, matern_kernel
from .darcy import DarcyModel
from .diagnostics import LinearTestOperator, fit_rate, probe_unbiasedness
from .solver import StepInputs, run, step_primal, step_woodbury


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""


def bessel_k_quadrature(nu: float, x: float) -> float:
    """``K_nu(x) = int_0^inf exp(-x cosh t) cosh(nu t) dt``."""
    # the integrand is negligible once x cosh t exceeds ~750
    upper = math.acosh(max(1.0, 750.0 / x)) + 1.0
    val, _ = integrate.quad(lambda t: math.exp(-x * math.cosh(t)) * math.cosh(nu * t), 0.0, upper,
                            epsabs=0.0, epsrel=1e-13, limit=200)
    return val


def half_integer_k(nu: float, x: float) -> float:
    base = math.sqrt(math.pi / (2.0 * x)) * math.exp(-x)
    if nu == 0.5:
        return base
    if nu == 1.5:
        return base * (1.0 + 1.0 / x)
    if nu == 2.5:
        return base * (1.0 + 3.0 / x + 3.0 / (x * x))
    raise ValueError(nu)


def check_unbiasedness(fast: bool = False) -> CheckResult:
    g = make_rng(0, "probe", 10).uniform(0.5, 2.0, 64)
    exact = probe_unbiasedness(8, 3, g[:8], mode="mask_scaled")
    draws = 20_000 if fast else 100_000
    tol = 0.03 if fast else 0.01
    mc = probe_unbiasedness(64, 32, g, draws=draws, seed=0, mode="mask_scaled")
    rel = float(np.max(np.abs(mc.mean / g - 1.0)))
    ok = exact.max_deviation == 0.0 and rel <= tol
    return CheckResult("unbiasedness", ok, rel, tol,
                       f"enumeration deviation {exact.max_deviation:g}, {draws} draws")


def check_adjoint(fast: bool = False) -> CheckResult:
    n = 9 if fast else 17
    grid = Grid2D(n, n)
    model = DarcyModel(grid)
    rng = make_rng(0, "probe", 11)
    worst_adj = worst_fd = 0.0
    for _ in range(5 if fast else 20):
        u = rng.uniform(0.5, 3.0, grid.size)
        v = rng.standard_normal(grid.size)
        w = rng.standard_normal(model.m)
        lin = model.linearize(u)
        Jv, Jtw = lin.apply(v), lin.adjoint(w)
        scale = np.linalg.norm(Jv) * np.linalg.norm(w) + np.linalg.norm(v) * np.linalg.norm(Jtw)
        worst_adj = max(worst_adj, abs(Jv @ w - v @ Jtw) / scale)
        eps = 1e-6
        fd = (model.forward(u + eps * v) - model.forward(u - eps * v)) / (2 * eps)
        worst_fd = max(worst_fd, np.linalg.norm(fd - Jv) / np.linalg.norm(fd))
    ok = bool(worst_adj <= 1e-11 and worst_fd <= 1e-5)
    return CheckResult("adjoint", ok, worst_adj, 1e-11, f"finite-difference error {worst_fd:.2e} (tol 1e-05)")


def random_step_instance(rng: np.random.Generator, max_n: int = 400, max_m: int = 64):
    n = int(rng.integers(2, max_n + 1))
    m = int(rng.integers(1, max_m + 1))
    G = rng.standard_normal((n, n))
    C = G @ G.T / n + 0.1 * np.eye(n)
    C = 0.5 * (C + C.T)
    inputs = StepInputs(rng.standard_normal(n), rng.standard_normal(n), float(10 ** rng.uniform(-2, 1)),
                        rng.standard_normal(m), rng.standard_normal(m), rng.standard_normal((m, n)))
    return inputs, CovarianceOperator(C)


def check_woodbury(fast: bool = False) -> CheckResult:
    rng = make_rng(0, "probe", 12)
    worst = 0.0
    for _ in range(10 if fast else 50):
        inputs, cov = random_step_instance(rng, 120 if fast else 400)
        a, b = step_woodbury(inputs, cov), step_primal(inputs, cov)
        worst = max(worst, np.linalg.norm(a - b) / np.linalg.norm(b))
    return CheckResult("woodbury", bool(worst <= 1e-10), worst, 1e-10)


def check_bessel(fast: bool = False) -> CheckResult:
    xs = np.geomspace(0.01, 30.0, 50)
    worst = 0.0
    for nu in (0.5, 1.5, 2.5):
        for x in xs:
            ref = half_integer_k(nu, x)
            worst = max(worst, abs(bessel_k(nu, x) - ref) / ref)
    return CheckResult("bessel", bool(worst <= 1e-9), worst, 1e-9, "half-integer closed forms, 50 radii")


def check_matern(fast: bool = False) -> CheckResult:
    p = MaternParams(nu=0.5, ell=15.0)
    r = np.linspace(0.0, 60.0, 50)
    worst_exp = float(np.max(np.abs(matern_kernel(p, r) - np.exp(-r / 15.0)) / np.exp(-r / 15.0)))
    worst_q = 0.0
    for x in np.geomspace(0.05, 20.0, 8 if fast else 20):
        ref = bessel_k_quadrature(2.4, x)
        worst_q = max(worst_q, abs(bessel_k(2.4, x) - ref) / ref)
    ok = bool(worst_exp <= 1e-9 and worst_q <= 1e-8)
    return CheckResult("matern", ok, worst_q, 1e-8, f"exponential-kernel error {worst_exp:.1e}")


def rate_problem(n_params: int = 81, m: int = 64, seed: int = 0):
    """Linear operator with log-spaced spectrum and a truth of source order one."""
    s = np.sqrt(np.logspace(-10, 2, m))
    op = LinearTestOperator.with_spectrum(n_params, s, seed=seed)
    w = make_rng(seed, "probe", 4).standard_normal(m)
    u0 = np.zeros(n_params)
    return op, u0, u0 + op.source_element(w, 1.0)


def check_rates(fast: bool = False) -> CheckResult:
    op, u0, truth = rate_problem()
    cfg = SolverConfig("IRGNM", StepSchedule("geometric", 1.0, 0.8), 60)
    res = run(cfg, op, CovarianceOperator.identity(op.n_params), u0, op.forward(truth), truth=truth)
    fit = fit_rate(res.history, 20)
    ok = 1.7 <= fit.t_slope <= 2.3 and 0.7 <= fit.d_slope <= 1.3
    return CheckResult("rates", ok, fit.t_slope, 2.0,
                       f"t slope {fit.t_slope:.3f} in [1.7, 2.3], d slope {fit.d_slope:.3f} in [0.7, 1.3]")


SUITES: dict[str, Callable[[bool], CheckResult]] = {
    "unbiasedness": check_unbiasedness,
    "adjoint": check_adjoint,
    "woodbury": check_woodbury,
    "bessel": check_bessel,
    "matern": check_matern,
    "rates": check_rates,
}


def run_checks(fast: bool = False) -> list:
    return [suite(fast) for suite in SUITES.values()]
