"""Run metrics, empirical probes of the sketching and nonlinearity assumptions,
and convergence-rate estimation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from math import comb
from typing import Optional, Sequence

import numpy as np

from .core import GridField, ValidationError, make_rng
from .sketching import draw_plan, enumerate_plans, project

TRACE_COLUMNS = ("iter", "alpha", "rel_err", "residual_t", "param_err_d", "sketch_gap", "wall_ms")


@dataclass(frozen=True)
class MetricsRecord:
    """Per-iterate metrics.  ``alpha`` is the schedule value at ``iter``;
    ``sketch_gap`` belongs to the step that produced this iterate."""

    iter: int
    alpha: float
    rel_err: float
    residual_t: float
    param_err_d: float
    sketch_gap: float = 0.0
    wall_ms: float = 0.0

    def __post_init__(self):
        if self.iter < 0:
            raise ValidationError("iteration index must be non-negative")
        for name in ("alpha", "rel_err", "residual_t", "param_err_d", "sketch_gap", "wall_ms"):
            v = getattr(self, name)
            if math.isinf(v):
                raise ValidationError(f"metric {name} is infinite")

    def row(self) -> tuple:
        return tuple(getattr(self, c) for c in TRACE_COLUMNS)


class LinearTestOperator:
    """``F(u) = A u`` with the forward-model interface of :class:`DarcyModel`.

    The linearization is exact, so the tangential cone condition holds with
    ``C_tc = 1`` and ``eta = 0``.
    """

    def __init__(self, A, description: str = ""):
        self.A = np.array(A, dtype=np.float64)
        self.description = description

    @classmethod
    def with_spectrum(cls, n_params: int, singular_values, seed: int = 0) -> "LinearTestOperator":
        """Random orthogonal factors around prescribed singular values (``m = len(s)``)."""
        s = np.asarray(singular_values, dtype=np.float64)
        m = s.size
        if m > n_params:
            raise ValidationError("need m <= n_params")
        rng = make_rng(seed, "probe", 0)
        U, _ = np.linalg.qr(rng.standard_normal((m, m)))
        V, _ = np.linalg.qr(rng.standard_normal((n_params, m)))
        op = cls(U @ np.diag(s) @ V.T, f"U diag(s) V^T, s in [{s.min():.1e}, {s.max():.1e}]")
        op.U, op.s, op.V = U, s, V
        return op

    def source_element(self, w, exponent: float = 1.0) -> np.ndarray:
        """``(A^T A)^(exponent/2) V w``: an element satisfying a source condition of that order."""
        return self.V @ (self.s**exponent * np.asarray(w))

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def n_params(self) -> int:
        return self.A.shape[1]

    def forward(self, u) -> np.ndarray:
        return self.A @ np.asarray(getattr(u, "values", u), dtype=np.float64)

    def evaluate(self, u, rows=None):
        J = self.A if rows is None else self.A[np.asarray(rows)]
        return self.forward(u), J.copy()

    def jacobian_apply(self, u, v) -> np.ndarray:
        return self.A @ np.asarray(getattr(v, "values", v), dtype=np.float64)

    def jacobian_adjoint_apply(self, u, w) -> np.ndarray:
        return self.A.T @ np.asarray(w, dtype=np.float64)

    def dense_jacobian(self, u) -> np.ndarray:
        return self.A.copy()


def relative_error(u, truth) -> float:
    """``||u - truth|| / ||truth||`` in the grid L2 norm (uniform weights cancel)."""
    if isinstance(u, GridField) and isinstance(truth, GridField) and u.grid != truth.grid:
        raise ValidationError("fields live on different grids")
    u = np.asarray(getattr(u, "values", u), dtype=np.float64)
    t = np.asarray(getattr(truth, "values", truth), dtype=np.float64)
    nt = np.linalg.norm(t)
    if nt == 0:
        raise ValidationError("truth has zero norm")
    return float(np.linalg.norm(u - t) / nt)


# --------------------------------------------------------------------------
# sketch probes
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class UnbiasednessReport:
    method: str
    draws: int
    mean: np.ndarray
    max_deviation: float


def _keep_factor(counts, total, m, batch, mode, scale):
    if scale is None and mode == "mask_scaled":
        # integer numerator and denominator: exact when counts * m == batch * total
        return (counts * m) / (batch * total)
    s = 1.0 if scale is None else scale
    return counts * s / total


def probe_unbiasedness(m: int, batch: int, g, draws: Optional[int] = None, seed: int = 0,
                       mode: str = "mask_scaled", scale: Optional[float] = None,
                       max_enumeration: int = 100_000) -> UnbiasednessReport:
    """Mean of ``P[g]`` over plans, by exact enumeration when affordable.

    Enumeration counts how often each index is kept; with the default
    ``m / b`` scale the keep ratio is formed from integers, so an unbiased
    operator shows a deviation of exactly zero.
    """
    g = np.asarray(g, dtype=np.float64)
    n_plans = comb(m, batch)
    if draws is None and n_plans <= max_enumeration:
        counts = np.zeros(m, dtype=np.int64)
        for plan in enumerate_plans(m, batch, mode, scale):
            counts[plan.indices] += 1
        mean = g * _keep_factor(counts, n_plans, m, batch, mode, scale)
        return UnbiasednessReport("enumeration", n_plans, mean, float(np.max(np.abs(mean - g))))
    draws = draws or 100_000
    rng = make_rng(seed, "probe", 1)
    counts = np.zeros(m, dtype=np.int64)
    for _ in range(draws):
        plan = draw_plan(m, batch, mode, rng, scale)
        counts[plan.indices] += 1
    mean = g * _keep_factor(counts, draws, m, batch, mode, scale)
    return UnbiasednessReport("monte_carlo", draws, mean, float(np.max(np.abs(mean - g))))


def probe_sketch_deviation(m: int, batch: int, g, draws: int = 2000, seed: int = 0,
                           mode: str = "mask_scaled") -> float:
    """Monte Carlo ``E ||P[g] - g||`` (the sketch variance bound)."""
    g = np.asarray(g, dtype=np.float64)
    rng = make_rng(seed, "probe", 2)
    total = 0.0
    for _ in range(draws):
        total += np.linalg.norm(project(draw_plan(m, batch, mode, rng), g) - g)
    return total / draws


# --------------------------------------------------------------------------
# tangential cone
# --------------------------------------------------------------------------

ETA_GRID = (0.0, 1e-4, 1e-3, 1e-2, 1e-1, 1.0)


def probe_tangential_cone(model, u_center, radius: float, samples: int = 50, seed: int = 0,
                          y_ref=None, eta_grid: Sequence[float] = ETA_GRID):
    """Empirical constants of the two-sided tangential cone inequality.

    For random pairs ``u, v`` in the ball of the given radius, with
    ``lin = ||F(u) + F'(u)(v - u) - y||^2``, ``a = ||F(v) - y||^2`` and
    ``b = ||F(u) - y||^2``, the smallest feasible ``C(eta)`` satisfies
    ``a / C - eta b <= lin <= C a + eta b``.  Returns ``(C_tc, eta)`` where
    ``C_tc`` is the minimum over the grid and ``eta`` the smallest grid value
    attaining it.
    """
    u_center = np.asarray(getattr(u_center, "values", u_center), dtype=np.float64)
    y_ref = model.forward(u_center) if y_ref is None else np.asarray(y_ref, dtype=np.float64)
    rng = make_rng(seed, "probe", 3)
    n = u_center.size
    lin, a, b = np.empty(samples), np.empty(samples), np.empty(samples)

    def ball_point():
        d = rng.standard_normal(n)
        return u_center + radius * rng.uniform() ** (1.0 / n) * d / np.linalg.norm(d)

    for k in range(samples):
        u, v = ball_point(), ball_point()
        Fu = model.forward(u)
        lin[k] = np.sum((Fu + model.jacobian_apply(u, v - u) - y_ref) ** 2)
        a[k] = np.sum((model.forward(v) - y_ref) ** 2)
        b[k] = np.sum((Fu - y_ref) ** 2)
    C = []
    for eta in eta_grid:
        upper = np.max((lin - eta * b) / a)
        lower = np.max(a / np.maximum(lin + eta * b, np.finfo(float).tiny))
        C.append(max(1.0, upper, lower))
    C = np.array(C)
    best = C.min()
    k = int(np.argmax(np.isclose(C, best, rtol=1e-9, atol=0.0)))
    return float(best), float(eta_grid[k])


# --------------------------------------------------------------------------
# rates and replicates
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RateFit:
    t_slope: float
    d_slope: float


def _slope(x, y):
    x, y = np.log(x), np.log(y)
    xc = x - x.mean()
    return float(xc @ (y - y.mean()) / (xc @ xc))


def fit_rate(history: Sequence[MetricsRecord], window: int, lag: int = 1) -> RateFit:
    """Least-squares slopes of ``log t`` and ``log d`` against ``log alpha``.

    Iterate ``k`` is paired with the regularization used to produce it,
    ``alpha_{k - lag}`` (``lag = 1`` matches ``t_{n+1} = O(alpha_n^2)``).
    """
    if len(history) < window + lag:
        raise ValidationError(f"need at least {window + lag} records, have {len(history)}")
    alpha = np.array([r.alpha for r in history])
    t = np.array([r.residual_t for r in history])
    d = np.array([r.param_err_d for r in history])
    a = alpha[:len(alpha) - lag] if lag else alpha
    t, d = t[lag:], d[lag:]
    a, t, d = a[-window:], t[-window:], d[-window:]
    return RateFit(_slope(a, t), _slope(a, d))


@dataclass(frozen=True)
class ReplicateSummary:
    """Per-iteration statistics; each array has one entry per iteration."""

    iters: np.ndarray
    mean: dict
    lo: dict
    hi: dict
    min: dict
    max: dict
    n: int


def _stack(histories, key):
    length = max(len(h) for h in histories)
    out = np.empty((len(histories), length))
    for r, h in enumerate(histories):
        vals = [getattr(rec, key) for rec in h]
        out[r, :len(vals)] = vals
        out[r, len(vals):] = vals[-1]  # an early-stopped run keeps its final iterate
    return out


def replicate_expectation(histories: Sequence[Sequence[MetricsRecord]],
                          keys=("rel_err", "residual_t", "param_err_d")) -> ReplicateSummary:
    """Mean and normal-approximation 95% interval across replicate histories."""
    if not histories:
        raise ValidationError("no histories to aggregate")
    n = len(histories)
    mean, lo, hi, mn, mx = {}, {}, {}, {}, {}
    for key in keys:
        data = _stack(histories, key)
        mu = data.mean(axis=0)
        half = 1.96 * data.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros_like(mu)
        mean[key], lo[key], hi[key] = mu, mu - half, mu + half
        mn[key], mx[key] = data.min(axis=0), data.max(axis=0)
    length = max(len(h) for h in histories)
    return ReplicateSummary(np.arange(length), mean, lo, hi, mn, mx, n)
