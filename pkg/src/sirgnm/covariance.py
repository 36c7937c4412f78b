"""Matérn covariance on grid nodes: kernel, dense assembly, factorization, sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg

from .bessel import bessel_k
from .core import CapacityError, ConditioningError, Grid2D, GridField, ValidationError, make_rng

MAX_DENSE_NODES = 5000


@dataclass(frozen=True)
class MaternParams:
    nu: float = 2.4
    ell: float = 15.0
    c0: float = 1.0

    def __post_init__(self):
        if not (self.nu > 0 and self.ell > 0 and self.c0 > 0):
            raise ValidationError("Matérn parameters nu, ell, c0 must all be positive")


def matern_kernel(params: MaternParams, r):
    """``c0 * 2**(1-nu) / Gamma(nu) * (r/ell)**nu * K_nu(r/ell)``, equal to ``c0`` at ``r = 0``.

    Accepts a scalar or an array of non-negative distances.
    """
    r_arr = np.asarray(r, dtype=np.float64)
    if np.any(r_arr < 0) or not np.all(np.isfinite(r_arr)):
        raise ValidationError("distances must be finite and non-negative")
    nu = params.nu
    log_pref = (1.0 - nu) * math.log(2.0) - math.lgamma(nu)
    out = np.empty(r_arr.shape)
    flat_r, flat_out = r_arr.ravel(), out.reshape(-1)
    for k, rk in enumerate(flat_r):
        if rk == 0.0:
            flat_out[k] = 1.0
            continue
        s = rk / params.ell
        kv = bessel_k(nu, s)
        flat_out[k] = 1.0 if math.isinf(kv) else math.exp(log_pref + nu * math.log(s)) * kv
    out *= params.c0
    return float(out) if np.ndim(r) == 0 else out


def kernel_table(params: MaternParams, r_max: float, n: int = 101) -> np.ndarray:
    """``(n, 2)`` array of ``(r, c(r))`` on a uniform ladder ``[0, r_max]``."""
    r = np.linspace(0.0, r_max, n)
    return np.column_stack([r, matern_kernel(params, r)])


class CovarianceOperator:
    """Dense covariance matrix with a Cholesky factor of ``C + jitter * I``.

    ``apply`` multiplies by the unjittered ``C``; ``solve`` inverts the
    jittered matrix that was actually factorized.
    """

    def __init__(self, matrix, params: Optional[MaternParams] = None, grid: Optional[Grid2D] = None,
                 max_jitter_rel: float = 1e-8):
        C = np.array(matrix, dtype=np.float64)
        if C.ndim != 2 or C.shape[0] != C.shape[1]:
            raise ValidationError("covariance must be a square matrix")
        if not np.array_equal(C, C.T):
            raise ValidationError("covariance must be exactly symmetric")
        self.params = params
        self.grid = grid
        self.dense_C = C
        self.dense_C.flags.writeable = False
        self.jitter, self.sqrt_factor = self._factorize(C, max_jitter_rel)

    @property
    def size(self) -> int:
        return self.dense_C.shape[0]

    @staticmethod
    def _factorize(C, max_jitter_rel):
        scale = float(np.mean(np.diag(C)))
        ladder = [0.0]
        j = 1e-12
        while j <= max_jitter_rel * (1 + 1e-9):
            ladder.append(j * scale)
            j *= 10.0
        eye = np.eye(C.shape[0])
        for jitter in ladder:
            try:
                L = np.linalg.cholesky(C + jitter * eye if jitter else C)
            except np.linalg.LinAlgError:
                continue
            return jitter, L
        raise ConditioningError(
            f"Cholesky failed with jitter up to {ladder[-1]:.3e}; covariance is not numerically SPD",
            condition=np.linalg.cond(C))

    def apply(self, v):
        return self.dense_C @ np.asarray(v, dtype=np.float64)

    def solve(self, v):
        v = np.asarray(v, dtype=np.float64)
        return linalg.cho_solve((self.sqrt_factor, True), v, check_finite=False)

    def weighted_norm2(self, v) -> float:
        """``<v, C^{-1} v>`` using the jittered inverse."""
        w = linalg.solve_triangular(self.sqrt_factor, np.asarray(v, dtype=np.float64), lower=True)
        return float(w @ w)

    def sample(self, rng: np.random.Generator, size: Optional[int] = None) -> np.ndarray:
        shape = (self.size,) if size is None else (self.size, size)
        return self.sqrt_factor @ rng.standard_normal(shape)

    @classmethod
    def identity(cls, n: int) -> "CovarianceOperator":
        return cls(np.eye(n))


def _pairwise_distances(grid: Grid2D) -> np.ndarray:
    # distances on a uniform grid depend only on |di|, |dj|
    di = np.arange(grid.nx) * grid.hx
    dj = np.arange(grid.ny) * grid.hy
    offsets = np.sqrt(dj[:, None] ** 2 + di[None, :] ** 2)  # (ny, nx)
    ii = np.tile(np.arange(grid.nx), grid.ny)
    jj = np.repeat(np.arange(grid.ny), grid.nx)
    return offsets, np.abs(jj[:, None] - jj[None, :]), np.abs(ii[:, None] - ii[None, :])


def assemble_covariance(grid: Grid2D, params: MaternParams, max_nodes: int = MAX_DENSE_NODES,
                        max_jitter_rel: float = 1e-8) -> CovarianceOperator:
    """Collocated Matérn covariance ``C[a, b] = c(|x_a - x_b|)`` over all grid nodes."""
    if grid.size > max_nodes:
        raise CapacityError(f"{grid.size} nodes exceeds dense covariance guard of {max_nodes}")
    offsets, dj, di = _pairwise_distances(grid)
    table = matern_kernel(params, offsets)
    C = table[dj, di]
    return CovarianceOperator(C, params=params, grid=grid, max_jitter_rel=max_jitter_rel)


def apply_C(cov: CovarianceOperator, v):
    return cov.apply(v)


def solve_C(cov: CovarianceOperator, v):
    return cov.solve(v)


def sample_grf(cov: CovarianceOperator, seed: int, run_id: int = 0) -> GridField:
    """Zero-mean Gaussian random field with covariance ``C`` (jittered)."""
    if cov.grid is None:
        raise ValidationError("sampling a GridField needs a grid-backed covariance")
    rng = make_rng(seed, "truth", run_id)
    return GridField(cov.grid, cov.sample(rng))
