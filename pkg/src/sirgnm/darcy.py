"""Darcy-flow forward operator ``-div(kappa grad p) = f`` on a rectangle.

Discretization: vertex-centred finite volumes on the node grid with
harmonic averaging of ``kappa`` across dual-cell faces.  Boundary data:

* ``p = dirichlet_value`` on the bottom edge ``y = 0``;
* inflow flux ``-kappa dp/dx = inflow_flux`` on the left edge ``x = 0``;
* no-flow on the right and top edges.

The Dirichlet nodes are eliminated symmetrically (identity rows, columns
moved to the right-hand side) so the assembled matrix stays symmetric and
the adjoint solve reuses the forward factorization.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .core import (CapacityError, ConditioningError, Grid2D, GridField, ValidationError,
                   make_rng)

KAPPA_FLOOR = 1e-3
PARAMETERIZATIONS = ("identity_floor", "exp")
MAX_DENSE_JACOBIAN = 50_000_000


@dataclass(frozen=True)
class DarcyBoundary:
    """Boundary and source data; defaults reproduce the groundwater benchmark."""

    dirichlet_value: float = 100.0
    inflow_flux: float = 500.0
    source_breaks: tuple = (4.0, 5.0)
    source_values: tuple = (0.0, 137.0, 274.0)

    def __post_init__(self):
        if len(self.source_values) != len(self.source_breaks) + 1:
            raise ValidationError("need one more source value than breakpoints")

    def source(self, y):
        # right-continuous: the upper value applies on a breakpoint
        idx = np.searchsorted(np.asarray(self.source_breaks), y, side="right")
        return np.asarray(self.source_values, dtype=np.float64)[idx]


def parameterize(u, kind: str = "identity_floor", floor: float = KAPPA_FLOOR):
    """Map the unknown to permeability and return ``(kappa, dkappa/du)``."""
    u = np.asarray(u, dtype=np.float64)
    if kind == "identity_floor":
        kappa = np.maximum(u, floor)
        return kappa, (u > floor).astype(np.float64)
    if kind == "exp":
        kappa = np.exp(u)
        return kappa, kappa
    raise ValidationError(f"unknown parameterization {kind!r}")


class _Faces:
    """Dual-cell faces of the node grid: endpoints and geometric factor ``|face| / h``."""

    def __init__(self, grid: Grid2D):
        nx, ny, hx, hy = grid.nx, grid.ny, grid.hx, grid.hy
        idx = np.arange(grid.size).reshape(ny, nx)
        wy = np.ones(ny)
        wy[[0, -1]] = 0.5
        wx = np.ones(nx)
        wx[[0, -1]] = 0.5
        # faces between (i, j) and (i+1, j): dual face spans hy * wy[j]
        ax, bx = idx[:, :-1].ravel(), idx[:, 1:].ravel()
        gx = np.repeat(wy * hy / hx, nx - 1)
        # faces between (i, j) and (i, j+1): dual face spans hx * wx[i]
        ay, by = idx[:-1, :].ravel(), idx[1:, :].ravel()
        gy = np.tile(wx * hx / hy, ny - 1)
        self.a = np.concatenate([ax, ay])
        self.b = np.concatenate([bx, by])
        self.geom = np.concatenate([gx, gy])
        self.n = self.a.size
        self.area = np.outer(wy * hy, wx * hx).ravel()
        self.left_length = np.zeros(grid.size)
        self.left_length[idx[:, 0]] = wy * hy
        self.dirichlet = idx[0, :].copy()
        self.free = np.ones(grid.size, dtype=bool)
        self.free[self.dirichlet] = False
        n_nodes = grid.size
        f = np.arange(self.n)
        ones = np.ones(self.n)
        self.at_a = sp.csr_matrix((ones, (self.a, f)), shape=(n_nodes, self.n))
        self.at_b = sp.csr_matrix((ones, (self.b, f)), shape=(n_nodes, self.n))
        # signed incidence: +1 at a, -1 at b
        self.incidence = sp.csr_matrix(self.at_a - self.at_b)
        self._build_pattern(n_nodes)

    def _build_pattern(self, n):
        # CSC layout of the Dirichlet-eliminated operator and a sparse map
        # from face transmissibilities to its data array
        f = np.arange(self.n)
        rows = np.concatenate([self.a, self.b, self.a, self.b])
        cols = np.concatenate([self.a, self.b, self.b, self.a])
        sign = np.concatenate([np.ones(2 * self.n), -np.ones(2 * self.n)])
        face = np.concatenate([f, f, f, f])
        keep = self.free[rows] & self.free[cols]
        rows, cols, sign, face = rows[keep], cols[keep], sign[keep], face[keep]
        d = self.dirichlet
        rows_all = np.concatenate([rows, d])
        cols_all = np.concatenate([cols, d])
        key = cols_all.astype(np.int64) * n + rows_all
        uniq, inv = np.unique(key, return_inverse=True)
        self.pattern_indices = (uniq % n).astype(np.int32)
        self.pattern_indptr = np.searchsorted(uniq // n, np.arange(n + 1)).astype(np.int32)
        k = rows.size
        self.pattern_map = sp.csr_matrix((sign, (inv[:k], face)), shape=(uniq.size, self.n))
        self.pattern_const = np.zeros(uniq.size)
        self.pattern_const[inv[k:]] = 1.0


@dataclass(eq=False)
class DarcySystem:
    grid: Grid2D
    kappa: GridField
    assembled_operator: sp.csc_matrix
    rhs: np.ndarray
    boundary: DarcyBoundary = field(default_factory=DarcyBoundary)


_FACE_CACHE: dict = {}


def _faces(grid: Grid2D) -> _Faces:
    if grid not in _FACE_CACHE:
        _FACE_CACHE[grid] = _Faces(grid)
    return _FACE_CACHE[grid]


def _transmissibility(faces: _Faces, kappa: np.ndarray) -> np.ndarray:
    ka, kb = kappa[faces.a], kappa[faces.b]
    return faces.geom * 2.0 * ka * kb / (ka + kb)


def assemble(grid: Grid2D, kappa, boundary: Optional[DarcyBoundary] = None) -> DarcySystem:
    """Assemble the symmetric finite-volume system for permeability ``kappa``."""
    boundary = boundary or DarcyBoundary()
    kappa = np.asarray(getattr(kappa, "values", kappa), dtype=np.float64)
    if kappa.size != grid.size:
        raise ValidationError(f"kappa has {kappa.size} values, grid has {grid.size} nodes")
    if not np.all(np.isfinite(kappa)):
        raise ValidationError("kappa contains non-finite values")
    if np.any(kappa <= 0):
        raise ValidationError("kappa must be positive; apply the parameterization floor first")
    faces = _faces(grid)
    T = _transmissibility(faces, kappa)
    n = grid.size
    data = faces.pattern_map @ T + faces.pattern_const
    A = sp.csc_matrix((data, faces.pattern_indices, faces.pattern_indptr), shape=(n, n))

    _, y = grid.coordinates()
    rhs = boundary.source(y) * faces.area + boundary.inflow_flux * faces.left_length
    p_dir = np.zeros(n)
    p_dir[faces.dirichlet] = boundary.dirichlet_value
    # K p_dir with K = incidence diag(T) incidence^T
    rhs = rhs - faces.incidence @ (T * (faces.incidence.T @ p_dir))
    rhs[~faces.free] = boundary.dirichlet_value
    return DarcySystem(grid, GridField(grid, kappa), A, rhs, boundary)


def solve_pressure(system: DarcySystem, method: str = "sparse", tol: float = 1e-10) -> GridField:
    """Solve the assembled system; ``method="dense"`` is the LU verification path."""
    A, b = system.assembled_operator, system.rhs
    if method == "sparse":
        solve = _factor(A).solve
    elif method == "dense":
        lu = scipy.linalg.lu_factor(A.toarray())
        solve = lambda r: scipy.linalg.lu_solve(lu, r)  # noqa: E731
    else:
        raise ValidationError(f"unknown solve method {method!r}")
    p = _refined(A, solve, b, tol)
    return GridField(system.grid, p)


def _factor(A):
    # the eliminated operator is symmetric positive definite: no pivoting needed
    return spla.splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                     options=dict(SymmetricMode=True))


def _refined(A, solve, b, tol):
    # one step of iterative refinement rescues low-permeability fields
    p = solve(b)
    if _residual_excess(A, p, b, tol) > 1.0:
        p = p + solve(b - A @ p)
    _check_residual(A, p, b, tol)
    return p


def _residual_excess(A, p, b, tol):
    """Residual relative to ``tol * (||A|| ||p|| + ||b||)`` in the max norm.

    For well-scaled fields ``||A|| ||p||`` is comparable to ``||b||``; near the
    permeability floor the pressure grows like ``1 / kappa`` and only the
    normwise backward error stays meaningful.
    """
    res = np.max(np.abs(A @ p - b))
    scale = abs(A).sum(axis=1).max() * np.max(np.abs(p))
    return res / (tol * (scale + np.max(np.abs(b))))


def _check_residual(A, p, b, tol):
    if not np.all(np.isfinite(p)):
        raise ConditioningError("pressure solve produced non-finite values")
    if _residual_excess(A, p, b, tol) > 1.0:
        res = np.max(np.abs(A @ p - b))
        A = sp.csc_matrix(A)
        lu = spla.splu(A)
        inv = spla.LinearOperator(A.shape, matvec=lu.solve, rmatvec=lambda x: lu.solve(x, trans="T"))
        cond = spla.onenormest(A) * spla.onenormest(inv)
        raise ConditioningError(f"pressure residual {res:.3e} exceeds tolerance "
                                f"(condition estimate {cond:.2e})", condition=cond)


# --------------------------------------------------------------------------
# observation operator
# --------------------------------------------------------------------------


def default_locations(grid: Grid2D, per_axis: int = 8) -> np.ndarray:
    """Centres of a ``per_axis x per_axis`` partition of the domain.

    These coincide with grid nodes whenever ``(n - 1)`` is a multiple of
    ``2 * per_axis`` (17x17, 33x33, 65x65 for the default of 8).
    """
    xs = (np.arange(per_axis) + 0.5) * grid.lx / per_axis
    ys = (np.arange(per_axis) + 0.5) * grid.ly / per_axis
    xx, yy = np.meshgrid(xs, ys)
    return np.column_stack([xx.ravel(), yy.ravel()])


class ObservationOperator:
    """Bilinear point evaluation of a grid field at fixed locations."""

    def __init__(self, grid: Grid2D, locations):
        loc = np.array(locations, dtype=np.float64).reshape(-1, 2)
        tol = 1e-12 * max(grid.lx, grid.ly)
        if (np.any(loc[:, 0] < -tol) or np.any(loc[:, 0] > grid.lx + tol)
                or np.any(loc[:, 1] < -tol) or np.any(loc[:, 1] > grid.ly + tol)):
            raise ValidationError("observation locations must lie in the closed domain")
        if len(np.unique(loc, axis=0)) != len(loc):
            raise ValidationError("observation locations must be distinct")
        self.grid = grid
        self.locations = loc
        sx = np.clip(loc[:, 0] / grid.hx, 0, grid.nx - 1)
        sy = np.clip(loc[:, 1] / grid.hy, 0, grid.ny - 1)
        i0 = np.minimum(np.floor(sx).astype(int), grid.nx - 2)
        j0 = np.minimum(np.floor(sy).astype(int), grid.ny - 2)
        tx, ty = sx - i0, sy - j0
        m = len(loc)
        rows = np.repeat(np.arange(m), 4)
        cols = np.column_stack([j0 * grid.nx + i0, j0 * grid.nx + i0 + 1,
                                (j0 + 1) * grid.nx + i0, (j0 + 1) * grid.nx + i0 + 1]).ravel()
        w = np.column_stack([(1 - tx) * (1 - ty), tx * (1 - ty), (1 - tx) * ty, tx * ty]).ravel()
        self.matrix = sp.csr_matrix((w, (rows, cols)), shape=(m, grid.size))
        self.matrix.eliminate_zeros()

    @classmethod
    def lattice(cls, grid: Grid2D, per_axis: int = 8) -> "ObservationOperator":
        return cls(grid, default_locations(grid, per_axis))

    @property
    def m(self) -> int:
        return self.locations.shape[0]

    def __call__(self, field) -> np.ndarray:
        return self.matrix @ np.asarray(getattr(field, "values", field), dtype=np.float64)


# --------------------------------------------------------------------------
# forward model with derivatives
# --------------------------------------------------------------------------


class Linearization:
    """Forward solution at ``u`` plus the machinery for ``J``, ``J^T`` and dense rows.

    With ``R(p, kappa) = 0`` the discrete state equation, ``J v = -O A^{-1}
    (dR/dkappa)(dkappa/du) v``; the adjoint applies the same factors
    transposed, which makes it exact to rounding.
    """

    def __init__(self, model: "DarcyModel", u):
        u = np.asarray(getattr(u, "values", u), dtype=np.float64)
        if u.size != model.grid.size:
            raise ValidationError("parameter has wrong length for the grid")
        if not np.all(np.isfinite(u)):
            raise ValidationError("parameter contains non-finite values")
        self.model = model
        self.u = u
        self.kappa, self.dkappa = parameterize(u, model.parameterization, model.kappa_floor)
        system = assemble(model.grid, self.kappa, model.boundary)
        self.lu = _factor(system.assembled_operator)
        self.pressure = _refined(system.assembled_operator, self.lu.solve, system.rhs, 1e-10)
        self.values = model.obs(self.pressure)
        faces = _faces(model.grid)
        self._free = faces.free.astype(np.float64)
        ka, kb = self.kappa[faces.a], self.kappa[faces.b]
        s2 = (ka + kb) ** 2
        dTa = faces.geom * 2.0 * kb * kb / s2
        dTb = faces.geom * 2.0 * ka * ka / s2
        g = faces.incidence.T @ self.pressure  # p_a - p_b per face
        self._faces = faces
        # sensitivity of each face flux to the kappa at its two ends
        self._ga, self._gb = dTa * g, dTb * g

    def _M(self, lam):
        # (dR/dkappa)^T lam, applied face by face; lam may hold several columns
        faces = self._faces
        dl = faces.incidence.T @ lam
        if dl.ndim == 1:
            return faces.at_a @ (self._ga * dl) + faces.at_b @ (self._gb * dl)
        return faces.at_a @ (self._ga[:, None] * dl) + faces.at_b @ (self._gb[:, None] * dl)

    def _MT(self, v):
        faces = self._faces
        return faces.incidence @ (self._ga * v[faces.a] + self._gb * v[faces.b])

    def apply(self, v) -> np.ndarray:
        v = np.asarray(getattr(v, "values", v), dtype=np.float64)
        r = self._MT(self.dkappa * v)
        dp = -self.lu.solve(self._free * r)
        return self.model.obs(dp)

    def adjoint(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=np.float64)
        lam = self.lu.solve(self.model.obs.matrix.T @ w) * self._free
        return -self.dkappa * self._M(lam)

    def rows(self, index: Optional[Sequence[int]] = None) -> np.ndarray:
        """Dense Jacobian rows ``J[index, :]`` (all rows when ``index`` is None)."""
        O = self.model.obs.matrix
        if index is not None:
            O = O[np.asarray(index)]
        rhs = O.T.toarray()
        lam = self.lu.solve(rhs) * self._free[:, None]
        return (-(self.dkappa[:, None]) * self._M(lam)).T


class DarcyModel:
    """Parameter-to-observation map ``F(u) = O p(kappa(u))``."""

    def __init__(self, grid: Grid2D, obs: Optional[ObservationOperator] = None,
                 boundary: Optional[DarcyBoundary] = None,
                 parameterization: str = "identity_floor", kappa_floor: float = KAPPA_FLOOR):
        if parameterization not in PARAMETERIZATIONS:
            raise ValidationError(f"parameterization must be one of {PARAMETERIZATIONS}")
        self.grid = grid
        self.obs = obs if obs is not None else ObservationOperator.lattice(grid)
        self.boundary = boundary or DarcyBoundary()
        self.parameterization = parameterization
        self.kappa_floor = kappa_floor

    @property
    def m(self) -> int:
        return self.obs.m

    @property
    def n_params(self) -> int:
        return self.grid.size

    def linearize(self, u) -> Linearization:
        return Linearization(self, u)

    def pressure(self, u) -> GridField:
        kappa, _ = parameterize(getattr(u, "values", u), self.parameterization, self.kappa_floor)
        return solve_pressure(assemble(self.grid, kappa, self.boundary))

    def forward(self, u) -> np.ndarray:
        return self.obs(self.pressure(u))

    def evaluate(self, u, rows=None):
        """``(F(u), J[rows])`` from one factorization; ``rows=None`` means all."""
        lin = self.linearize(u)
        return lin.values, lin.rows(rows)

    def jacobian_apply(self, u, v) -> np.ndarray:
        return self.linearize(u).apply(v)

    def jacobian_adjoint_apply(self, u, w) -> GridField:
        return GridField(self.grid, self.linearize(u).adjoint(w))

    def dense_jacobian(self, u, max_entries: int = MAX_DENSE_JACOBIAN) -> np.ndarray:
        if self.m * self.grid.size > max_entries:
            raise CapacityError(f"dense Jacobian of {self.m}x{self.grid.size} exceeds guard")
        return self.linearize(u).rows()


def forward(kappa_param, obs_op: ObservationOperator, **kwargs) -> np.ndarray:
    grid = kappa_param.grid
    return DarcyModel(grid, obs_op, **kwargs).forward(kappa_param)


def jacobian_apply(u, v, obs_op: ObservationOperator, **kwargs) -> np.ndarray:
    return DarcyModel(u.grid, obs_op, **kwargs).jacobian_apply(u, v)


def jacobian_adjoint_apply(u, w, obs_op: ObservationOperator, **kwargs) -> GridField:
    return DarcyModel(u.grid, obs_op, **kwargs).jacobian_adjoint_apply(u, w)


def dense_jacobian(u, obs_op: ObservationOperator, **kwargs) -> np.ndarray:
    return DarcyModel(u.grid, obs_op, **kwargs).dense_jacobian(u)


# --------------------------------------------------------------------------
# ground truths
# --------------------------------------------------------------------------

TRUTH_KINDS = ("smooth", "levelset")


def smooth_truth(grid: Grid2D) -> GridField:
    """Two Gaussian bumps, evaluated in coordinates normalized to the unit square."""
    x, y = grid.coordinates()
    xh, yh = x / grid.lx, y / grid.ly
    v = (np.exp(-100.0 * ((xh - 0.3) ** 2 + (yh - 0.7) ** 2))
         + 0.5 * np.exp(-100.0 * ((xh - 0.7) ** 2 + (yh - 0.35) ** 2)))
    return GridField(grid, v)


def ground_truth(kind: str, grid: Grid2D, covariance=None, seed: Optional[int] = None,
                 kappa_low: float = 1.0, kappa_high: float = 10.0, run_id: int = 0) -> GridField:
    if kind == "smooth":
        return smooth_truth(grid)
    if kind == "levelset":
        if covariance is None or seed is None:
            raise ValidationError("level-set truth needs a covariance and a seed")
        rng = make_rng(seed, "truth", run_id)
        z = covariance.sample(rng)
        return GridField(grid, np.where(z < 0, kappa_low, kappa_high))
    raise ValidationError(f"truth kind must be one of {TRUTH_KINDS}")
