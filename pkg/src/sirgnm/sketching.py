"""Row-subsampling sketch operators.

``select`` restricts a length-``m`` vector to the drawn indices (the
reduced-row operator).  ``mask_scaled`` keeps length ``m``, zeroes the
unselected entries and multiplies the kept ones by ``scale`` (``m / b`` by
default, which makes the operator unbiased; ``scale = 1`` gives the plain
ones/zeros diagonal).
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Optional

import numpy as np

from .core import SKETCH_MODES, ValidationError


@dataclass(frozen=True, eq=False)
class SketchPlan:
    m: int
    batch: int
    indices: np.ndarray
    mode: str = "select"
    scale: float = 1.0

    def __post_init__(self):
        idx = np.array(self.indices, dtype=np.int64).ravel()
        if self.mode not in SKETCH_MODES:
            raise ValidationError(f"sketch mode must be one of {SKETCH_MODES}")
        if not 1 <= self.batch <= self.m:
            raise ValidationError(f"batch {self.batch} must lie in [1, {self.m}]")
        if idx.size != self.batch or len(np.unique(idx)) != idx.size:
            raise ValidationError("plan needs exactly `batch` distinct indices")
        if idx.size and (idx.min() < 0 or idx.max() >= self.m):
            raise ValidationError("plan index out of range")
        idx = np.sort(idx)
        idx.flags.writeable = False
        object.__setattr__(self, "indices", idx)

    @classmethod
    def full(cls, m: int, mode: str = "select") -> "SketchPlan":
        return cls(m, m, np.arange(m), mode, 1.0)

    @property
    def is_full(self) -> bool:
        return self.batch == self.m

    def mask(self) -> np.ndarray:
        d = np.zeros(self.m)
        d[self.indices] = self.scale
        return d

    def __eq__(self, other):
        if not isinstance(other, SketchPlan):
            return NotImplemented
        return (self.m, self.batch, self.mode, self.scale) == (other.m, other.batch, other.mode, other.scale) \
            and np.array_equal(self.indices, other.indices)

    __hash__ = None


def draw_plan(m: int, batch: int, mode: str, rng: np.random.Generator,
              scale: Optional[float] = None) -> SketchPlan:
    """Uniform subset of ``batch`` indices drawn without replacement."""
    if not 1 <= batch <= m:
        raise ValidationError(f"batch {batch} must lie in [1, {m}]")
    idx = rng.choice(m, size=batch, replace=False)
    if scale is None:
        scale = m / batch if mode == "mask_scaled" else 1.0
    return SketchPlan(m, batch, idx, mode, float(scale))


def _check_len(plan: SketchPlan, g: np.ndarray):
    if g.shape[0] != plan.m:
        raise ValidationError(f"vector has length {g.shape[0]}, plan expects {plan.m}")


def project(plan: SketchPlan, g) -> np.ndarray:
    """Apply the sketch to a vector, or row-wise to a matrix with ``m`` rows."""
    g = np.asarray(g, dtype=np.float64)
    _check_len(plan, g)
    if plan.mode == "select":
        return plan.scale * g[plan.indices] if plan.scale != 1.0 else g[plan.indices]
    d = plan.mask()
    return d[:, None] * g if g.ndim == 2 else d * g


def reduce_data(plan: SketchPlan, z_full) -> np.ndarray:
    """Data vector living in the sketched space, consistent with :func:`project`."""
    return project(plan, z_full)


def enumerate_plans(m: int, batch: int, mode: str = "mask_scaled", scale: Optional[float] = None):
    """Every plan of the given size, each equally likely under :func:`draw_plan`."""
    if scale is None:
        scale = m / batch if mode == "mask_scaled" else 1.0
    for idx in combinations(range(m), batch):
        yield SketchPlan(m, batch, np.array(idx), mode, float(scale))
