"""Shared domain types: grids, fields, observations, schedules and configuration.

Every value type here serializes to a tagged JSON document through
:func:`dumps` / :func:`loads`; the two mutable types (``ObservationStream``
and ``SolverState``) serialize their full state so a stream can be resumed.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np

__all__ = [
    "ValidationError",
    "ConditioningError",
    "CapacityError",
    "DivergenceError",
    "Grid2D",
    "GridField",
    "Observation",
    "ObservationStream",
    "StepSchedule",
    "SolverConfig",
    "SolverState",
    "VARIANTS",
    "grid_point",
    "schedule_alpha",
    "draw_observation",
    "make_rng",
    "dumps",
    "loads",
]


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


class ConditioningError(ArithmeticError):
    """A linear system could not be solved to the required accuracy."""

    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class CapacityError(MemoryError):
    """A dense representation would exceed the configured size guard."""


class DivergenceError(ArithmeticError):
    """The iteration produced a non-finite or runaway iterate."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


# Named sub-streams of the counter-based generator.  Keys are part of the
# reproducibility contract: changing them changes every seeded result.
STREAM_KEYS = {"truth": 1, "data": 2, "stream": 3, "sketch": 4, "probe": 5}


def make_rng(seed: int, stream: str | int, *counters: int) -> np.random.Generator:
    """Philox generator addressed by ``(seed, stream, *counters)``.

    Any two distinct addresses yield statistically independent streams, and
    the same address always yields the same stream.
    """
    key = STREAM_KEYS[stream] if isinstance(stream, str) else int(stream)
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1),
                                spawn_key=(key, *(int(c) for c in counters)))
    return np.random.Generator(np.random.Philox(ss))


# --------------------------------------------------------------------------
# grids and fields
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Grid2D:
    """Uniform node grid on ``[0, lx] x [0, ly]``.

    Nodes are numbered row-major with ``i`` running along x fastest:
    ``k = j * nx + i``.
    """

    nx: int
    ny: int
    lx: float = 6.0
    ly: float = 6.0

    def __post_init__(self):
        if int(self.nx) != self.nx or int(self.ny) != self.ny:
            raise ValidationError("node counts must be integers")
        if self.nx < 3 or self.ny < 3:
            raise ValidationError(f"grid needs at least 3x3 nodes, got {self.nx}x{self.ny}")
        if not (self.lx > 0 and self.ly > 0) or not math.isfinite(self.lx * self.ly):
            raise ValidationError("domain lengths must be positive and finite")

    @property
    def hx(self) -> float:
        return self.lx / (self.nx - 1)

    @property
    def hy(self) -> float:
        return self.ly / (self.ny - 1)

    @property
    def size(self) -> int:
        return self.nx * self.ny

    @property
    def shape(self) -> tuple[int, int]:
        """Array shape ``(ny, nx)`` of a field reshaped row-major."""
        return (self.ny, self.nx)

    def index(self, i: int, j: int) -> int:
        self._check(i, j)
        return j * self.nx + i

    def ij(self, k: int) -> tuple[int, int]:
        if not 0 <= k < self.size:
            raise IndexError(f"node index {k} out of range [0, {self.size})")
        j, i = divmod(int(k), self.nx)
        return i, j

    def point(self, i: int, j: int) -> tuple[float, float]:
        self._check(i, j)
        return (i * self.hx, j * self.hy)

    def coordinates(self) -> tuple[np.ndarray, np.ndarray]:
        """Flat x and y coordinate arrays of all nodes, in node order."""
        x = np.arange(self.nx) * self.hx
        y = np.arange(self.ny) * self.hy
        xx, yy = np.meshgrid(x, y)
        return xx.ravel(), yy.ravel()

    def _check(self, i, j):
        if not (0 <= i < self.nx and 0 <= j < self.ny):
            raise IndexError(f"node ({i}, {j}) outside {self.nx}x{self.ny} grid")


def grid_point(grid: Grid2D, i: int, j: int) -> tuple[float, float]:
    """Physical coordinate of node ``(i, j)``."""
    return grid.point(i, j)


@dataclass(frozen=True, eq=False)
class GridField:
    """Scalar field sampled at the nodes of a :class:`Grid2D`."""

    grid: Grid2D
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64).ravel()
        if v.size != self.grid.size:
            raise ValidationError(f"field has {v.size} values, grid has {self.grid.size} nodes")
        if not np.all(np.isfinite(v)):
            raise ValidationError("field contains non-finite values")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, grid: Grid2D, value: float) -> "GridField":
        return cls(grid, np.full(grid.size, float(value)))

    def as_array(self) -> np.ndarray:
        """Values reshaped to ``(ny, nx)``."""
        return self.values.reshape(self.grid.shape)

    def with_values(self, values) -> "GridField":
        return GridField(self.grid, values)

    def __eq__(self, other):
        if not isinstance(other, GridField):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.values, other.values)

    __hash__ = None


# --------------------------------------------------------------------------
# observations
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Observation:
    """A single noisy data vector ``y = F(u_true) + noise`` with its locations."""

    locations: np.ndarray
    values: np.ndarray
    noise_delta: float = 0.0

    def __post_init__(self):
        loc = np.array(self.locations, dtype=np.float64).reshape(-1, 2)
        val = np.array(self.values, dtype=np.float64).ravel()
        if loc.shape[0] != val.size:
            raise ValidationError(f"{loc.shape[0]} locations but {val.size} values")
        if len(np.unique(loc, axis=0)) != loc.shape[0]:
            raise ValidationError("observation locations must be distinct")
        if not (self.noise_delta >= 0):
            raise ValidationError("noise_delta must be non-negative")
        loc.flags.writeable = False
        val.flags.writeable = False
        object.__setattr__(self, "locations", loc)
        object.__setattr__(self, "values", val)

    @property
    def m(self) -> int:
        return self.values.size

    def __eq__(self, other):
        if not isinstance(other, Observation):
            return NotImplemented
        return (np.array_equal(self.locations, other.locations)
                and np.array_equal(self.values, other.values)
                and self.noise_delta == other.noise_delta)

    __hash__ = None


class ObservationStream:
    """Sequential observations ``Y_i = y_true + sigma * xi_i`` and their running mean.

    Draw ``i`` (1-based) uses the generator addressed by ``(seed, "stream",
    run_id, i)``, so any prefix of the sequence can be regenerated from the
    seed alone.
    """

    def __init__(self, truth_output, sigma: float, seed: int, run_id: int = 0):
        self.truth_output = np.array(truth_output, dtype=np.float64).ravel()
        if not sigma >= 0:
            raise ValidationError("sigma must be non-negative")
        self.sigma = float(sigma)
        self.seed = int(seed)
        self.run_id = int(run_id)
        self.count = 0
        self.running_sum = np.zeros_like(self.truth_output)

    @property
    def m(self) -> int:
        return self.truth_output.size

    def noise(self, i: int) -> np.ndarray:
        """Standard-normal noise vector of draw ``i`` (1-based)."""
        if i < 1:
            raise ValidationError("draw index is 1-based")
        rng = make_rng(self.seed, "stream", self.run_id, i)
        return rng.standard_normal(self.m)

    def draw(self) -> tuple[np.ndarray, np.ndarray]:
        """Emit the next observation; return it together with the new average."""
        self.count += 1
        y = self.truth_output + self.sigma * self.noise(self.count)
        self.running_sum += y
        return y, self.running_sum / self.count

    @property
    def average(self) -> np.ndarray:
        if self.count == 0:
            raise ValidationError("no observations drawn yet")
        return self.running_sum / self.count

    def replay(self, n: int) -> np.ndarray:
        """Regenerate the first ``n`` draws as an ``(n, m)`` array."""
        return np.stack([self.truth_output + self.sigma * self.noise(i) for i in range(1, n + 1)])


def draw_observation(stream: ObservationStream) -> tuple[np.ndarray, np.ndarray]:
    return stream.draw()


# --------------------------------------------------------------------------
# schedules and configuration
# --------------------------------------------------------------------------

SCHEDULE_KINDS = ("constant", "geometric", "power")
_TINY = float(np.finfo(np.float64).tiny)


@dataclass(frozen=True)
class StepSchedule:
    """Regularization schedule ``alpha_n``.

    ``power`` uses ``alpha0 * (n + 1) ** -power_exponent`` so that
    ``alpha_0 = alpha0`` like the other kinds.
    """

    kind: str = "power"
    alpha0: float = 0.5
    gamma: float = 1.0
    power_exponent: float = 0.9

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValidationError(f"schedule kind must be one of {SCHEDULE_KINDS}, got {self.kind!r}")
        if not (self.alpha0 > 0 and math.isfinite(self.alpha0)):
            raise ValidationError("alpha0 must be positive")
        if not (0 < self.gamma <= 1):
            raise ValidationError("gamma must lie in (0, 1]")
        if not self.power_exponent > 0:
            raise ValidationError("power_exponent must be positive")

    def alpha(self, n: int) -> float:
        if n < 0:
            raise ValidationError("iteration index must be non-negative")
        if self.kind == "constant":
            return self.alpha0
        if self.kind == "geometric":
            a = self.alpha0 * self.gamma**n
        else:
            a = self.alpha0 * (n + 1.0) ** (-self.power_exponent)
        # keep alpha_n > 0 once the exact value underflows
        return max(a, _TINY)


def schedule_alpha(schedule: StepSchedule, n: int) -> float:
    return schedule.alpha(n)


VARIANTS = ("IRGNM", "dIRGNM", "SIRGNM", "SdIRGNM")
SKETCH_MODES = ("select", "mask_scaled")


@dataclass(frozen=True)
class SolverConfig:
    variant: str = "SIRGNM"
    schedule: StepSchedule = field(default_factory=StepSchedule)
    max_iters: int = 2000
    stop_rel_err: Optional[float] = None
    sketch_batch: Optional[int] = None
    sketch_mode: str = "select"
    seed: int = 0
    lm_prior: bool = False  # prior centre follows the iterate (Levenberg-Marquardt style)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if int(self.max_iters) != self.max_iters or self.max_iters < 1:
            raise ValidationError("max_iters must be a positive integer")
        if self.stop_rel_err is not None and not (0 < self.stop_rel_err < 1):
            raise ValidationError("stop_rel_err must lie in (0, 1)")
        if self.stochastic:
            if self.sketch_batch is None or self.sketch_batch < 1:
                raise ValidationError(f"{self.variant} requires a positive sketch_batch")
        elif self.sketch_batch is not None:
            raise ValidationError(f"{self.variant} does not take a sketch_batch")
        if self.sketch_mode not in SKETCH_MODES:
            raise ValidationError(f"sketch_mode must be one of {SKETCH_MODES}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValidationError("seed must be an unsigned 64-bit integer")

    @property
    def stochastic(self) -> bool:
        return self.variant in ("SIRGNM", "SdIRGNM")

    @property
    def dynamic(self) -> bool:
        return self.variant in ("dIRGNM", "SdIRGNM")


@dataclass
class SolverState:
    u_current: GridField
    schedule: StepSchedule
    iter: int = 0
    history: list = field(default_factory=list)

    @property
    def alpha_current(self) -> float:
        return self.schedule.alpha(self.iter)

    def advance(self, u_next: GridField) -> None:
        self.u_current = u_next
        self.iter += 1


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------


def _encode(obj: Any) -> Any:
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, ObservationStream):
        return {"__type__": "ObservationStream", "truth_output": obj.truth_output.tolist(),
                "sigma": obj.sigma, "seed": obj.seed, "run_id": obj.run_id, "count": obj.count,
                "running_sum": obj.running_sum.tolist()}
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        out = {"__type__": type(obj).__name__}
        for f in dataclasses.fields(obj):
            out[f.name] = _encode(getattr(obj, f.name))
        return out
    if isinstance(obj, (list, tuple)):
        return [_encode(x) for x in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj


def _registry() -> dict:
    from . import diagnostics  # local import: diagnostics depends on core

    types = [Grid2D, GridField, Observation, StepSchedule, SolverConfig, SolverState,
             diagnostics.MetricsRecord]
    return {t.__name__: t for t in types}


def _decode(obj: Any, registry: dict) -> Any:
    if isinstance(obj, list):
        return [_decode(x, registry) for x in obj]
    if not isinstance(obj, dict):
        return obj
    name = obj.get("__type__")
    kwargs = {k: _decode(v, registry) for k, v in obj.items() if k != "__type__"}
    if name is None:
        return kwargs
    if name == "ObservationStream":
        s = ObservationStream(kwargs["truth_output"], kwargs["sigma"], kwargs["seed"], kwargs["run_id"])
        s.count = kwargs["count"]
        s.running_sum = np.array(kwargs["running_sum"], dtype=np.float64)
        return s
    if name not in registry:
        raise ValidationError(f"unknown serialized type {name!r}")
    cls = registry[name]
    for f in dataclasses.fields(cls):
        if f.name in kwargs and isinstance(kwargs[f.name], str) and f.type in ("float", "Optional[float]"):
            kwargs[f.name] = float(kwargs[f.name])
    return cls(**kwargs)


def dumps(obj: Any) -> str:
    """Serialize a core value to a tagged JSON document."""
    return json.dumps(_encode(obj), sort_keys=True)


def loads(text: str) -> Any:
    return _decode(json.loads(text), _registry())


def as_field(grid: Grid2D, values: Sequence[float] | np.ndarray | GridField) -> GridField:
    if isinstance(values, GridField):
        return values
    return GridField(grid, values)
