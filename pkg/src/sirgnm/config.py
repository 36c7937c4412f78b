"""Experiment configuration: strict TOML parsing and a matching writer.

Every section and key is checked against the dataclass fields; unknown or
mistyped entries are reported with the line they appear on.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, fields, replace
from typing import Any, Optional

import tomli

from .core import SolverConfig, StepSchedule, ValidationError
from .covariance import MaternParams
from .darcy import PARAMETERIZATIONS, TRUTH_KINDS


class ConfigError(ValidationError):
    """Invalid configuration, optionally anchored to a line of the source file."""

    def __init__(self, message: str, line: Optional[int] = None, source: str = "<config>"):
        self.line = line
        self.source = source
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {message}")


@dataclass(frozen=True)
class ProblemConfig:
    grid_n: int = 33
    domain_size: float = 6.0
    obs_count: int = 64
    truth_kind: str = "levelset"
    truth_seed: int = 7
    kappa_low: float = 1.0
    kappa_high: float = 10.0
    parameterization: str = "identity_floor"
    u0: Optional[float] = None  # None: 1 for the level-set truth, 0.1 for the smooth one

    def __post_init__(self):
        if self.grid_n < 3:
            raise ValidationError("grid_n must be at least 3")
        if not self.domain_size > 0:
            raise ValidationError("domain_size must be positive")
        k = math.isqrt(self.obs_count)
        if self.obs_count < 1 or k * k != self.obs_count:
            raise ValidationError("obs_count must be a perfect square (square measurement lattice)")
        if self.truth_kind not in TRUTH_KINDS:
            raise ValidationError(f"truth_kind must be one of {TRUTH_KINDS}")
        if not 0 < self.kappa_low < self.kappa_high:
            raise ValidationError("need 0 < kappa_low < kappa_high")
        if self.parameterization not in PARAMETERIZATIONS:
            raise ValidationError(f"parameterization must be one of {PARAMETERIZATIONS}")
        if self.truth_seed < 0:
            raise ValidationError("truth_seed must be non-negative")

    def initial_value(self, truth_kind: Optional[str] = None) -> float:
        if self.u0 is not None:
            return self.u0
        return 0.1 if (truth_kind or self.truth_kind) == "smooth" else 1.0


@dataclass(frozen=True)
class NoiseConfig:
    delta: float = 0.1
    sigma_stream: float = 0.1

    def __post_init__(self):
        if not (self.delta >= 0 and self.sigma_stream >= 0):
            raise ValidationError("noise levels must be non-negative")


@dataclass(frozen=True)
class OutputConfig:
    dir: str = "out"
    emit_svg: bool = True
    record_timing: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    problem: ProblemConfig = field(default_factory=ProblemConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    matern: MaternParams = field(default_factory=MaternParams)
    solver: SolverConfig = field(default_factory=lambda: SolverConfig(sketch_batch=32))
    replicates: int = 20
    workers: int = 1
    output: OutputConfig = field(default_factory=OutputConfig)

    def __post_init__(self):
        if self.replicates < 1:
            raise ValidationError("replicates must be at least 1")
        if self.workers < 1:
            raise ValidationError("workers must be at least 1")


# flat [solver] keys -> (target, field name)
_SOLVER_KEYS = {
    "variant": ("solver", "variant"),
    "max_iters": ("solver", "max_iters"),
    "stop_rel_err": ("solver", "stop_rel_err"),
    "sketch_batch": ("solver", "sketch_batch"),
    "sketch_mode": ("solver", "sketch_mode"),
    "seed": ("solver", "seed"),
    "lm_prior": ("solver", "lm_prior"),
    "schedule": ("schedule", "kind"),
    "alpha0": ("schedule", "alpha0"),
    "gamma": ("schedule", "gamma"),
    "power_exponent": ("schedule", "power_exponent"),
}

_SECTIONS = {"problem": ProblemConfig, "noise": NoiseConfig, "matern": MaternParams,
             "output": OutputConfig}
_TOP_SCALARS = ("replicates", "workers")


def _expected_type(cls, name):
    default = {f.name: f for f in fields(cls)}[name]
    ann = str(default.type)
    if "bool" in ann:
        return bool
    if "int" in ann:
        return int
    if "float" in ann:
        return float
    return str


def _coerce(value, kind, key, locate):
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false", locate())
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer", locate())
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number", locate())
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{key} must be a string", locate())
    return value


class _Locator:
    """Maps ``(section, key)`` to the 1-based line where it is written."""

    def __init__(self, text: str):
        self.lines = text.splitlines()

    def find(self, section: Optional[str], key: Optional[str] = None) -> Optional[int]:
        current = None
        header = re.compile(r"^\s*\[\s*([A-Za-z0-9_.-]+)\s*\]")
        for no, line in enumerate(self.lines, 1):
            m = header.match(line)
            if m:
                current = m.group(1)
                if key is None and current == section:
                    return no
                continue
            if key is not None and current == section and re.match(rf"^\s*{re.escape(key)}\s*=", line):
                return no
        return None


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse TOML text into an :class:`ExperimentConfig`, rejecting anything unknown."""
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"syntax error: {exc}", int(m.group(1)) if m else None, source) from exc
    loc = _Locator(text)

    def err(msg, section, key=None):
        line = loc.find(section, key)
        if line is None and key is not None:
            line = loc.find(section)
        return ConfigError(msg, line, source)

    kwargs: dict[str, Any] = {}
    for top in doc:
        if top not in _SECTIONS and top != "solver" and top not in _TOP_SCALARS:
            raise err(f"unknown key or section {top!r}", top if isinstance(doc[top], dict) else None, top)

    for name, cls in _SECTIONS.items():
        section = doc.get(name, {})
        if not isinstance(section, dict):
            raise err(f"{name} must be a table", None, name)
        known = {f.name for f in fields(cls)}
        values = {}
        for key, value in section.items():
            if key not in known:
                raise err(f"unknown key {name}.{key}", name, key)
            values[key] = _coerce(value, _expected_type(cls, key), f"{name}.{key}",
                                  lambda k=key: loc.find(name, k))
        try:
            kwargs[name] = cls(**values)
        except (ValidationError, TypeError) as exc:
            bad = next(iter(values), None)
            raise err(f"invalid [{name}] section: {exc}", name, bad) from exc

    solver = doc.get("solver", {})
    if not isinstance(solver, dict):
        raise err("solver must be a table", None, "solver")
    sched_kw, solver_kw = {}, {}
    for key, value in solver.items():
        if key not in _SOLVER_KEYS:
            raise err(f"unknown key solver.{key}", "solver", key)
        target, fname = _SOLVER_KEYS[key]
        cls = StepSchedule if target == "schedule" else SolverConfig
        kind = _expected_type(cls, fname)
        coerced = _coerce(value, kind, f"solver.{key}", lambda k=key: loc.find("solver", k))
        (sched_kw if target == "schedule" else solver_kw)[fname] = coerced
    if "sketch_batch" not in solver_kw and solver_kw.get("variant", "SIRGNM") in ("SIRGNM", "SdIRGNM"):
        solver_kw["sketch_batch"] = 32
    try:
        schedule = StepSchedule(**sched_kw)
        kwargs["solver"] = SolverConfig(schedule=schedule, **solver_kw)
    except ValidationError as exc:
        raise err(f"invalid [solver] section: {exc}", "solver") from exc

    for key in _TOP_SCALARS:
        if key in doc:
            kwargs[key] = _coerce(doc[key], int, key, lambda k=key: loc.find(None, k))
    try:
        config = ExperimentConfig(**kwargs)
    except ValidationError as exc:
        raise ConfigError(str(exc), None, source) from exc
    return config


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", None, str(path)) from exc
    return parse_config(text, str(path))


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    return '"' + str(v).replace("\\", "\\\\").replace('"', '\\"') + '"'


def dump_config(config: ExperimentConfig) -> str:
    """TOML text that :func:`parse_config` maps back to ``config``."""
    out = [f"replicates = {config.replicates}", f"workers = {config.workers}", ""]
    for name in _SECTIONS:
        out.append(f"[{name}]")
        obj = getattr(config, name)
        for f in fields(obj):
            v = getattr(obj, f.name)
            if v is not None:
                out.append(f"{f.name} = {_toml_value(v)}")
        out.append("")
    out.append("[solver]")
    s = config.solver
    for key, (target, fname) in _SOLVER_KEYS.items():
        v = getattr(s.schedule if target == "schedule" else s, fname)
        if v is not None:
            out.append(f"{key} = {_toml_value(v)}")
    return "\n".join(out) + "\n"


def with_overrides(config: ExperimentConfig, **solver_changes) -> ExperimentConfig:
    return replace(config, solver=replace(config.solver, **solver_changes))
