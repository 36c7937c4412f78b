"""Command-line harness: ``run``, ``sweep``, ``compare`` and ``check``.

Exit codes: 0 on success (early stopping included), 1 when a ``check``
suite fails, 2 for an invalid configuration or argument, 3 when a solver
run diverges.  On divergence every output file is still written, with the
trace cut at the last finite iterate.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import report
from .checks import run_checks
from .config import ConfigError, ExperimentConfig, load_config
from .core import VARIANTS, ValidationError
from .covariance import kernel_table
from .diagnostics import replicate_expectation
from .experiment import (TRUTH_LABELS, build_problem, replicate_tasks, run_tasks, solver_for,
                         worker_count)

log = logging.getLogger("sirgnm")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3
FULL_FIDELITY_ITERS = 10_000
TRUTH_NAMES = {"discontinuous": "levelset", "levelset": "levelset", "smooth": "smooth"}


def _load(args) -> ExperimentConfig:
    config = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        config = replace(config, solver=replace(config.solver, seed=args.seed))
    if getattr(args, "full_fidelity", False):
        config = replace(config, solver=replace(config.solver, max_iters=FULL_FIDELITY_ITERS))
    if getattr(args, "out", None):
        config = replace(config, output=replace(config.output, dir=args.out))
    return config


def _summary_rows(results, record_timing):
    for r in results:
        rel = [rec.rel_err for rec in r.history]
        yield (r.run_id, r.variant, TRUTH_LABELS[r.truth_kind], r.batch, r.status, r.final.iter,
               r.final.rel_err, float(np.nanmin(rel)), r.final.residual_t,
               r.solver_ms if record_timing else 0.0)


def _report_divergence(results) -> int:
    bad = [r for r in results if r.status == "diverged"]
    for r in bad:
        log.error("%s replicate %d (%s) diverged: %s", r.variant, r.run_id, TRUTH_LABELS[r.truth_kind],
                  r.message)
    return EXIT_DIVERGED if bad else EXIT_OK


def cmd_run(args) -> int:
    config = _load(args)
    out = Path(config.output.dir)
    problem = build_problem(config)
    solver = config.solver
    if solver.stochastic and solver.sketch_batch > problem.model.m:
        raise ConfigError(f"sketch_batch {solver.sketch_batch} exceeds {problem.model.m} observations",
                          None, str(args.config))
    results = run_tasks(replicate_tasks(config, solver), worker_count(config))
    timing = config.output.record_timing
    first = results[0]
    report.write_trace(out / "trace.csv", first.history, timing)
    report.write_csv(out / "summary.csv", report.SUMMARY_COLUMNS, _summary_rows(results, timing))
    report.write_field(out / "truth.csv", problem.grid, problem.truth)
    report.write_field(out / "reconstruction.csv", problem.grid, first.u)
    diag = float(np.hypot(config.problem.domain_size, config.problem.domain_size))
    report.write_csv(out / "kernel.csv", report.KERNEL_COLUMNS, kernel_table(config.matern, diag, 101))
    if config.output.emit_svg:
        lo, hi = float(np.min(problem.truth)), float(np.max(problem.truth))
        report.field_raster(out / "truth.svg", problem.grid, problem.truth, "truth", lo, hi)
        report.field_raster(out / "reconstruction.svg", problem.grid, first.u,
                            f"{solver.variant} reconstruction", lo, hi)
        series = {f"replicate {r.run_id}": ([h.iter for h in r.history], [h.rel_err for h in r.history])
                  for r in results[:6]}
        report.line_chart(out / "convergence.svg", series, "relative error", ylabel="rel_err")
    final = [r.final.rel_err for r in results]
    print(f"{solver.variant} on {TRUTH_LABELS[problem.truth_kind]} truth: "
          f"{len(results)} replicate(s), final rel_err mean {np.mean(final):.4g}, "
          f"min {np.min(final):.4g}, max {np.max(final):.4g}")
    print(f"wrote {out}")
    return _report_divergence(results)


def parse_batches(text: str) -> list:
    try:
        batches = [int(b) for b in text.split(",") if b.strip()]
    except ValueError as exc:
        raise ValidationError(f"--batches must be comma-separated integers, got {text!r}") from exc
    if not batches or any(b < 1 for b in batches):
        raise ValidationError("--batches needs positive integers")
    return batches


def sweep_results(config: ExperimentConfig, batches: Sequence[int], truths: Sequence[str],
                  threshold: float) -> list:
    """``[(truth_kind, requested_batch, results)]`` for every sweep point."""
    tasks, index = [], []
    m = config.problem.obs_count
    for kind in truths:
        for b in batches:
            eff = min(b, m)
            if eff != b:
                log.warning("batch %d exceeds %d observations; running with %d", b, m, eff)
            solver = solver_for(config, "SIRGNM", eff, stop_rel_err=threshold)
            ts = replicate_tasks(config, solver, kind)
            index.append((kind, b, len(tasks), len(tasks) + len(ts)))
            tasks.extend(ts)
    results = run_tasks(tasks, worker_count(config))
    return [(kind, b, results[i:j]) for kind, b, i, j in index]


def cmd_sweep(args) -> int:
    config = _load(args)
    batches = parse_batches(args.batches)
    truths = [TRUTH_NAMES[t] for t in args.truths.split(",")]
    if not 0 < args.threshold < 1:
        raise ValidationError("--threshold must lie in (0, 1)")
    out = Path(config.output.dir)
    points = sweep_results(config, batches, truths, args.threshold)
    timing = config.output.record_timing
    rows, all_results = [], []
    for kind, b, results in points:
        all_results.extend(results)
        rows.append((TRUTH_LABELS[kind], b, float(np.mean([r.final.rel_err for r in results])),
                     float(np.mean([r.final.iter for r in results])),
                     float(np.mean([r.solver_ms for r in results])) if timing else 0.0))
    report.write_csv(out / "table1.csv", report.TABLE_COLUMNS, rows)
    report.write_csv(out / "sweep_replicates.csv", report.SUMMARY_COLUMNS, _summary_rows(all_results, timing))
    print(f"{'truth':<14}{'batch':>6}{'final_rel_err':>15}{'iterations':>12}")
    for row in rows:
        print(f"{row[0]:<14}{row[1]:>6}{row[2]:>15.4f}{row[3]:>12.1f}")
    print(f"wrote {out / 'table1.csv'}")
    return _report_divergence(all_results)


def compare_results(config: ExperimentConfig, variants: Sequence[str] = VARIANTS) -> dict:
    tasks, spans = [], {}
    for v in variants:
        ts = replicate_tasks(config, solver_for(config, v))
        spans[v] = (len(tasks), len(tasks) + len(ts))
        tasks.extend(ts)
    results = run_tasks(tasks, worker_count(config))
    return {v: results[i:j] for v, (i, j) in spans.items()}


def cmd_compare(args) -> int:
    config = _load(args)
    out = Path(config.output.dir)
    by_variant = compare_results(config)
    rows, series, bands, everything = [], {}, {}, []
    for v, results in by_variant.items():
        everything.extend(results)
        s = replicate_expectation([r.history for r in results], keys=("rel_err",))
        mean, lo, hi = s.mean["rel_err"], s.lo["rel_err"], s.hi["rel_err"]
        rows.extend((int(k), v, mean[k], lo[k], hi[k], s.n) for k in s.iters)
        series[v] = (s.iters, mean)
        bands[v] = (s.iters, lo, hi)
    report.write_csv(out / "compare.csv", report.COMPARE_COLUMNS, rows)
    report.write_csv(out / "summary.csv", report.SUMMARY_COLUMNS,
                     _summary_rows(everything, config.output.record_timing))
    if config.output.emit_svg:
        report.line_chart(out / "compare.svg", series,
                          f"mean relative error, {TRUTH_LABELS[config.problem.truth_kind]} truth",
                          ylabel="rel_err", bands=bands)
    for v, results in by_variant.items():
        print(f"{v:<8} final rel_err mean {np.mean([r.final.rel_err for r in results]):.4g}")
    print(f"wrote {out / 'compare.csv'}")
    return _report_divergence(everything)


def cmd_check(args) -> int:
    results = run_checks(fast=args.fast)
    print(f"{'suite':<14}{'status':<8}{'value':>12}{'tolerance':>12}  detail")
    for r in results:
        print(f"{r.name:<14}{'PASS' if r.passed else 'FAIL':<8}{r.value:>12.3e}{r.tolerance:>12.1e}  {r.detail}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sirgnm", description="Stochastic IRGNM experiments on a Darcy inverse problem.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="TOML experiment file")
        sp.add_argument("--out", help="output directory (overrides output.dir)")
        sp.add_argument("--seed", type=int, help="solver seed (overrides solver.seed)")
        sp.add_argument("--full-fidelity", action="store_true",
                        help=f"run {FULL_FIDELITY_ITERS} iterations instead of solver.max_iters")

    sp = sub.add_parser("run", help="one experiment, replicated")
    common(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="mini-batch sweep table")
    common(sp)
    sp.add_argument("--batches", default="16,32,64,128", help="comma-separated batch sizes")
    sp.add_argument("--truths", default="discontinuous,smooth", help="comma-separated truth kinds")
    sp.add_argument("--threshold", type=float, default=0.1, help="stop once rel_err reaches this")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("compare", help="all four variants on identical data")
    common(sp)
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("check", help="self-check suites")
    sp.add_argument("--fast", action="store_true", help="smaller instances")
    sp.set_defaults(func=cmd_check)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "truths", None):
        unknown = [t for t in args.truths.split(",") if t not in TRUTH_NAMES]
        if unknown:
            print(f"error: unknown truth kind(s) {unknown}", file=sys.stderr)
            return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    raise SystemExit(main())
