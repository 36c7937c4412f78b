import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sirgnm.checks import random_step_instance
from sirgnm.core import (DivergenceError, Grid2D, ObservationStream, SolverConfig, StepSchedule,
                         ValidationError, make_rng)
from sirgnm.covariance import CovarianceOperator, MaternParams, assemble_covariance
from sirgnm.darcy import DarcyModel
from sirgnm.diagnostics import LinearTestOperator
from sirgnm.sketching import SketchPlan
from sirgnm.solver import StepInputs, run, sketch_inputs, sketched_objective, step_primal, step_woodbury


def spd(rng, n):
    G = rng.standard_normal((n, n))
    C = G @ G.T / n + 0.2 * np.eye(n)
    return CovarianceOperator(0.5 * (C + C.T))


def test_small_instance_equivalence(rng):
    n, m = 25, 6
    cov = spd(rng, n)
    inp = StepInputs(rng.standard_normal(n), rng.standard_normal(n), 0.3, rng.standard_normal(m),
                     rng.standard_normal(m), rng.standard_normal((m, n)))
    a, b = step_woodbury(inp, cov), step_primal(inp, cov)
    assert np.linalg.norm(a - b) <= 1e-10 * np.linalg.norm(b)


@settings(max_examples=20)
@given(st.integers(0, 2**32))
def test_equivalence_property(seed):
    inp, cov = random_step_instance(make_rng(seed, "probe"), 60, 12)
    a, b = step_woodbury(inp, cov), step_primal(inp, cov)
    assert np.linalg.norm(a - b) <= 1e-10 * np.linalg.norm(b)


def test_zero_jacobian_returns_prior(rng):
    n = 10
    cov = spd(rng, n)
    u0 = rng.standard_normal(n)
    inp = StepInputs(rng.standard_normal(n), u0, 0.7, rng.standard_normal(3), rng.standard_normal(3),
                     np.zeros((3, n)))
    np.testing.assert_allclose(step_primal(inp, cov), u0, atol=1e-12)
    np.testing.assert_allclose(step_woodbury(inp, cov), u0, atol=1e-12)


def test_large_alpha_pulls_to_prior(rng):
    n = 12
    cov = spd(rng, n)
    un, u0 = rng.standard_normal(n), rng.standard_normal(n)
    inp = StepInputs(un, u0, 1e12, rng.standard_normal(4), rng.standard_normal(4), rng.standard_normal((4, n)))
    out = step_woodbury(inp, cov)
    assert np.linalg.norm(out - u0) <= 1e-6 * np.linalg.norm(un - u0) + 1e-9


def test_zero_driving_residual(rng):
    n, m = 9, 4
    cov = spd(rng, n)
    un, u0, J, F = rng.standard_normal(n), rng.standard_normal(n), rng.standard_normal((m, n)), rng.standard_normal(m)
    z = F + J @ (u0 - un)
    np.testing.assert_allclose(step_woodbury(StepInputs(un, u0, 0.5, z, F, J), cov), u0, atol=1e-12)


def test_rank_one_closed_form(rng):
    n = 7
    j = rng.standard_normal(n)
    j /= np.linalg.norm(j)
    un, u0 = rng.standard_normal(n), rng.standard_normal(n)
    F, z = np.array([0.4]), np.array([1.3])
    r = (z - F - j @ (u0 - un))[0]
    out = step_woodbury(StepInputs(un, u0, 1.0, z, F, j[None, :]), CovarianceOperator.identity(n))
    np.testing.assert_allclose(out, u0 + j * r / 2, atol=1e-14)


def test_step_inputs_validation(rng):
    with pytest.raises(ValidationError):
        StepInputs(np.zeros(3), np.zeros(3), 1.0, np.zeros(2), np.zeros(3), np.zeros((2, 3)))
    with pytest.raises(ValidationError):
        StepInputs(np.zeros(3), np.zeros(3), 0.0, np.zeros(2), np.zeros(2), np.zeros((2, 3)))
    with pytest.raises(ValidationError):
        StepInputs(np.zeros(3), np.zeros(3), 1.0, np.zeros(2), np.zeros(2), np.zeros((2, 4)))


def test_minimizer_beats_perturbations(rng):
    n, m = 20, 5
    cov = spd(rng, n)
    inp = StepInputs(rng.standard_normal(n), rng.standard_normal(n), 0.4, rng.standard_normal(m),
                     rng.standard_normal(m), rng.standard_normal((m, n)))
    u = step_woodbury(inp, cov)
    best = sketched_objective(inp, cov, u)
    for radius in (1e-4, 1e-2, 1.0):
        for _ in range(100):
            xi = rng.standard_normal(n)
            pert = u + radius * np.linalg.norm(u) * xi / np.linalg.norm(xi)
            assert sketched_objective(inp, cov, pert) >= best - 1e-12 * abs(best)


def test_objective_direct_substitution(rng):
    n, m = 6, 3
    cov = spd(rng, n)
    un, u0, F = rng.standard_normal(n), rng.standard_normal(n), rng.standard_normal(m)
    inp = StepInputs(un, u0, 0.8, np.zeros(m), F, rng.standard_normal((m, n)))
    expected = 0.5 * F @ F + 0.5 * 0.8 * cov.weighted_norm2(un - u0)
    assert sketched_objective(inp, cov, un) == pytest.approx(expected, rel=1e-12)


def test_objective_complete_square(rng):
    # with P[g] = Z the data term equals -1/2 ||Z||^2
    n, m = 5, 3
    cov = spd(rng, n)
    un = rng.standard_normal(n)
    F = rng.standard_normal(m)
    inp = StepInputs(un, un, 1.0, F.copy(), F, rng.standard_normal((m, n)))
    assert sketched_objective(inp, cov, un) == pytest.approx(-0.5 * F @ F, rel=1e-12)


def test_select_equals_unscaled_mask(rng):
    n, m = 15, 8
    cov = spd(rng, n)
    un, u0 = rng.standard_normal(n), rng.standard_normal(n)
    z, F = rng.standard_normal(m), rng.standard_normal(m)
    J = rng.standard_normal((m, n))
    idx = [1, 4, 5]
    sel = sketch_inputs(SketchPlan(m, 3, idx, "select"), un, u0, 0.6, z, F, J[idx])
    msk = sketch_inputs(SketchPlan(m, 3, idx, "mask_scaled", 1.0), un, u0, 0.6, z, F, J[idx])
    a, b = step_woodbury(sel, cov), step_woodbury(msk, cov)
    assert np.linalg.norm(a - b) <= 1e-10 * np.linalg.norm(a)


def test_argmin_invariant_under_scaling(rng):
    n, m, c = 10, 4, 3.7
    cov = spd(rng, n)
    un, u0 = rng.standard_normal(n), rng.standard_normal(n)
    z, F, J = rng.standard_normal(m), rng.standard_normal(m), rng.standard_normal((m, n))
    a = step_woodbury(StepInputs(un, u0, 0.5, z, F, J), cov)
    b = step_woodbury(StepInputs(un, u0, 0.5 * c * c, c * z, c * F, c * J), cov)
    assert np.linalg.norm(a - b) <= 1e-10 * np.linalg.norm(a)


def linear_problem(seed=0, n=30, m=12):
    rng = make_rng(seed, "probe", 77)
    op = LinearTestOperator(rng.standard_normal((m, n)))
    truth = rng.standard_normal(n)
    return op, truth


def test_fixed_point_when_prior_is_truth():
    op, truth = linear_problem()
    cfg = SolverConfig("IRGNM", StepSchedule("geometric", 1.0, 0.8), 30)
    res = run(cfg, op, CovarianceOperator.identity(op.n_params), truth, op.forward(truth), truth=truth)
    assert max(r.rel_err for r in res.history) <= 1e-8


def test_full_batch_reduction_linear():
    op, truth = linear_problem()
    y = op.forward(truth) + 0.01 * make_rng(1, "data").standard_normal(op.m)
    cov = CovarianceOperator.identity(op.n_params)
    u0 = np.zeros(op.n_params)
    a = run(SolverConfig("IRGNM", max_iters=40), op, cov, u0, y, truth=truth)
    b = run(SolverConfig("SIRGNM", max_iters=40, sketch_batch=op.m), op, cov, u0, y, truth=truth)
    for ra, rb in zip(a.history, b.history):
        assert abs(ra.rel_err - rb.rel_err) <= 1e-12
    np.testing.assert_allclose(a.u, b.u, rtol=1e-12, atol=1e-12)


def test_run_deterministic_darcy():
    g = Grid2D(9, 9)
    model = DarcyModel(g)
    cov = assemble_covariance(g, MaternParams(nu=1.5, ell=2.0))
    truth = 1 + 0.5 * np.sin(np.arange(g.size) / 7)
    y = model.forward(truth)
    cfg = SolverConfig("SIRGNM", max_iters=15, sketch_batch=20, seed=5)
    a = run(cfg, model, cov, np.ones(g.size), y, truth=truth)
    b = run(cfg, model, cov, np.ones(g.size), y, truth=truth)
    assert [r.row()[:-1] for r in a.history] == [r.row()[:-1] for r in b.history]
    assert all(p == q for p, q in zip(a.plans, b.plans))
    assert len(a.history) == 16 and a.history[-1].iter == 15


def test_history_records_schedule_alpha():
    op, truth = linear_problem()
    sched = StepSchedule("power", 0.5, power_exponent=0.9)
    res = run(SolverConfig("IRGNM", sched, 10), op, CovarianceOperator.identity(op.n_params),
              np.zeros(op.n_params), op.forward(truth), truth=truth)
    assert [r.alpha for r in res.history] == [sched.alpha(n) for n in range(11)]
    assert [r.iter for r in res.history] == list(range(11))


def test_early_stop():
    op, truth = linear_problem(n=10, m=10)
    res = run(SolverConfig("IRGNM", StepSchedule("geometric", 1.0, 0.5), 200, stop_rel_err=0.05),
              op, CovarianceOperator.identity(10), np.zeros(10), op.forward(truth), truth=truth)
    assert res.stopped_early
    assert res.history[-1].rel_err <= 0.05
    assert len(res.history) < 201


def test_dynamic_requires_stream():
    op, truth = linear_problem()
    with pytest.raises(ValidationError):
        run(SolverConfig("dIRGNM"), op, CovarianceOperator.identity(op.n_params), np.zeros(op.n_params),
            op.forward(truth))


def test_batch_larger_than_m_rejected():
    op, truth = linear_problem()
    with pytest.raises(ValidationError):
        run(SolverConfig("SIRGNM", sketch_batch=op.m + 1), op, CovarianceOperator.identity(op.n_params),
            np.zeros(op.n_params), op.forward(truth))


def test_dynamic_noise_attenuation():
    # Z_n handed to the solver has per-component variance close to sigma^2 / n
    op, truth = linear_problem()
    y = op.forward(truth)
    sigma, reps = 0.5, 200
    at5, at20 = [], []
    for r in range(reps):
        s = ObservationStream(y, sigma, seed=3, run_id=r)
        for i in range(20):
            _, z = s.draw()
            if i == 4:
                at5.append(z - y)
        at20.append(z - y)
    ratio = np.var(at5, axis=0, ddof=1).mean() / np.var(at20, axis=0, ddof=1).mean()
    assert 2.5 <= ratio <= 5.5


def test_dynamic_variant_runs_on_stream():
    op, truth = linear_problem()
    stream = ObservationStream(op.forward(truth), 0.0, seed=1)
    res = run(SolverConfig("SdIRGNM", max_iters=5, sketch_batch=6), op,
              CovarianceOperator.identity(op.n_params), np.zeros(op.n_params), stream, truth=truth)
    assert stream.count == 5
    assert len(res.plans) == 5


def test_divergence_raises_with_state():
    class Exploding(LinearTestOperator):
        def evaluate(self, u, rows=None):
            F, J = super().evaluate(u, rows)
            return F, J * 1e-20

    op = Exploding(np.eye(4))
    with pytest.raises(DivergenceError) as info:
        run(SolverConfig("IRGNM", StepSchedule("constant", 1e-30), 5), op, CovarianceOperator.identity(4),
            np.zeros(4), np.full(4, 1e30), truth=np.ones(4))
    state = info.value.state
    assert state is not None and len(state.history) >= 1
