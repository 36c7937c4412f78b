import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sirgnm.core import (Grid2D, GridField, Observation, ObservationStream, SolverConfig, SolverState,
                         StepSchedule, ValidationError, draw_observation, dumps, grid_point, loads,
                         make_rng, schedule_alpha)
from sirgnm.diagnostics import MetricsRecord


def test_grid_point_examples():
    g = Grid2D(7, 7)
    assert grid_point(g, 0, 0) == (0.0, 0.0)
    assert grid_point(g, 6, 6) == (6.0, 6.0)
    assert grid_point(g, 3, 1) == (3.0, 1.0)


def test_grid_point_out_of_range():
    g = Grid2D(7, 7)
    with pytest.raises(IndexError):
        grid_point(g, 7, 0)
    with pytest.raises(IndexError):
        grid_point(g, 0, -1)


def test_grid_rejects_small_or_degenerate():
    with pytest.raises(ValidationError):
        Grid2D(2, 5)
    with pytest.raises(ValidationError):
        Grid2D(5, 5, lx=0.0)


@given(st.integers(3, 40), st.integers(3, 40), st.data())
def test_index_roundtrip(nx, ny, data):
    g = Grid2D(nx, ny)
    i = data.draw(st.integers(0, nx - 1))
    j = data.draw(st.integers(0, ny - 1))
    k = g.index(i, j)
    assert g.ij(k) == (i, j)
    assert 0 <= k < g.size


def test_coordinates_row_major():
    g = Grid2D(4, 3, lx=3.0, ly=4.0)
    x, y = g.coordinates()
    for k in range(g.size):
        assert (x[k], y[k]) == g.point(*g.ij(k))


def test_gridfield_validates():
    g = Grid2D(3, 3)
    with pytest.raises(ValidationError):
        GridField(g, np.ones(8))
    with pytest.raises(ValidationError):
        GridField(g, np.r_[np.ones(8), np.nan])
    f = GridField.constant(g, 2.0)
    assert f.as_array().shape == (3, 3)
    assert np.all(f.values == 2.0)


def test_observation_invariants():
    with pytest.raises(ValidationError):
        Observation(np.array([[0.0, 0.0], [0.0, 0.0]]), np.zeros(2), 0.1)
    with pytest.raises(ValidationError):
        Observation(np.array([[0.0, 0.0]]), np.zeros(2), 0.1)
    with pytest.raises(ValidationError):
        Observation(np.array([[0.0, 0.0]]), np.zeros(1), -1.0)


def test_schedule_examples():
    assert schedule_alpha(StepSchedule("constant", 0.5), 100) == 0.5
    assert schedule_alpha(StepSchedule("geometric", 0.5, 0.9), 2) == pytest.approx(0.405, abs=1e-15)
    assert schedule_alpha(StepSchedule("power", 0.5, power_exponent=0.9), 0) == 0.5


@given(st.sampled_from(["geometric", "power"]), st.floats(1e-3, 10), st.floats(0.05, 1.0),
       st.floats(0.1, 2.0), st.integers(0, 500))
def test_schedule_monotone(kind, a0, gamma, p, n):
    s = StepSchedule(kind, a0, gamma, p)
    assert s.alpha(n) > 0
    assert s.alpha(n + 1) <= s.alpha(n)


@given(st.floats(1e-3, 10), st.floats(0.05, 0.99), st.integers(0, 50))
def test_geometric_ratio(a0, gamma, n):
    s = StepSchedule("geometric", a0, gamma)
    assert s.alpha(n) == a0 * gamma**n
    assert s.alpha(n) / s.alpha(n + 1) == pytest.approx(1 / gamma, rel=1e-12)


def test_schedule_validation():
    with pytest.raises(ValidationError):
        StepSchedule("linear")
    with pytest.raises(ValidationError):
        StepSchedule(alpha0=0.0)
    with pytest.raises(ValidationError):
        StepSchedule("geometric", gamma=1.5)


def test_solver_config_batch_rules():
    with pytest.raises(ValidationError):
        SolverConfig("SIRGNM")
    with pytest.raises(ValidationError):
        SolverConfig("IRGNM", sketch_batch=4)
    with pytest.raises(ValidationError):
        SolverConfig("IRGNM", stop_rel_err=1.0)
    assert SolverConfig("SdIRGNM", sketch_batch=3).dynamic
    assert not SolverConfig("IRGNM").stochastic


def test_stream_noise_free():
    y = np.arange(5.0)
    s = ObservationStream(y, 0.0, seed=3)
    for _ in range(4):
        Y, Z = draw_observation(s)
        assert np.array_equal(Y, y)
        assert np.array_equal(Z, y)


def test_stream_running_sum_exact_and_replay():
    s = ObservationStream(np.zeros(6), 0.3, seed=11, run_id=2)
    emitted = [s.draw()[0] for _ in range(7)]
    total = np.zeros(6)
    for y in emitted:
        total += y
    assert np.array_equal(s.running_sum, total)
    assert np.array_equal(s.replay(7), np.stack(emitted))
    t = ObservationStream(np.zeros(6), 0.3, seed=11, run_id=2)
    assert np.array_equal(t.draw()[0], emitted[0])


def test_stream_average_requires_draw():
    with pytest.raises(ValidationError):
        ObservationStream(np.zeros(2), 0.1, 0).average


def test_stream_variance_ratio():
    # var(Z_n) / var(Z_4n) should be close to 4
    sigma, n, reps = 0.1, 25, 200
    zn, z4n = [], []
    for r in range(reps):
        s = ObservationStream(np.zeros(8), sigma, seed=5, run_id=r)
        for i in range(4 * n):
            _, z = s.draw()
            if i + 1 == n:
                zn.append(z.copy())
        z4n.append(z)
    ratio = np.var(np.array(zn), axis=0, ddof=1).mean() / np.var(np.array(z4n), axis=0, ddof=1).mean()
    assert 2.5 <= ratio <= 5.5


def test_make_rng_streams_independent():
    a = make_rng(1, "sketch", 0, 5).standard_normal(4)
    b = make_rng(1, "sketch", 0, 5).standard_normal(4)
    c = make_rng(1, "sketch", 0, 6).standard_normal(4)
    d = make_rng(1, "stream", 0, 5).standard_normal(4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)


def test_solver_state_advance():
    g = Grid2D(3, 3)
    st_ = SolverState(GridField.constant(g, 1.0), StepSchedule("geometric", 1.0, 0.5))
    st_.advance(GridField.constant(g, 2.0))
    assert st_.iter == 1
    assert st_.alpha_current == 0.5


@pytest.mark.parametrize("obj", [
    Grid2D(4, 5, 2.0, 3.0),
    GridField(Grid2D(3, 3), np.linspace(0, 1, 9)),
    Observation(np.array([[0.5, 0.5], [1.0, 2.0]]), np.array([1.0, 2.0]), 0.1),
    StepSchedule("geometric", 0.7, 0.8),
    SolverConfig("SIRGNM", sketch_batch=8, stop_rel_err=0.2, seed=2**63),
    MetricsRecord(3, 0.1, 0.5, 2.0, 0.25, 0.0, 1.5),
])
def test_serialization_roundtrip(obj):
    assert loads(dumps(obj)) == obj


def test_stream_serialization_resumes():
    s = ObservationStream(np.arange(3.0), 0.2, seed=9)
    s.draw()
    s.draw()
    t = loads(dumps(s))
    assert np.array_equal(s.draw()[1], t.draw()[1])


@given(st.lists(st.floats(-1e6, 1e6), min_size=9, max_size=9))
def test_gridfield_roundtrip_property(vals):
    f = GridField(Grid2D(3, 3), np.array(vals))
    assert loads(dumps(f)) == f
