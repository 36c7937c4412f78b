from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sirgnm.core import ValidationError, make_rng
from sirgnm.diagnostics import probe_sketch_deviation, probe_unbiasedness
from sirgnm.sketching import SketchPlan, draw_plan, enumerate_plans, project, reduce_data


def test_full_batch_is_identity():
    g = np.arange(6.0)
    for mode in ("select", "mask_scaled"):
        plan = draw_plan(6, 6, mode, make_rng(0, "sketch", 0))
        assert plan.is_full
        assert plan.scale == 1.0
        np.testing.assert_array_equal(plan.indices, np.arange(6))
        np.testing.assert_array_equal(project(plan, g), g)


def test_mask_scaled_example():
    plan = SketchPlan(2, 1, [0], "mask_scaled", 2.0)
    np.testing.assert_array_equal(project(plan, [3.0, 5.0]), [6.0, 0.0])
    mean = sum(project(p, [3.0, 5.0]) for p in enumerate_plans(2, 1)) / 2
    np.testing.assert_array_equal(mean, [3.0, 5.0])


def test_select_example():
    plan = SketchPlan(4, 2, [3, 1], "select")
    np.testing.assert_array_equal(plan.indices, [1, 3])
    np.testing.assert_array_equal(reduce_data(plan, ["a", "b", "c", "d"] and [1.0, 2.0, 3.0, 4.0]), [2.0, 4.0])


def test_singleton_reproducible():
    a = draw_plan(3, 1, "select", make_rng(7, "sketch", 0, 0))
    b = draw_plan(3, 1, "select", make_rng(7, "sketch", 0, 0))
    assert a == b and a.batch == 1


def test_plan_validation():
    with pytest.raises(ValidationError):
        draw_plan(4, 5, "select", make_rng(0, "sketch"))
    with pytest.raises(ValidationError):
        SketchPlan(4, 2, [1, 1])
    with pytest.raises(ValidationError):
        SketchPlan(4, 2, [1, 4])
    with pytest.raises(ValidationError):
        SketchPlan(4, 2, [0, 1], mode="gauss")
    with pytest.raises(ValidationError):
        project(SketchPlan(4, 2, [0, 1]), np.ones(5))


def test_uniform_inclusion_frequency():
    rng = make_rng(0, "sketch", 123)
    counts = np.zeros(64)
    draws = 100_000
    for _ in range(draws):
        counts[rng.choice(64, 32, replace=False)] += 1
    # the same generator call draw_plan makes
    assert np.all(np.abs(counts / draws - 0.5) <= 0.01)
    plan = draw_plan(64, 32, "select", make_rng(0, "sketch", 1))
    assert len(np.unique(plan.indices)) == 32


def test_enumeration_unbiased_exact():
    g = np.array([1.0, 2.0, 3.0, 4.0])
    rep = probe_unbiasedness(4, 2, g)
    assert rep.method == "enumeration" and rep.draws == 6
    assert rep.max_deviation == 0.0
    for m in range(1, 9):
        for b in range(1, m + 1):
            assert probe_unbiasedness(m, b, np.linspace(-1, 2, m)).max_deviation == 0.0


def test_enumeration_matches_brute_force():
    g = np.array([0.3, -1.2, 2.5, 4.0, 0.7])
    plans = list(enumerate_plans(5, 2))
    assert len(plans) == 10
    brute = sum(project(p, g) for p in plans) / len(plans)
    np.testing.assert_allclose(brute, g, rtol=1e-15)


def test_literal_mask_is_biased():
    g = np.arange(1.0, 7.0)
    rep = probe_unbiasedness(6, 3, g, scale=1.0)
    np.testing.assert_allclose(rep.mean, g * 3 / 6)


def test_monte_carlo_unbiased():
    g = make_rng(0, "probe", 10).uniform(0.5, 2.0, 64)
    rep = probe_unbiasedness(64, 32, g, draws=100_000)
    assert rep.max_deviation <= 0.01 * np.abs(g).max()


def test_variance_probe():
    g = np.linspace(1, 3, 16)
    assert probe_sketch_deviation(16, 16, g, draws=50) == 0.0
    small = probe_sketch_deviation(16, 4, g, draws=400)
    large = probe_sketch_deviation(16, 12, g, draws=400)
    assert small > large > 0


@given(st.integers(1, 30), st.data())
def test_project_shapes_property(m, data):
    b = data.draw(st.integers(1, m))
    seed = data.draw(st.integers(0, 2**32))
    g = np.arange(m, dtype=float) + 1
    sel = draw_plan(m, b, "select", make_rng(seed, "sketch"))
    msk = SketchPlan(m, b, sel.indices, "mask_scaled", m / b)
    assert project(sel, g).shape == (b,)
    out = project(msk, g)
    assert out.shape == (m,)
    assert np.count_nonzero(out) == b
    np.testing.assert_allclose(out[sel.indices], g[sel.indices] * m / b)
    M = np.outer(g, [1.0, 2.0])
    np.testing.assert_array_equal(project(sel, M), M[sel.indices])
