import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from certainty_planner.eikonal import reachable_set
from certainty_planner.grid import INF, DomainMask, GridSpec, Point, ScalarField, build_field, constant_field
from certainty_planner.time_marching import (
    CertaintyTimeModel,
    Stage,
    argmin_on,
    discrete_stages,
    march_backward,
    march_chain,
    march_fixed_T,
    plan_discrete_T,
    plan_fixed_T,
    stable_dt,
)


def small(n=21):
    spec = GridSpec.unit_square(n)
    f = build_field(spec, lambda x, y: 1.4 + 0.6 * np.cos(2 * np.pi * x) * np.sin(2 * np.pi * y))
    return spec, f, constant_field(spec, 1.0), DomainMask.full(spec)


def test_constant_terminal_grows_linearly():
    spec, f, one, mask = small()
    tv = march_backward(constant_field(spec, 0.7), f, one, 0.3, 0.0, mask)
    for k, t in enumerate(tv.times):
        np.testing.assert_allclose(tv.slices[k], 0.7 + (0.3 - t), atol=1e-12)
    assert tv.t_end == 0.3 and tv.t_start == 0.0


def test_terminal_slice_is_bit_identical_and_levels_descend():
    spec, f, one, mask = small()
    rng = np.random.default_rng(0)
    term = ScalarField(spec, rng.uniform(0, 1, spec.shape))
    tv = march_backward(term, f, one, 0.25, 0.05, mask)
    assert np.array_equal(tv.slices[0], term.values)
    assert np.all(np.diff(tv.times) < 0)
    assert tv.dt <= stable_dt(spec, f, mask) * (1 + 1e-12)
    assert tv.times[-1] == 0.05


def test_march_argument_errors():
    spec, f, one, mask = small()
    term = constant_field(spec, 0.0)
    with pytest.raises(ValueError):
        march_backward(term, f, one, 0.1, 0.1, mask)
    with pytest.raises(ValueError, match="stability"):
        march_backward(term, f, one, 0.1, 0.0, mask, dt=2 * stable_dt(spec, f, mask))


def test_excluded_nodes_stay_infinite():
    spec, f, one, _ = small()
    inside = np.ones(spec.shape, dtype=bool)
    inside[5:8, 5:8] = False
    mask = DomainMask(spec, inside)
    v = np.zeros(spec.shape)
    v[0, 0] = INF
    tv = march_backward(ScalarField(spec, v), f, one, 0.2, 0.0, mask)
    assert np.all(np.isinf(tv.slices[:, 5:8, 5:8]))
    assert np.all(np.isinf(tv.slices[:, 0, 0]))
    assert np.all(np.isfinite(tv.slices[:, 10, 10]))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_comonotone_in_terminal(seed):
    spec, f, one, mask = small(15)
    rng = np.random.default_rng(seed)
    a = rng.uniform(0, 1, spec.shape)
    b = a + rng.uniform(0, 0.3, spec.shape)
    ta = march_backward(ScalarField(spec, a), f, one, 0.2, 0.0, mask)
    tb = march_backward(ScalarField(spec, b), f, one, 0.2, 0.0, mask)
    assert np.all(tb.slices >= ta.slices - 1e-12)


def test_waiting_bound(main):
    T = 0.4
    tv = march_fixed_T(main, T)
    q = main.q.values
    inside = main.mask.inside
    for k, t in enumerate(tv.times):
        assert np.all(tv.slices[k][inside] <= q[inside] + (T - t) + 2 * main.grid.h)


@pytest.mark.parametrize("T", [0.08, 0.4])
def test_march_reproduces_fixed_T_total(main, T):
    plan = plan_fixed_T(main, T, march=True)
    assert plan.marched_value == pytest.approx(plan.expected_total, rel=0.02)


def test_single_target_value_conserved(main):
    # one target, T below the travel time: the marched value is the plain travel time
    u1 = main.target_solutions[0].u
    u10 = main.target_solutions[0].value_at(main.x0)
    T = 0.5 * u10
    tv = march_backward(u1, main.speed, main.unit_cost, T, 0.0, main.mask)
    assert tv.value_at(main.x0, 0.0) == pytest.approx(u10, rel=0.02)


def test_fixed_T_waypoint_minimizes_q_on_reachable_set(main):
    for T in (0.08, 0.2, 0.4):
        plan = plan_fixed_T(main, T)
        reach = plan.reachable.inside
        qv = main.q.values
        i, j = plan.waypoint_index
        assert reach[j, i]
        assert qv[j, i] == qv[reach].min()
        assert plan.expected_total == pytest.approx(T + qv[j, i])
        assert plan.marched_value is None


def test_short_horizon_stays_near_start(main):
    # T = 0.08 cannot leave the start's neighborhood; T = 0.4 reaches the upper basin
    near = plan_fixed_T(main, 0.08).waypoint
    far = plan_fixed_T(main, 0.4).waypoint
    assert math.dist(near, main.x0) <= 0.08 * 2.0 + 2 * main.grid.h
    assert far[1] > 0.5 > near[1]


def test_large_T_reaches_global_minimum(main):
    g = argmin_on(main.q, main.mask)
    assert plan_fixed_T(main, 0.46).waypoint_index == g
    assert plan_fixed_T(main, 0.44).waypoint_index != g


def test_fixed_T_rejects_nonpositive(main):
    with pytest.raises(ValueError):
        plan_fixed_T(main, 0.0)


def test_discrete_stage_weights():
    spec = GridSpec.unit_square(5)
    q = constant_field(spec, 1.0)
    st_ = discrete_stages(q, [0.1, 0.2, 0.3], [0.5, 0.3, 0.2])
    assert [s.weight for s in st_] == pytest.approx([0.5, 0.6, 1.0])
    assert st_[-1].weight == 1.0
    with pytest.raises(ValueError):
        discrete_stages(q, [0.1, 0.2], [0.5, 0.6])
    with pytest.raises(ValueError):
        discrete_stages(q, [0.2, 0.1], [0.5, 0.5])
    with pytest.raises(ValueError):
        discrete_stages(q, [0.1, 0.2], [1.0, 0.0])


def test_chain_needs_certain_last_stage():
    spec, f, one, mask = small()
    q = constant_field(spec, 0.0)
    with pytest.raises(ValueError):
        march_chain([Stage(0.1, 0.5, q)], f, one, mask)
    with pytest.raises(ValueError):
        march_chain([], f, one, mask)


def test_chain_blends_terminal_conditions():
    spec, f, one, mask = small()
    q = constant_field(spec, 1.0)
    sols = march_chain([Stage(0.1, 0.25, q), Stage(0.3, 1.0, q)], f, one, mask)
    # v2 at 0.1 is 1 + 0.2; blend 0.75*1.2 + 0.25*1 = 1.15
    np.testing.assert_allclose(sols[0].slices[0], 1.15, atol=1e-12)
    np.testing.assert_allclose(sols[0].slices[-1], 1.25, atol=1e-12)
    assert sols[0].t_end == 0.1 and sols[1].t_start == 0.1


def test_single_stage_equals_fixed_T(main):
    chain = plan_discrete_T(main, [0.4], [1.0])
    direct = march_fixed_T(main, 0.4).value_at(main.x0, 0.0)
    assert abs(chain.value_at_start - direct) <= 1e-9
    plan = plan_fixed_T(main, 0.4)
    assert chain.value_at_start == pytest.approx(plan.expected_total, rel=0.02)
    assert math.dist(chain.waypoints[0], plan.waypoint) <= 0.03


def test_two_stage_waypoints(main):
    early = plan_discrete_T(main, [0.08, 0.4], [0.9, 0.1])
    assert math.dist(early.waypoints[0], plan_fixed_T(main, 0.08).waypoint) <= 0.02
    late = plan_discrete_T(main, [0.08, 0.4], [0.1, 0.9])
    assert math.dist(late.waypoints[1], plan_fixed_T(main, 0.4).waypoint) <= 0.02
    # the first waypoint lies en route, away from both ends
    s1 = late.waypoints[0]
    assert math.dist(s1, main.x0) > 0.05 and math.dist(s1, late.waypoints[1]) > 0.05
    steps = np.hypot(*np.diff(np.array(late.path), axis=0).T)
    assert steps.max() <= 2.0 * late.stages[0].dt * (1 + 1e-9)


def test_stage_path_stays_reachable(main):
    plan = plan_discrete_T(main, [0.08, 0.4], [0.5, 0.5])
    reach = reachable_set(main.start_solution, 0.08 + 2 * main.grid.h)
    i, j = main.grid.nearest_index(plan.waypoints[0])
    assert reach.inside[j, i]


def test_time_model_round_trip_and_validation():
    for m in (CertaintyTimeModel.fixed(0.4), CertaintyTimeModel.discrete([0.1, 0.4], [0.3, 0.7]),
              CertaintyTimeModel.exponential(2.5)):
        assert CertaintyTimeModel.from_dict(m.to_dict()) == m
    with pytest.raises(ValueError):
        CertaintyTimeModel.fixed(0.0)
    with pytest.raises(ValueError):
        CertaintyTimeModel.exponential(-1.0)
    with pytest.raises(ValueError):
        CertaintyTimeModel.discrete([0.1, 0.4], [0.3, 0.6])
    with pytest.raises(ValueError):
        CertaintyTimeModel("weibull")
