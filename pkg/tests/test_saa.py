from dataclasses import replace

import numpy as np
import pytest

from dcflow import Decision
from network import with_alpha
from nlp import grad_check
from saa import (DETERMINISTIC, INNER, OUTER, RELATIVE_MARGINS, SampleAverage, assemble, bound_penalty, feeder_margin,
                 objective, phi_outer, psi_inner, smoothed_average, tree_sum)
from scenario import Scenario, ScenarioSet, forecast_scenarios, generate_scenarios
from smoothing import SmoothingParams, indicator

from conftest import random_decision, two_bus

NO_DECISION = Decision(beta_w={}, p_g={})


def _single(net, wind, load):
    return ScenarioSet(tuple(sorted(w.bus for w in net.wind_farms)), tuple(sorted(l.bus for l in net.loads)),
                       np.array([wind], dtype=float).reshape(1, -1), np.array([load], dtype=float))


def test_expected_cost_at_a_single_scenario(pjm5):
    scenarios = _single(pjm5, [0.0], [100.0, 150.0, 100.0])
    value, grad = objective(pjm5, Decision(beta_w={3: 1.0}, p_g={4: 100.0, 5: 200.0}), scenarios)
    assert value == pytest.approx(3750.0)
    # wind is free; each generator MW displaces one slack MW
    assert grad == pytest.approx([0.0, -5.0, -5.0])


def test_zero_prices_cost_nothing(pjm5, rng):
    free = replace(
        pjm5,
        generators=tuple(replace(g, price=0.0) for g in pjm5.generators),
        slack_source=replace(pjm5.slack_source, price=0.0),
    )
    scenarios = generate_scenarios(free, 50, seed=3)
    for _ in range(5):
        assert objective(free, random_decision(free, rng), scenarios)[0] == 0.0


def test_objective_gradient_matches_finite_differences(pjm5, rng):
    scenarios = generate_scenarios(pjm5, 500, seed=8)
    sa = SampleAverage(pjm5, scenarios)
    for _ in range(20):
        x = random_decision(pjm5, rng).to_vector(pjm5)
        value, grad = sa.objective(x)
        numeric = np.array([(sa.objective(x + e)[0] - sa.objective(x - e)[0]) / 2e-3
                            for e in np.eye(len(x)) * 1e-3])
        assert np.max(np.abs(grad - numeric)) / max(1.0, np.max(np.abs(grad))) <= 1e-7


def test_margin_inside_limit():
    h, grad = feeder_margin(two_bus(load=90.0, p_max=100.0), NO_DECISION, Scenario(0, {}, {2: 90.0}), (1, 2))
    assert h == pytest.approx(-10.0, abs=1e-9)
    assert grad.shape == (0,)


def test_margin_is_two_sided():
    net = two_bus(load=0.0, p_max=100.0, generator=200.0)
    h, grad = feeder_margin(net, Decision(beta_w={}, p_g={2: 120.0}), Scenario(0, {}, {2: 0.0}), (1, 2))
    assert h == pytest.approx(20.0, abs=1e-9)
    assert grad == pytest.approx([1.0])


def test_margin_at_zero_flow_has_zero_gradient():
    net = two_bus(load=0.0, p_max=100.0, generator=200.0)
    h, grad = feeder_margin(net, Decision(beta_w={}, p_g={2: 0.0}), Scenario(0, {}, {2: 0.0}), (2, 1))
    assert h == -100.0
    assert grad.tolist() == [0.0]


def test_smoothed_averages_far_from_the_limit():
    p = SmoothingParams(tau=0.1)
    assert smoothed_average(p, np.full(10, -1e6)) <= 1e-9
    assert smoothed_average(p, np.full(10, 1e6)) >= 1.0
    assert abs(smoothed_average(p, -np.full(10, -1e6)) - p.ceiling) <= 1e-6
    assert smoothed_average(p, -np.full(10, 1e6)) <= 1e-9


def test_smoothed_averages_of_four_margins():
    p = SmoothingParams(tau=0.01)
    margins = np.array([-1.0, -1.0, -1.0, 1.0])
    assert abs(smoothed_average(p, margins) - 0.2525) <= 1e-4
    assert abs(smoothed_average(p, -margins) - 0.7575) <= 1e-4


def _loads(values):
    """Load-only scenarios for the two-bus network; the feeder carries each load."""
    values = np.asarray(values, dtype=float).reshape(-1, 1)
    return ScenarioSet((), (2,), np.zeros((len(values), 0)), values)


def test_feeder_constraints_smooth_megawatt_margins():
    net = two_bus(p_max=100.0)
    scenarios = _loads([99.0, 99.0, 99.0, 101.0])
    p = SmoothingParams(tau=0.01)
    psi, _ = psi_inner(net, NO_DECISION, scenarios, (1, 2), p)
    phi, _ = phi_outer(net, NO_DECISION, scenarios, (1, 2), p)
    assert abs(psi - 0.2525) <= 1e-4
    assert abs(phi - 0.7575) <= 1e-4


def test_relative_margin_scale_is_opt_in():
    net = two_bus(p_max=100.0)
    scenarios = _loads([50.0, 99.0, 130.0])
    mw = SampleAverage(net, scenarios)
    relative = SampleAverage(net, scenarios, margin_scale=RELATIVE_MARGINS)
    assert mw.margins(np.zeros(0))[0][:, 0] == pytest.approx([-50.0, -1.0, 30.0])
    assert relative.margins(np.zeros(0))[0][:, 0] == pytest.approx([-0.5, -0.01, 0.3])
    p = SmoothingParams(tau=0.01)
    assert psi_inner(net, NO_DECISION, scenarios, (1, 2), p, margin_scale=RELATIVE_MARGINS)[0] == pytest.approx(
        relative.psi(np.zeros(0), p)[0][0])
    with pytest.raises(ValueError, match="unknown margin scale"):
        SampleAverage(net, scenarios, margin_scale="percent")


def test_psi_approaches_the_violation_rate(rng):
    net = two_bus(p_max=100.0)
    offsets = rng.uniform(1.0, 5.0, size=400) * rng.choice([-1.0, 1.0], size=400)
    scenarios = _loads(100.0 + offsets)
    sa = SampleAverage(net, scenarios)
    rate = sa.violation_rates(np.zeros(0))[0]
    gaps = []
    for tau in (0.5, 0.25, 0.1, 0.05, 0.01):
        p = SmoothingParams(tau=tau)
        psi = psi_inner(net, NO_DECISION, scenarios, (1, 2), p)[0]
        gaps.append(abs(psi - rate))
        assert gaps[-1] <= 10.0 * tau * max(1.0, p.m1)
    assert gaps[-1] < gaps[0]


def test_limit_flow_counts_as_a_violation_everywhere():
    scenarios = _loads([80.0, 90.0, 120.0])
    flow = float(SampleAverage(two_bus(), scenarios).flows(np.zeros(0))[1, 0])
    sa = SampleAverage(two_bus(p_max=abs(flow)), scenarios)
    assert sa.violation_counts(np.zeros(0)).tolist() == [2]
    assert sa.violation_rates(np.zeros(0)) * sa.count == pytest.approx([2.0])


@pytest.mark.parametrize("tau", [0.1, 0.01])
def test_smoothed_averages_bound_empirical_rates(pjm5, rng, tau):
    sa = SampleAverage(pjm5, generate_scenarios(pjm5, 2000, seed=17))
    p = SmoothingParams(tau=tau)
    for _ in range(100):
        x = random_decision(pjm5, rng).to_vector(pjm5)
        s, _ = sa.margins(x)
        violated = sa.violation_rates(x)
        satisfied = indicator(-s).mean(axis=0)
        assert np.all(sa.psi(x, p)[0] >= violated - 1e-12)
        assert np.all(sa.phi(x, p)[0] >= satisfied - 1e-12)


def test_psi_and_phi_per_feeder_agree_with_batch(pjm5, rng):
    scenarios = generate_scenarios(pjm5, 200, seed=2)
    p = SmoothingParams(tau=0.05)
    u = random_decision(pjm5, rng)
    sa = SampleAverage(pjm5, scenarios)
    x = u.to_vector(pjm5)
    k = sa.feeder_index((3, 2))
    assert psi_inner(pjm5, u, scenarios, (2, 3), p)[0] == pytest.approx(sa.psi(x, p)[0][k])
    assert phi_outer(pjm5, u, scenarios, pjm5.feeder(2, 3), p)[0] == pytest.approx(sa.phi(x, p)[0][k])


def test_psi_needs_a_majorant(pjm5):
    scenarios = generate_scenarios(pjm5, 10, seed=2)
    with pytest.raises(ValueError, match="m1 >= m2"):
        psi_inner(pjm5, Decision({3: 1.0}, {4: 0.0, 5: 0.0}), scenarios, (1, 2), SmoothingParams(0.1, m1=0.5))


def test_bound_penalty_zero_inside():
    net = two_bus(load=50.0, slack_max=100.0)
    value, grad = bound_penalty(net, NO_DECISION, _single(net, [], [50.0]))
    assert value == 0.0
    assert grad.shape == (0,)


def test_bound_penalty_squared_hinge_on_slack():
    net = two_bus(load=105.0, slack_max=100.0)
    value, _ = bound_penalty(net, NO_DECISION, _single(net, [], [105.0]))
    assert value == pytest.approx(25.0)


def test_bound_audit_counts_samples(pjm5):
    scenarios = generate_scenarios(pjm5, 100, seed=5)
    sa = SampleAverage(pjm5, scenarios)
    audit = sa.bound_audit(np.array([1.0, 400.0, 500.0]))
    assert audit["samples"] == 100
    assert audit["angle_violations"] == 0


@pytest.mark.parametrize("variant", [INNER, OUTER])
def test_gradients_of_assembled_problem(pjm5, rng, variant):
    scenarios = generate_scenarios(pjm5, 2000, seed=23)
    sa = SampleAverage(pjm5, scenarios)
    problem = assemble(pjm5, scenarios, variant, SmoothingParams(tau=0.1), sample_average=sa)
    for _ in range(50):
        check = grad_check(problem, random_decision(pjm5, rng))
        assert check.max_error <= 1e-5, check.errors
        assert {"objective", "penalty"} <= set(check.errors)


def test_gradient_check_skips_kinked_feeder():
    # slack sits inside its bounds so only the |P| kink is in the stencil
    net = two_bus(load=50.0, p_max=100.0, generator=100.0, slack_min=-100.0)
    problem = assemble(net, forecast_scenarios(net), INNER, SmoothingParams(tau=0.1))
    check = grad_check(problem, Decision(beta_w={}, p_g={2: 50.0}))
    assert check.skipped == ("psi[1_2]",)
    assert "psi[1_2]" not in check.errors
    assert check.max_error <= 1e-5


def test_deterministic_problem_admits_full_wind(case1):
    problem = assemble(case1, None, DETERMINISTIC)
    x = np.array([1.0, 400.0, 500.0])
    assert np.max(problem.constraint_values(x)) <= 0.0
    assert problem.scenarios.count == 1
    assert "flow_max[2_3]" in problem.constraint_names and "angle_min[5]" in problem.constraint_names


def test_near_robust_inner_constraint(pjm5, rng):
    net = with_alpha(pjm5, 1.0 - 1e-12)
    scenarios = generate_scenarios(net, 100, seed=1)
    p = SmoothingParams(tau=0.1)
    problem = assemble(net, scenarios, INNER, p)
    x = random_decision(net, rng).to_vector(net)
    psi = problem.sample_average.psi(x, p)[0]
    assert np.allclose(problem.constraint_values(x), psi - 1e-12, rtol=0.0, atol=1e-15)


def test_merit_adds_weighted_penalty(pjm5, rng):
    scenarios = generate_scenarios(pjm5, 100, seed=1)
    problem = assemble(pjm5, scenarios, OUTER, SmoothingParams(tau=0.1), penalty_weight=7.0)
    x = random_decision(pjm5, rng).to_vector(pjm5)
    cost = problem.cost(x)[0]
    penalty = problem.sample_average.bound_penalty(x)[0]
    assert problem.objective(x)[0] == pytest.approx(cost + 7.0 * penalty / 100)


def test_assemble_rejects_bad_inputs(pjm5):
    scenarios = generate_scenarios(pjm5, 10, seed=1)
    with pytest.raises(ValueError, match="unknown variant"):
        assemble(pjm5, scenarios, "robust", SmoothingParams(0.1))
    with pytest.raises(ValueError, match="smoothing"):
        assemble(pjm5, scenarios, INNER)
    with pytest.raises(ValueError, match="m1 >= m2"):
        assemble(pjm5, scenarios, OUTER, SmoothingParams(0.1, m1=0.5, m2=1.0))


def test_tree_sum_is_accurate():
    values = np.random.default_rng(0).normal(size=(10_001, 3))
    assert np.allclose(tree_sum(values), [np.sum(values[:, k]) for k in range(3)], rtol=1e-12)
