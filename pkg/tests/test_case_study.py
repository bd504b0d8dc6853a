"""The three wind-forecast cases on the bundled network at alpha = 0.98.

Slow: each case trains on 20000 scenarios and verifies on 2^16 Halton points.
Run with `pytest -m slow`.
"""
import pytest

from ccopf_core import BUNDLED_CASES, BUNDLED_NETWORK
from dcflow import default_decision
from network import load_cases, load_network, with_wind_forecast
from nlp import SolverConfig, continuation_solve, minimize
from saa import DETERMINISTIC, assemble
from scenario import generate_scenarios
from smoothing import SmoothingParams
from verify import compare, true_probability

pytestmark = pytest.mark.slow

TRAINING = 20_000


@pytest.fixture(scope="module")
def study():
    base = load_network(BUNDLED_NETWORK)
    cfg = SolverConfig()
    results = {}
    for name, forecast in sorted(load_cases(BUNDLED_CASES).items()):
        net = with_wind_forecast(base, forecast)
        scenarios = generate_scenarios(net, TRAINING, seed=42)
        result = continuation_solve(net, scenarios, SmoothingParams(tau=cfg.tau0), cfg)
        det = minimize(assemble(net, None, DETERMINISTIC), default_decision(net), cfg)
        results[name] = (net, scenarios, result, det)
    return results


def test_chance_constraints_hold_on_fresh_points(study):
    for net, scenarios, result, _ in study.values():
        table = true_probability(net, result.inner.u_star, points=2 ** 16, training=scenarios.provenance)
        assert table.minimum >= 0.975


def test_more_forecast_wind_means_less_admitted_wind(study):
    betas = [study[name][2].inner.u_star.beta_w[3] for name in ("case1", "case2", "case3")]
    assert betas[0] == pytest.approx(1.0, abs=1e-2)
    assert betas[0] >= betas[1] - 1e-6 >= betas[2] - 2e-6


def test_more_forecast_wind_costs_less(study):
    costs = [study[name][2].inner.objective for name in ("case1", "case2", "case3")]
    assert costs[0] >= costs[1] >= costs[2]


def test_bracket_is_ordered_and_tight(study):
    for _, _, result, _ in study.values():
        assert result.gap <= 0.02
        assert result.steps[-1].gap <= result.steps[0].gap + 1e-6
        for step in result.steps:
            if step.inner_merit is not None:
                assert step.outer_merit <= step.inner_merit + 1e-3 * abs(step.inner_merit)


def test_deterministic_dispatch_breaks_the_high_wind_case(study):
    net, scenarios, result, det = study["case3"]
    summary = compare(net, scenarios, result.inner, det)
    assert len(summary.flagged) >= 1
    assert all(f.stochastic_rate <= 0.023 for f in summary.feeders)
