import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccopf_core import BUNDLED_NETWORK
from dcflow import (DCModel, Decision, StructuralError, decision_bounds, decision_names, default_decision,
                    nodal_residuals, sensitivities, solve_flow)
from network import Bus, Network, load_network
from scenario import Scenario, ScenarioSet

from conftest import build, random_decision, triangle, two_bus

NO_DECISION = Decision(beta_w={}, p_g={})
# hypothesis tests cannot take function-scoped fixtures
PJM5 = load_network(BUNDLED_NETWORK)

fractions = st.floats(min_value=0.0, max_value=1.0, allow_nan=False)


def _dense_oracle(net, injections):
    """Angles and flows from a plain solve of the full Laplacian with the slack row dropped."""
    buses = list(net.bus_ids)
    idx = {b: k for k, b in enumerate(buses)}
    lap = np.zeros((len(buses), len(buses)))
    for f in net.feeders:
        a, b = idx[f.from_bus], idx[f.to_bus]
        lap[a, a] += f.susceptance
        lap[b, b] += f.susceptance
        lap[a, b] -= f.susceptance
        lap[b, a] -= f.susceptance
    keep = [k for k, b in enumerate(buses) if b != net.slack_bus]
    theta = np.zeros(len(buses))
    theta[keep] = np.linalg.solve(lap[np.ix_(keep, keep)], injections[keep])
    return {f.key: f.susceptance * (theta[idx[f.from_bus]] - theta[idx[f.to_bus]]) for f in net.feeders}


def test_two_bus_hand_case():
    state = solve_flow(two_bus(), NO_DECISION, Scenario(0, {}, {2: 100.0}))
    assert state.angles[1] == 0.0
    assert state.angles[2] == pytest.approx(-0.1, abs=1e-12)
    assert state.flow(1, 2) == pytest.approx(100.0, abs=1e-9)
    assert state.flow(2, 1) == pytest.approx(-100.0, abs=1e-9)
    assert state.slack_power == pytest.approx(100.0, abs=1e-9)


def test_triangle_hand_case():
    state = solve_flow(triangle(), NO_DECISION, Scenario(0, {}, {3: 90.0}))
    assert state.angles[2] == pytest.approx(-0.03, abs=1e-12)
    assert state.angles[3] == pytest.approx(-0.06, abs=1e-12)
    assert state.flow(1, 2) == pytest.approx(30.0, abs=1e-9)
    assert state.flow(1, 3) == pytest.approx(60.0, abs=1e-9)
    assert state.flow(2, 3) == pytest.approx(30.0, abs=1e-9)
    assert state.slack_power == pytest.approx(90.0, abs=1e-9)


def test_zero_injection_gives_flat_state(pjm5):
    u = Decision(beta_w={3: 0.0}, p_g={4: 0.0, 5: 0.0})
    state = solve_flow(pjm5, u, Scenario(0, {3: 0.0}, {2: 0.0, 3: 0.0, 4: 0.0}))
    assert all(v == 0.0 for v in state.angles.values())
    assert all(v == 0.0 for v in state.flows.values())
    assert state.slack_power == 0.0


def test_two_bus_sensitivity_has_no_decision_dependence():
    sens = sensitivities(two_bus(), Scenario(0, {}, {2: 100.0}))
    assert sens.flow_gradient.shape == (1, 0)
    assert sens.flow_constant[0] == pytest.approx(100.0, abs=1e-9)
    assert sens.slack_constant == 100.0


def test_slack_absorbs_a_generator_on_the_triangle():
    net = build([1, 2, 3], [(1, 2, 1000.0, 500.0), (1, 3, 1000.0, 500.0), (2, 3, 1000.0, 500.0)],
                generators=[(3, 10.0, 0.0, 100.0)], loads=[(3, 90.0)])
    sens = sensitivities(net, Scenario(0, {}, {3: 90.0}))
    assert sens.slack_gradient.tolist() == pytest.approx([-1.0])
    assert sens.slack(np.array([40.0])) == pytest.approx(50.0, abs=1e-9)


@pytest.mark.parametrize("alpha", [0.0, 0.25, 0.5, 1.0])
def test_state_is_linear_in_the_decision(pjm5, rng, alpha):
    s = Scenario(0, {3: 240.0}, {2: 410.0, 3: 380.0, 4: 395.0})
    x1 = random_decision(pjm5, rng).to_vector(pjm5)
    x2 = random_decision(pjm5, rng).to_vector(pjm5)
    mixed = solve_flow(pjm5, Decision.from_vector(pjm5, alpha * x1 + (1.0 - alpha) * x2), s)
    one = solve_flow(pjm5, Decision.from_vector(pjm5, x1), s)
    two = solve_flow(pjm5, Decision.from_vector(pjm5, x2), s)
    for key, flow in mixed.flows.items():
        assert flow == pytest.approx(alpha * one.flows[key] + (1.0 - alpha) * two.flows[key], abs=1e-9)
    for bus, angle in mixed.angles.items():
        assert angle == pytest.approx(alpha * one.angles[bus] + (1.0 - alpha) * two.angles[bus], abs=1e-9)
    assert mixed.slack_power == pytest.approx(alpha * one.slack_power + (1.0 - alpha) * two.slack_power, abs=1e-9)


def test_disconnected_network_is_structural_error():
    net = two_bus()
    isolated = Network(buses=net.buses + (Bus(id=3),), feeders=net.feeders, slack_source=net.slack_source,
                       loads=net.loads)
    with pytest.raises(StructuralError, match="not connected"):
        DCModel(isolated)


def test_decision_vector_layout(pjm5):
    assert decision_names(pjm5) == ["beta_w_3", "p_g_4", "p_g_5"]
    lower, upper = decision_bounds(pjm5)
    assert lower.tolist() == [0.0, 0.0, 0.0]
    assert upper.tolist() == [1.0, 400.0, 500.0]
    u = Decision(beta_w={3: 0.25}, p_g={4: 10.0, 5: 20.0})
    assert Decision.from_vector(pjm5, u.to_vector(pjm5)) == u
    assert default_decision(pjm5).beta_w == {3: 1.0}


def test_decision_missing_component(pjm5):
    with pytest.raises(ValueError, match="bus 5"):
        Decision(beta_w={3: 1.0}, p_g={4: 10.0}).to_vector(pjm5)


@settings(max_examples=100, deadline=None)
@given(beta=fractions, g4=fractions, g5=fractions, wind=fractions,
       loads=st.lists(st.floats(min_value=0.0, max_value=600.0), min_size=3, max_size=3))
def test_flows_match_dense_oracle_and_balance(beta, g4, g5, wind, loads):
    u = Decision(beta_w={3: beta}, p_g={4: 400.0 * g4, 5: 500.0 * g5})
    s = Scenario(0, {3: 600.0 * wind}, dict(zip((2, 3, 4), loads)))
    state = solve_flow(PJM5, u, s)

    injections = np.zeros(5)
    injections[2] += beta * s.wind[3]
    injections[3] += u.p_g[4]
    injections[4] += u.p_g[5]
    for bus, mw in s.load.items():
        injections[bus - 1] -= mw
    oracle = _dense_oracle(PJM5, injections)
    for key, flow in oracle.items():
        assert state.flows[key] == pytest.approx(flow, abs=1e-9)

    residual = nodal_residuals(PJM5, u, s, state)
    assert max(abs(r) for r in residual.values()) <= 1e-9
    assert state.slack_power == pytest.approx(sum(loads) - beta * s.wind[3] - u.p_g[4] - u.p_g[5], abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(beta=fractions, g4=fractions, g5=fractions, wind=fractions)
def test_affine_sensitivity_reproduces_solve(beta, g4, g5, wind):
    model = DCModel(PJM5)
    u = Decision(beta_w={3: beta}, p_g={4: 400.0 * g4, 5: 500.0 * g5})
    s = Scenario(0, {3: 600.0 * wind}, {2: 410.0, 3: 380.0, 4: 395.0})
    x = u.to_vector(PJM5)
    state = model.solve(u, s)
    sens = model.sensitivity(s)
    assert np.allclose(sens.flows(x), [state.flows[f.key] for f in PJM5.feeders], rtol=0.0, atol=1e-9)
    assert sens.slack(x) == pytest.approx(state.slack_power, abs=1e-9)
    assert np.allclose(sens.angles(x), [state.angles[b] for b in PJM5.bus_ids], rtol=0.0, atol=1e-12)


def test_batch_matches_per_scenario(pjm5, rng):
    model = DCModel(pjm5)
    wind = rng.uniform(0.0, 600.0, (7, 1))
    load = rng.uniform(300.0, 500.0, (7, 3))
    scenarios = ScenarioSet((3,), (2, 3, 4), wind, load)
    x = np.array([0.7, 120.0, 310.0])
    batch = model.batch(scenarios)
    for n, s in enumerate(scenarios):
        sens = model.sensitivity(s)
        assert np.allclose(batch.flows(x)[n], sens.flows(x), rtol=0.0, atol=1e-9)
        assert batch.slack(x)[n] == pytest.approx(sens.slack(x), abs=1e-9)
        assert np.allclose(batch.flow_gradient(n), sens.flow_gradient, rtol=0.0, atol=1e-12)


def test_batch_contractions_match_dense_sums(pjm5, rng):
    model = DCModel(pjm5)
    scenarios = ScenarioSet((3,), (2, 3, 4), rng.uniform(0.0, 600.0, (5, 1)), rng.uniform(300.0, 500.0, (5, 3)))
    batch = model.batch(scenarios)
    weights = rng.normal(size=(5, len(pjm5.feeders)))
    dense = sum(weights[n][:, None] * batch.flow_gradient(n) for n in range(5))
    assert np.allclose(batch.flow_contract(weights), dense, rtol=1e-12, atol=1e-12)

    slack_weights = rng.normal(size=5)
    dense_slack = sum(slack_weights[n] * model.sensitivity(s).slack_gradient for n, s in enumerate(scenarios))
    assert np.allclose(batch.slack_contract(slack_weights), dense_slack, rtol=1e-12, atol=1e-12)


def test_batch_rejects_foreign_wind_columns(pjm5):
    scenarios = ScenarioSet((2,), (2, 3, 4), np.zeros((1, 1)), np.zeros((1, 3)))
    with pytest.raises(ValueError, match="wind columns"):
        DCModel(pjm5).batch(scenarios)
