"""Sample-average OPF: expected cost, smoothed per-feeder chance constraints,
per-sample bound penalties and the deterministic forecast problem, all with
analytic gradients in the decision vector."""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Set, Tuple, Union

import numpy as np

from config import DEFAULT_PENALTY_WEIGHT
from dcflow import DCModel, Decision, decision_bounds, generator_order
from network import Feeder, Network
from scenario import Scenario, ScenarioSet, check_schema, forecast_scenarios
from smoothing import SmoothingParams, indicator, theta, theta_ds

logger = logging.getLogger(__name__)

INNER = "inner"
OUTER = "outer"
DETERMINISTIC = "deterministic"
VARIANTS = (INNER, OUTER, DETERMINISTIC)

# units of the margin the smoothing acts on
MW_MARGINS = "mw"
RELATIVE_MARGINS = "relative"
MARGIN_SCALES = (MW_MARGINS, RELATIVE_MARGINS)

Evaluator = Callable[[np.ndarray], Tuple[float, np.ndarray]]
ConstraintEvaluator = Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]]
FeederRef = Union[Feeder, Tuple[int, int]]


def tree_sum(values) -> np.ndarray:
    """Sum over axis 0 in numpy's pairwise order, fixed by the array length alone."""
    a = np.asarray(values, dtype=float)
    return np.ascontiguousarray(np.moveaxis(a, 0, -1)).sum(axis=-1)


def tree_mean(values) -> np.ndarray:
    a = np.asarray(values, dtype=float)
    return tree_sum(a) / a.shape[0]


def smoothed_average(p: SmoothingParams, margins) -> float:
    """(1/N) sum_n theta(p, margin_n)."""
    return float(tree_mean(theta(p, np.asarray(margins, dtype=float))))


def _require_majorant(p: SmoothingParams) -> None:
    if not p.is_majorant:
        raise ValueError(f"smoothing requires m1 >= m2 to bound the indicator, got m1={p.m1}, m2={p.m2}")


class SampleAverage:
    """All sample-average quantities of one network over one scenario set.

    Holds the batched affine sensitivities, so each evaluation is a handful of
    array operations over (N, feeders).

    The smoothed averages act on h = |P| - P_max in MW. With
    `margin_scale="relative"` they act on h / P_max instead, which lets one
    tau schedule fit feeders of very different ratings.
    """

    def __init__(self, net: Network, scenarios: ScenarioSet, model: Optional[DCModel] = None,
                 margin_scale: str = MW_MARGINS):
        if margin_scale not in MARGIN_SCALES:
            raise ValueError(f"unknown margin scale {margin_scale!r}; expected one of {', '.join(MARGIN_SCALES)}")
        check_schema(net, scenarios)
        self.margin_scale = margin_scale
        self.network = net
        self.scenarios = scenarios
        self.model = model or DCModel(net)
        self.batch = self.model.batch(scenarios)
        self.p_max = np.array([f.p_max for f in net.feeders])
        self.alpha = np.array([f.alpha for f in net.feeders])
        self.labels = tuple(f.label for f in net.feeders)
        n_wind = len(self.model.wind_buses)
        self.prices = np.concatenate([np.zeros(n_wind), [g.price for g in generator_order(net)]])
        self.slack_price = net.slack_source.price

    @property
    def count(self) -> int:
        return self.scenarios.count

    def feeder_index(self, feeder: FeederRef) -> int:
        key = feeder.key if isinstance(feeder, Feeder) else tuple(feeder)
        for k, f in enumerate(self.network.feeders):
            if key in (f.key, (f.to_bus, f.from_bus)):
                return k
        raise KeyError(f"no feeder between buses {key[0]} and {key[1]}")

    def flows(self, x: np.ndarray) -> np.ndarray:
        return self.batch.flows(x)

    def margins(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Smoothing margins per sample and feeder, with their derivative in the flow.

        |P| - P_max in MW, or (|P| - P_max) / P_max on the relative scale.
        """
        flows = self.flows(x)
        if self.margin_scale == RELATIVE_MARGINS:
            return np.abs(flows) / self.p_max - 1.0, np.sign(flows) / self.p_max
        return np.abs(flows) - self.p_max, np.sign(flows)

    def objective(self, x: np.ndarray) -> Tuple[float, np.ndarray]:
        slack = self.batch.slack(x)
        value = float((self.prices * x).sum() + self.slack_price * tree_mean(slack))
        grad = self.prices + self.slack_price * self.batch.slack_contract(np.full(self.count, 1.0 / self.count))
        return value, grad

    def psi(self, x: np.ndarray, p: SmoothingParams) -> Tuple[np.ndarray, np.ndarray]:
        """Per-feeder (1/N) sum theta(h_n); values (F,), jacobian (F, m)."""
        s, ds_dflow = self.margins(x)
        weights = theta_ds(p, s) * ds_dflow / self.count
        return tree_mean(theta(p, s)), self.batch.flow_contract(weights)

    def phi(self, x: np.ndarray, p: SmoothingParams) -> Tuple[np.ndarray, np.ndarray]:
        """Per-feeder (1/N) sum theta(-h_n); values (F,), jacobian (F, m)."""
        s, ds_dflow = self.margins(x)
        weights = -theta_ds(p, -s) * ds_dflow / self.count
        return tree_mean(theta(p, -s)), self.batch.flow_contract(weights)

    def bound_penalty(self, x: np.ndarray) -> Tuple[float, np.ndarray]:
        """Squared hinge of every sample's angles and slack power against their bounds."""
        net = self.network
        angles = self.batch.angles(x)
        a_hinge = np.maximum(angles - net.angle_max, 0.0) - np.maximum(net.angle_min - angles, 0.0)
        slack = self.batch.slack(x)
        s_hinge = (np.maximum(slack - net.slack_source.p_max, 0.0)
                   - np.maximum(net.slack_source.p_min - slack, 0.0))
        value = float(tree_sum((a_hinge ** 2).sum(axis=-1)) + tree_sum(s_hinge ** 2))
        grad = self.batch.angle_contract(2.0 * a_hinge).sum(axis=0) + self.batch.slack_contract(2.0 * s_hinge)
        return value, grad

    def violation_rates(self, x: np.ndarray) -> np.ndarray:
        """Empirical (1/N) sum I(h_n) per feeder."""
        s, _ = self.margins(x)
        return tree_mean(indicator(s))

    def violation_counts(self, x: np.ndarray) -> np.ndarray:
        """Samples with |P| >= P_max, per feeder (h >= 0, as in the indicator)."""
        return np.count_nonzero(np.abs(self.flows(x)) >= self.p_max, axis=0)

    def bound_audit(self, x: np.ndarray) -> Dict[str, int]:
        net = self.network
        angles = self.batch.angles(x)
        slack = self.batch.slack(x)
        return {
            "angle_violations": int(np.count_nonzero(((angles > net.angle_max) | (angles < net.angle_min)).any(axis=1))),
            "slack_violations": int(np.count_nonzero((slack > net.slack_source.p_max) | (slack < net.slack_source.p_min))),
            "samples": self.count,
        }

    def kinked_feeders(self, x: np.ndarray, step: float) -> Set[int]:
        """Feeders whose flow crosses 0 within a finite-difference stencil of `step`."""
        b = self.batch
        reach = (np.abs(b.wind) @ np.abs(b.flow_wind).T + np.abs(b.flow_gen).sum(axis=1)) * step
        near = (np.abs(self.flows(x)) <= reach).any(axis=0)
        return {int(k) for k in np.flatnonzero(near)}


def _vector(net: Network, u: Union[Decision, np.ndarray]) -> np.ndarray:
    return u.to_vector(net) if isinstance(u, Decision) else np.asarray(u, dtype=float)


def objective(net: Network, u: Decision, scenarios: ScenarioSet) -> Tuple[float, np.ndarray]:
    return SampleAverage(net, scenarios).objective(_vector(net, u))


def feeder_margin(net: Network, u: Decision, s: Scenario, feeder: FeederRef) -> Tuple[float, np.ndarray]:
    """h = |P| - P_max in MW for one scenario, with gradient sign(P) dP/du."""
    model = DCModel(net)
    sens = model.sensitivity(s)
    key = feeder.key if isinstance(feeder, Feeder) else tuple(feeder)
    k = next((i for i, f in enumerate(net.feeders) if key in (f.key, (f.to_bus, f.from_bus))), None)
    if k is None:
        raise KeyError(f"no feeder between buses {key[0]} and {key[1]}")
    flow = sens.flows(_vector(net, u))[k]
    return float(abs(flow) - net.feeders[k].p_max), np.sign(flow) * sens.flow_gradient[k]


def psi_inner(net: Network, u: Decision, scenarios: ScenarioSet, feeder: FeederRef,
              p: SmoothingParams, margin_scale: str = MW_MARGINS) -> Tuple[float, np.ndarray]:
    _require_majorant(p)
    sa = SampleAverage(net, scenarios, margin_scale=margin_scale)
    k = sa.feeder_index(feeder)
    values, jac = sa.psi(_vector(net, u), p)
    return float(values[k]), jac[k]


def phi_outer(net: Network, u: Decision, scenarios: ScenarioSet, feeder: FeederRef,
              p: SmoothingParams, margin_scale: str = MW_MARGINS) -> Tuple[float, np.ndarray]:
    _require_majorant(p)
    sa = SampleAverage(net, scenarios, margin_scale=margin_scale)
    k = sa.feeder_index(feeder)
    values, jac = sa.phi(_vector(net, u), p)
    return float(values[k]), jac[k]


def bound_penalty(net: Network, u: Decision, scenarios: ScenarioSet) -> Tuple[float, np.ndarray]:
    return SampleAverage(net, scenarios).bound_penalty(_vector(net, u))


def _no_kinks(x: np.ndarray, step: float) -> Set[str]:
    return set()


@dataclass(frozen=True)
class AssembledProblem:
    """A box-constrained NLP: minimize objective(x) s.t. constraints(x) <= 0.

    `objective` is the merit handed to the solver; `cost` is the expected cost
    reported to the user (they differ by the weighted bound penalty).
    `evaluators` lists every scalar function with its gradient for checking.
    """
    variant: str
    lower: np.ndarray
    upper: np.ndarray
    objective: Evaluator
    constraints: Optional[ConstraintEvaluator] = None
    constraint_names: Tuple[str, ...] = ()
    evaluators: Dict[str, Evaluator] = field(default_factory=dict)
    kinked: Callable[[np.ndarray, float], Set[str]] = _no_kinks
    cost: Optional[Evaluator] = None
    smoothing: Optional[SmoothingParams] = None
    network: Optional[Network] = None
    scenarios: Optional[ScenarioSet] = None
    sample_average: Optional[SampleAverage] = None
    penalty_weight: float = 0.0

    def to_vector(self, u) -> np.ndarray:
        if isinstance(u, Decision):
            return u.to_vector(self.network)
        return np.asarray(u, dtype=float)

    def to_decision(self, x: np.ndarray) -> Optional[Decision]:
        return Decision.from_vector(self.network, x) if self.network is not None else None

    def constraint_values(self, x: np.ndarray) -> np.ndarray:
        if self.constraints is None:
            return np.zeros(0)
        return self.constraints(x)[0]

    def summary(self, x: np.ndarray) -> Dict:
        """Reported quantities at x: cost, merit, constraint values and audits."""
        merit = float(self.objective(x)[0])
        out = {"objective": float(self.cost(x)[0]) if self.cost else merit, "merit": merit}
        sa = self.sample_average
        if sa is None:
            out["constraint_values"] = dict(zip(self.constraint_names, map(float, self.constraint_values(x))))
            return out
        if self.variant == INNER:
            values = sa.psi(x, self.smoothing)[0]
        elif self.variant == OUTER:
            values = sa.phi(x, self.smoothing)[0]
        else:
            values = np.abs(sa.flows(x))[0]
        out["constraint_values"] = {label: float(v) for label, v in zip(sa.labels, values)}
        out["violation_rates"] = {label: float(v) for label, v in zip(sa.labels, sa.violation_rates(x))}
        out["bound_audit"] = sa.bound_audit(x)
        return out


def _stochastic(sa: SampleAverage, variant: str, p: SmoothingParams, weight: float) -> AssembledProblem:
    net = sa.network
    n = sa.count
    lower, upper = decision_bounds(net)

    def cost(x):
        return sa.objective(x)

    def penalty(x):
        value, grad = sa.bound_penalty(x)
        return weight * value / n, weight * grad / n

    def merit(x):
        c_value, c_grad = sa.objective(x)
        p_value, p_grad = penalty(x)
        return c_value + p_value, c_grad + p_grad

    if variant == INNER:
        def constraints(x):
            values, jac = sa.psi(x, p)
            return values - (1.0 - sa.alpha), jac
        prefix = "psi"
    else:
        def constraints(x):
            values, jac = sa.phi(x, p)
            return sa.alpha - values, -jac
        prefix = "phi"

    names = tuple(f"{prefix}[{label}]" for label in sa.labels)

    def one(k):
        def evaluate(x):
            values, jac = constraints(x)
            return float(values[k]), jac[k]
        return evaluate

    evaluators = {"objective": cost, "penalty": penalty}
    evaluators.update({name: one(k) for k, name in enumerate(names)})

    def kinked(x, step):
        return {names[k] for k in sa.kinked_feeders(x, step)}

    return AssembledProblem(
        variant=variant, lower=lower, upper=upper, objective=merit, constraints=constraints,
        constraint_names=names, evaluators=evaluators, kinked=kinked, cost=cost, smoothing=p,
        network=net, scenarios=sa.scenarios, sample_average=sa, penalty_weight=weight,
    )


def _deterministic(net: Network) -> AssembledProblem:
    """Hard linear limits at the forecast scenario, each row scaled to be dimensionless."""
    forecast = forecast_scenarios(net)
    sa = SampleAverage(net, forecast)
    lower, upper = decision_bounds(net)
    slack = net.slack_source
    slack_scale = max(abs(slack.p_min), abs(slack.p_max), 1.0)
    angle_scale = max(abs(net.angle_min), abs(net.angle_max))
    others = [k for k, bus in enumerate(sa.model.buses) if bus != sa.model.slack]

    def constraints(x):
        flows = sa.flows(x)[0]
        flow_jac = sa.batch.flow_contract(np.ones((1, len(net.feeders))))
        ps = sa.batch.slack(x)[0]
        ps_grad = sa.batch.slack_contract(np.ones(1))
        angles = sa.batch.angles(x)[0][others]
        angle_jac = sa.batch.angle_contract(np.ones((1, len(sa.model.buses))))[others]
        values = np.concatenate([
            (flows - sa.p_max) / sa.p_max, (-flows - sa.p_max) / sa.p_max,
            [(ps - slack.p_max) / slack_scale, (slack.p_min - ps) / slack_scale],
            (angles - net.angle_max) / angle_scale, (net.angle_min - angles) / angle_scale,
        ])
        jac = np.vstack([
            flow_jac / sa.p_max[:, None], -flow_jac / sa.p_max[:, None],
            ps_grad[None, :] / slack_scale, -ps_grad[None, :] / slack_scale,
            angle_jac / angle_scale, -angle_jac / angle_scale,
        ])
        return values, jac

    buses = [sa.model.buses[k] for k in others]
    names = tuple(
        [f"flow_max[{l}]" for l in sa.labels] + [f"flow_min[{l}]" for l in sa.labels]
        + ["slack_max", "slack_min"]
        + [f"angle_max[{b}]" for b in buses] + [f"angle_min[{b}]" for b in buses]
    )

    def one(k):
        def evaluate(x):
            values, jac = constraints(x)
            return float(values[k]), jac[k]
        return evaluate

    evaluators = {"objective": sa.objective}
    evaluators.update({name: one(k) for k, name in enumerate(names)})

    return AssembledProblem(
        variant=DETERMINISTIC, lower=lower, upper=upper, objective=sa.objective, constraints=constraints,
        constraint_names=names, evaluators=evaluators, cost=sa.objective,
        network=net, scenarios=forecast, sample_average=sa,
    )


def assemble(net: Network, scenarios: Optional[ScenarioSet], variant: str, p: Optional[SmoothingParams] = None,
             penalty_weight: float = DEFAULT_PENALTY_WEIGHT,
             sample_average: Optional[SampleAverage] = None,
             margin_scale: str = MW_MARGINS) -> AssembledProblem:
    """Builds the inner, outer or deterministic problem.

    The deterministic variant ignores `scenarios` and uses the forecast scenario.
    A prebuilt `sample_average` over the same inputs may be passed to share its
    batched sensitivities across calls; its own margin scale is then used.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {', '.join(VARIANTS)}")
    if variant == DETERMINISTIC:
        return _deterministic(net)
    if p is None:
        raise ValueError(f"the {variant} variant needs smoothing parameters")
    _require_majorant(p)
    if penalty_weight < 0:
        raise ValueError(f"penalty weight must be non-negative, got {penalty_weight}")
    if sample_average is None:
        if scenarios is None:
            raise ValueError(f"the {variant} variant needs a scenario set")
        sample_average = SampleAverage(net, scenarios, margin_scale=margin_scale)
    return _stochastic(sample_average, variant, p, penalty_weight)

