"""DC power flow on a network: nodal balance, feeder flows, slack power and their
affine dependence on the decision vector."""

import logging
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import networkx as nx
import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from network import Network
from scenario import Scenario, ScenarioSet

logger = logging.getLogger(__name__)


class StructuralError(ValueError):
    pass


@dataclass(frozen=True)
class Decision:
    beta_w: Dict[int, float]
    p_g: Dict[int, float]

    def to_vector(self, net: Network) -> np.ndarray:
        try:
            values = [self.beta_w[w.bus] for w in wind_order(net)]
            values += [self.p_g[g.bus] for g in generator_order(net)]
        except KeyError as e:
            raise ValueError(f"decision has no component for bus {e.args[0]}") from e
        return np.array(values, dtype=float)

    @classmethod
    def from_vector(cls, net: Network, x: Sequence[float]) -> "Decision":
        winds, gens = wind_order(net), generator_order(net)
        if len(x) != len(winds) + len(gens):
            raise ValueError(f"decision vector has {len(x)} entries, network needs {len(winds) + len(gens)}")
        return cls(
            beta_w={w.bus: float(x[k]) for k, w in enumerate(winds)},
            p_g={g.bus: float(x[len(winds) + k]) for k, g in enumerate(gens)},
        )


def wind_order(net: Network):
    return sorted(net.wind_farms, key=lambda w: w.bus)


def generator_order(net: Network):
    return sorted(net.generators, key=lambda g: g.bus)


def decision_names(net: Network) -> List[str]:
    return [f"beta_w_{w.bus}" for w in wind_order(net)] + [f"p_g_{g.bus}" for g in generator_order(net)]


def decision_bounds(net: Network) -> Tuple[np.ndarray, np.ndarray]:
    """Decision box: curtailment in [0, 1], generation within its limits."""
    winds, gens = wind_order(net), generator_order(net)
    lower = np.array([0.0] * len(winds) + [g.p_min for g in gens])
    upper = np.array([1.0] * len(winds) + [g.p_max for g in gens])
    return lower, upper


def default_decision(net: Network) -> Decision:
    return Decision(
        beta_w={w.bus: 1.0 for w in wind_order(net)},
        p_g={g.bus: 0.5 * (g.p_min + g.p_max) for g in generator_order(net)},
    )


@dataclass(frozen=True)
class SampleState:
    angles: Dict[int, float]
    flows: Dict[Tuple[int, int], float]
    slack_power: float

    def flow(self, i: int, j: int) -> float:
        if (i, j) in self.flows:
            return self.flows[(i, j)]
        return -self.flows[(j, i)]


@dataclass(frozen=True)
class AffineSensitivity:
    """Flows, slack power and angles of one scenario as constant + gradient . u."""
    feeders: Tuple[Tuple[int, int], ...]
    buses: Tuple[int, ...]
    flow_constant: np.ndarray   # (F,) MW
    flow_gradient: np.ndarray   # (F, m)
    slack_constant: float
    slack_gradient: np.ndarray  # (m,)
    angle_constant: np.ndarray  # (n,) rad
    angle_gradient: np.ndarray  # (n, m)

    def flows(self, x: np.ndarray) -> np.ndarray:
        return self.flow_constant + (self.flow_gradient * x).sum(axis=-1)

    def slack(self, x: np.ndarray) -> float:
        return float(self.slack_constant + (self.slack_gradient * x).sum())

    def angles(self, x: np.ndarray) -> np.ndarray:
        return self.angle_constant + (self.angle_gradient * x).sum(axis=-1)


def _tree_sum(values: np.ndarray) -> np.ndarray:
    # numpy reduces a contiguous last axis pairwise; the order is fixed by the layout
    return np.ascontiguousarray(np.moveaxis(values, 0, -1)).sum(axis=-1)


@dataclass(frozen=True)
class BatchSensitivity:
    """AffineSensitivity for every scenario of a set, kept in factored form.

    Flow of feeder f in scenario n:
        flow_constant[n, f] + sum_w wind[n, w] * x_w * flow_wind[f, w] + sum_g flow_gen[f, g] * x_g
    and likewise for angles; slack power is load_total - sum_w wind * x_w - sum_g x_g.
    """
    n_wind: int
    wind: np.ndarray            # (N, nw) available wind MW
    flow_constant: np.ndarray   # (N, F)
    flow_wind: np.ndarray       # (F, nw)
    flow_gen: np.ndarray        # (F, ng)
    angle_constant: np.ndarray  # (N, n)
    angle_wind: np.ndarray      # (n, nw)
    angle_gen: np.ndarray       # (n, ng)
    load_total: np.ndarray      # (N,)

    @property
    def count(self) -> int:
        return self.flow_constant.shape[0]

    def _split(self, x: np.ndarray):
        return x[: self.n_wind], x[self.n_wind:]

    def _affine(self, constant, wind_cols, gen_cols, x):
        beta, p_g = self._split(x)
        injected = self.wind * beta                                    # (N, nw)
        out = constant + (injected[:, None, :] * wind_cols[None, :, :]).sum(axis=-1)
        return out + (gen_cols * p_g).sum(axis=-1)

    def flows(self, x: np.ndarray) -> np.ndarray:
        return self._affine(self.flow_constant, self.flow_wind, self.flow_gen, x)

    def angles(self, x: np.ndarray) -> np.ndarray:
        return self._affine(self.angle_constant, self.angle_wind, self.angle_gen, x)

    def slack(self, x: np.ndarray) -> np.ndarray:
        beta, p_g = self._split(x)
        return self.load_total - (self.wind * beta).sum(axis=-1) - p_g.sum()

    def _contract(self, weights, wind_cols, gen_cols) -> np.ndarray:
        # sum_n weights[n, k] * d(quantity[n, k])/dx  ->  (K, m)
        wind_part = _tree_sum(weights[:, :, None] * self.wind[:, None, :]) * wind_cols
        gen_part = _tree_sum(weights)[:, None] * gen_cols
        return np.concatenate([wind_part, gen_part], axis=1)

    def flow_contract(self, weights: np.ndarray) -> np.ndarray:
        return self._contract(weights, self.flow_wind, self.flow_gen)

    def angle_contract(self, weights: np.ndarray) -> np.ndarray:
        return self._contract(weights, self.angle_wind, self.angle_gen)

    def slack_contract(self, weights: np.ndarray) -> np.ndarray:
        # sum_n weights[n] * d(slack[n])/dx  ->  (m,)
        wind_part = -_tree_sum(weights[:, None] * self.wind)
        gen_part = -np.full(self.flow_gen.shape[1], _tree_sum(weights))
        return np.concatenate([wind_part, gen_part])

    def flow_gradient(self, n: int) -> np.ndarray:
        return np.concatenate([self.flow_wind * self.wind[n], self.flow_gen], axis=1)


class DCModel:
    """Reduced susceptance system of a network, factored once.

    The factorization is independent of decisions and scenarios, so one model
    serves every solve on the same network and is safe to share read-only.
    """

    def __init__(self, net: Network):
        self.network = net
        self.buses = net.bus_ids
        self.slack = net.slack_bus
        self.index = {bus: k for k, bus in enumerate(self.buses)}
        self.feeders = tuple(f.key for f in net.feeders)
        self.susceptance = np.array([f.susceptance for f in net.feeders])

        graph = nx.Graph()
        graph.add_nodes_from(self.buses)
        graph.add_edges_from(self.feeders)
        if not nx.is_connected(graph):
            raise StructuralError("feeder graph is not connected; reduced susceptance matrix is singular")

        n = len(self.buses)
        laplacian = np.zeros((n, n))
        incidence = np.zeros((len(self.feeders), n))
        for k, (i, j) in enumerate(self.feeders):
            a, b = self.index[i], self.index[j]
            incidence[k, a], incidence[k, b] = 1.0, -1.0
            bk = self.susceptance[k]
            laplacian[a, a] += bk
            laplacian[b, b] += bk
            laplacian[a, b] -= bk
            laplacian[b, a] -= bk
        self.incidence = incidence

        self.reduced = [k for k, bus in enumerate(self.buses) if bus != self.slack]
        try:
            self.factor = cho_factor(laplacian[np.ix_(self.reduced, self.reduced)])
        except LinAlgError as e:
            raise StructuralError(f"reduced susceptance matrix is singular: {e}") from e

        # bus injection -> angle (slack row and column zero) and -> feeder flow
        self.angle_map = np.zeros((n, n))
        if self.reduced:
            self.angle_map[np.ix_(self.reduced, self.reduced)] = cho_solve(self.factor, np.eye(len(self.reduced)))
        self.ptdf = (self.susceptance[:, None] * incidence) @ self.angle_map

        winds, gens = wind_order(net), generator_order(net)
        self.wind_buses = [w.bus for w in winds]
        self.gen_buses = [g.bus for g in gens]
        self.wind_idx = [self.index[b] for b in self.wind_buses]
        self.gen_idx = [self.index[b] for b in self.gen_buses]
        self.n_decisions = len(winds) + len(gens)

    def _injection(self, x: np.ndarray, s: Scenario) -> Tuple[np.ndarray, float]:
        p = np.zeros(len(self.buses))
        nw = len(self.wind_buses)
        for k, bus in enumerate(self.wind_buses):
            p[self.index[bus]] += x[k] * s.wind.get(bus, 0.0)
        for k, bus in enumerate(self.gen_buses):
            p[self.index[bus]] += x[nw + k]
        for bus, mw in s.load.items():
            p[self.index[bus]] -= mw
        return p, -float(p.sum())

    def solve(self, u: Decision, s: Scenario) -> SampleState:
        x = u.to_vector(self.network)
        p, slack_power = self._injection(x, s)
        theta = np.zeros(len(self.buses))
        if self.reduced:
            theta[self.reduced] = cho_solve(self.factor, p[self.reduced])
        flows = self.susceptance * (self.incidence @ theta)
        return SampleState(
            angles={bus: float(theta[k]) for k, bus in enumerate(self.buses)},
            flows={key: float(flows[k]) for k, key in enumerate(self.feeders)},
            slack_power=slack_power,
        )

    def sensitivity(self, s: Scenario) -> AffineSensitivity:
        load = np.zeros(len(self.buses))
        for bus, mw in s.load.items():
            load[self.index[bus]] += mw
        wind = np.array([s.wind.get(bus, 0.0) for bus in self.wind_buses])

        flow_gradient = np.concatenate([self.ptdf[:, self.wind_idx] * wind, self.ptdf[:, self.gen_idx]], axis=1)
        angle_gradient = np.concatenate([self.angle_map[:, self.wind_idx] * wind, self.angle_map[:, self.gen_idx]], axis=1)
        return AffineSensitivity(
            feeders=self.feeders,
            buses=self.buses,
            flow_constant=-(self.ptdf * load).sum(axis=-1),
            flow_gradient=flow_gradient,
            slack_constant=float(load.sum()),
            slack_gradient=np.concatenate([-wind, -np.ones(len(self.gen_buses))]),
            angle_constant=-(self.angle_map * load).sum(axis=-1),
            angle_gradient=angle_gradient,
        )

    def batch(self, scenarios: ScenarioSet) -> BatchSensitivity:
        if tuple(self.wind_buses) != scenarios.wind_buses:
            raise ValueError(f"scenario wind columns {scenarios.wind_buses} do not match wind farms {tuple(self.wind_buses)}")
        load_idx = [self.index[bus] for bus in scenarios.load_buses]
        loads = scenarios.load                                       # (N, nl)
        flow_load = self.ptdf[:, load_idx]                           # (F, nl)
        angle_load = self.angle_map[:, load_idx]                     # (n, nl)
        return BatchSensitivity(
            n_wind=len(self.wind_buses),
            wind=scenarios.wind,
            flow_constant=-(loads[:, None, :] * flow_load[None, :, :]).sum(axis=-1),
            flow_wind=self.ptdf[:, self.wind_idx],
            flow_gen=self.ptdf[:, self.gen_idx],
            angle_constant=-(loads[:, None, :] * angle_load[None, :, :]).sum(axis=-1),
            angle_wind=self.angle_map[:, self.wind_idx],
            angle_gen=self.angle_map[:, self.gen_idx],
            load_total=loads.sum(axis=-1),
        )


def solve_flow(net: Network, u: Decision, s: Scenario) -> SampleState:
    return DCModel(net).solve(u, s)


def sensitivities(net: Network, s: Scenario) -> AffineSensitivity:
    return DCModel(net).sensitivity(s)


def nodal_residuals(net: Network, u: Decision, s: Scenario, state: SampleState) -> Dict[int, float]:
    """Injection minus outgoing flow at every bus; zero for a solved state."""
    residual = {b.id: 0.0 for b in net.buses}
    for w in net.wind_farms:
        residual[w.bus] += u.beta_w[w.bus] * s.wind.get(w.bus, 0.0)
    for g in net.generators:
        residual[g.bus] += u.p_g[g.bus]
    for bus, mw in s.load.items():
        residual[bus] -= mw
    residual[net.slack_bus] += state.slack_power
    for (i, j), flow in state.flows.items():
        residual[i] -= flow
        residual[j] += flow
    return residual
