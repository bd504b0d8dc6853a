"""Certification of a decision: satisfaction probabilities on fresh samples,
per-sample trajectories and the stochastic-versus-deterministic comparison."""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from config import worker_count
from dcflow import DCModel, Decision
from network import Network, network_digest
from nlp import SolveReport
from saa import SampleAverage
from scenario import MONTE_CARLO, QUASI_MONTE_CARLO, ScenarioSet, forecast_scenarios, generate_scenarios

logger = logging.getLogger(__name__)

MIN_POINTS = 2 ** 10
DEFAULT_POINTS = 2 ** 16
METHODS = {"qmc": QUASI_MONTE_CARLO, "mc": MONTE_CARLO}
CHUNK = 8192
# used when neither a seed nor a training seed is known
DEFAULT_VERIFY_SEED = 2 ** 31 - 1


class ComparisonError(ValueError):
    pass


@dataclass(frozen=True)
class ProbabilityTable:
    """Pr{|P(i,j)| <= P_max(i,j)} per feeder, keyed by the feeder's file orientation."""
    probabilities: Dict[Tuple[int, int], float]
    points: int
    method: str
    bus_ids: Tuple[int, ...]
    seed: Optional[int] = None
    offset: int = 0
    training: Optional[Dict[str, Any]] = None

    def get(self, i: int, j: int) -> Optional[float]:
        if (i, j) in self.probabilities:
            return self.probabilities[(i, j)]
        return self.probabilities.get((j, i))

    @property
    def minimum(self) -> float:
        return min(self.probabilities.values())

    def to_frame(self) -> pd.DataFrame:
        """Bus-by-bus matrix; N/A where no feeder exists."""
        rows = []
        for i in self.bus_ids:
            row = {"bus": i}
            for j in self.bus_ids:
                value = self.get(i, j) if i != j else None
                row[str(j)] = repr(value) if value is not None else "N/A"
            rows.append(row)
        return pd.DataFrame(rows, columns=["bus"] + [str(j) for j in self.bus_ids])

    def to_records(self) -> List[Dict[str, Any]]:
        return [{"from": i, "to": j, "probability": p} for (i, j), p in self.probabilities.items()]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "method": self.method,
            "points": self.points,
            "seed": self.seed,
            "offset": self.offset,
            "training": self.training,
            "feeders": self.to_records(),
        }


def save_probability_table(table: ProbabilityTable, path: Union[str, Path]) -> Path:
    """Writes the matrix CSV at `path` and the flat JSON records beside it."""
    path = Path(path)
    table.to_frame().to_csv(path, index=False, lineterminator="\n")
    records = path.with_suffix(".json")
    with open(records, "w") as f:
        json.dump(table.to_dict(), f, indent=2)
        f.write("\n")
    return records


def _verification_samples(net: Network, points: int, method: str, seed: Optional[int],
                          training: Optional[Dict[str, Any]]) -> ScenarioSet:
    training = training or {}
    if method == "qmc":
        # skip every point a quasi-random training set may have consumed
        offset = 0
        if training.get("source") == QUASI_MONTE_CARLO:
            offset = int(training.get("offset", 0)) + int(training.get("count", 0))
        return generate_scenarios(net, points, seed=None, source=QUASI_MONTE_CARLO, offset=offset)
    if seed is None:
        trained = training.get("seed")
        seed = trained + 1 if trained is not None else DEFAULT_VERIFY_SEED
    if training.get("source") == MONTE_CARLO and seed == training.get("seed"):
        raise ValueError(f"verification seed {seed} equals the training seed")
    return generate_scenarios(net, points, seed=seed, source=MONTE_CARLO)


def satisfied_counts(net: Network, u: Decision, scenarios: ScenarioSet, model: Optional[DCModel] = None,
                     threads: Optional[int] = None) -> np.ndarray:
    """Per feeder, the number of samples with |P| <= P_max, counted chunk by chunk."""
    model = model or DCModel(net)
    x = u.to_vector(net)
    p_max = np.array([f.p_max for f in net.feeders])
    bounds = [(start, min(start + CHUNK, scenarios.count)) for start in range(0, scenarios.count, CHUNK)]

    def count(bound):
        flows = model.batch(scenarios.subset(*bound)).flows(x)
        return np.count_nonzero(np.abs(flows) <= p_max, axis=0)

    with ThreadPoolExecutor(max_workers=threads or worker_count()) as pool:
        counts = list(pool.map(count, bounds))
    # integer sums are exact in any order
    return np.sum(counts, axis=0)


def true_probability(net: Network, u: Decision, points: int = DEFAULT_POINTS, method: str = "qmc",
                     seed: Optional[int] = None, training: Optional[Dict[str, Any]] = None,
                     threads: Optional[int] = None) -> ProbabilityTable:
    """Estimates each feeder's satisfaction probability on `points` fresh samples.

    `training` is the provenance of the scenario set the decision was trained
    on; QMC skips past its Halton points and MC refuses its seed.
    """
    if points < MIN_POINTS:
        raise ValueError(f"points must be at least {MIN_POINTS}, got {points}")
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")
    samples = _verification_samples(net, points, method, seed, training)
    counts = satisfied_counts(net, u, samples, threads=threads)
    table = ProbabilityTable(
        probabilities={f.key: float(c) / points for f, c in zip(net.feeders, counts)},
        points=points,
        method=method,
        bus_ids=net.bus_ids,
        seed=samples.seed,
        offset=samples.offset,
        training=training,
    )
    logger.info("verified %d %s points: minimum satisfaction %.4f", points, method, table.minimum)
    return table


@dataclass(frozen=True)
class TrajectoryBundle:
    labels: Tuple[str, ...]
    flows: np.ndarray   # (N, F) MW
    slack: np.ndarray   # (N,) MW
    cost: np.ndarray    # (N,) $/h
    decision: Decision

    @property
    def count(self) -> int:
        return self.flows.shape[0]

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.flows, columns=[f"flow_{label}" for label in self.labels])
        frame.insert(0, "sample", np.arange(self.count))
        frame["slack_mw"] = self.slack
        frame["cost_per_h"] = self.cost
        return frame


def trajectories(net: Network, u: Decision, scenarios: ScenarioSet) -> TrajectoryBundle:
    sa = SampleAverage(net, scenarios)
    x = u.to_vector(net)
    slack = sa.batch.slack(x)
    cost = float((sa.prices * x).sum()) + sa.slack_price * slack
    return TrajectoryBundle(sa.labels, sa.flows(x), slack, cost, u)


def save_trajectories(bundle: TrajectoryBundle, path: Union[str, Path]) -> None:
    bundle.to_frame().to_csv(path, index=False, lineterminator="\n")


@dataclass(frozen=True)
class FeederComparison:
    feeder: str
    alpha: float
    stochastic_violations: int
    deterministic_violations: int
    stochastic_rate: float
    deterministic_rate: float
    flagged: bool


@dataclass(frozen=True)
class ComparisonSummary:
    samples: int
    feeders: Tuple[FeederComparison, ...]
    stochastic_objective: float
    deterministic_objective: float
    stochastic_forecast_objective: float
    deterministic_forecast_objective: float

    @property
    def flagged(self) -> List[str]:
        return [f.feeder for f in self.feeders if f.flagged]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "samples": self.samples,
            "flagged": self.flagged,
            "feeders": [vars(f) for f in self.feeders],
            "objective": {
                "stochastic": self.stochastic_objective,
                "deterministic": self.deterministic_objective,
                "stochastic_at_forecast": self.stochastic_forecast_objective,
                "deterministic_at_forecast": self.deterministic_forecast_objective,
            },
        }


def _decision(report: SolveReport, name: str) -> Decision:
    if report.u_star is None:
        raise ComparisonError(f"{name} report carries no decision")
    return report.u_star


def compare(net: Network, scenarios: ScenarioSet, stochastic: SolveReport,
            deterministic: SolveReport) -> ComparisonSummary:
    """Violation counts of both decisions over `scenarios`, per feeder.

    A feeder is flagged when the deterministic decision's violation rate
    exceeds 1 - alpha while the stochastic one stays within it.
    """
    digest = network_digest(net)
    for name, report in (("stochastic", stochastic), ("deterministic", deterministic)):
        if report.network_digest is not None and report.network_digest != digest:
            raise ComparisonError(f"{name} report was solved on a different network")
    u_stoch, u_det = _decision(stochastic, "stochastic"), _decision(deterministic, "deterministic")

    sa = SampleAverage(net, scenarios)
    x_stoch, x_det = u_stoch.to_vector(net), u_det.to_vector(net)
    v_stoch, v_det = sa.violation_counts(x_stoch), sa.violation_counts(x_det)
    feeders = []
    for k, f in enumerate(net.feeders):
        rate_s, rate_d = v_stoch[k] / sa.count, v_det[k] / sa.count
        allowed = 1.0 - f.alpha
        feeders.append(FeederComparison(
            feeder=f.label, alpha=f.alpha,
            stochastic_violations=int(v_stoch[k]), deterministic_violations=int(v_det[k]),
            stochastic_rate=float(rate_s), deterministic_rate=float(rate_d),
            flagged=bool(rate_d > allowed and rate_s <= allowed),
        ))

    forecast = SampleAverage(net, forecast_scenarios(net), model=sa.model)
    summary = ComparisonSummary(
        samples=sa.count,
        feeders=tuple(feeders),
        stochastic_objective=sa.objective(x_stoch)[0],
        deterministic_objective=sa.objective(x_det)[0],
        stochastic_forecast_objective=forecast.objective(x_stoch)[0],
        deterministic_forecast_objective=forecast.objective(x_det)[0],
    )
    if summary.flagged:
        logger.info("deterministic decision breaks the chance constraint on %s", ", ".join(summary.flagged))
    return summary
