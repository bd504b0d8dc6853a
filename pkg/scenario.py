"""Joint samples of wind power and demand, drawn pseudo-randomly or from a
Halton sequence, and their CSV form."""

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy import stats
from scipy.stats import qmc

from network import DistributionSpec, Network, resolved_params

logger = logging.getLogger(__name__)

MAX_HALTON_DIMENSION = 20
INVERSE_CDF_TOL = 1e-10
MONTE_CARLO = "monte-carlo"
QUASI_MONTE_CARLO = "quasi-monte-carlo"
FORECAST = "forecast"
SOURCES = (MONTE_CARLO, QUASI_MONTE_CARLO)

_COLUMN = re.compile(r"^(wind|load)_bus_(\d+)$")

SeedLike = Union[int, np.random.SeedSequence, np.random.Generator, None]


class ScenarioError(ValueError):
    pass


class ScenarioFormatError(ScenarioError):
    pass


class InverseCdfError(ScenarioError):
    pass


@dataclass(frozen=True)
class Scenario:
    sample_index: int
    wind: Dict[int, float]
    load: Dict[int, float]


@dataclass(frozen=True, eq=False)
class ScenarioSet:
    """N scenarios stored column-wise: wind is (N, wind farms), load is (N, loads).

    Columns follow `wind_buses` and `load_buses`, both ascending.
    """
    wind_buses: Tuple[int, ...]
    load_buses: Tuple[int, ...]
    wind: np.ndarray
    load: np.ndarray
    seed: Optional[int] = None
    source: str = MONTE_CARLO
    offset: int = 0

    def __post_init__(self):
        wind = np.asarray(self.wind, dtype=float)
        load = np.asarray(self.load, dtype=float)
        if wind.ndim != 2 or wind.shape[1] != len(self.wind_buses):
            raise ScenarioError(f"wind must be (N, {len(self.wind_buses)}), got shape {wind.shape}")
        if load.ndim != 2 or load.shape[1] != len(self.load_buses):
            raise ScenarioError(f"load must be (N, {len(self.load_buses)}), got shape {load.shape}")
        if wind.shape[0] != load.shape[0]:
            raise ScenarioError(f"wind has {wind.shape[0]} rows but load has {load.shape[0]}")
        wind.setflags(write=False)
        load.setflags(write=False)
        object.__setattr__(self, "wind", wind)
        object.__setattr__(self, "load", load)

    @property
    def count(self) -> int:
        return self.wind.shape[0]

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, n: int) -> Scenario:
        if not -self.count <= n < self.count:
            raise IndexError(f"scenario {n} out of range for {self.count} scenarios")
        n %= self.count
        return Scenario(
            sample_index=n,
            wind={bus: float(self.wind[n, k]) for k, bus in enumerate(self.wind_buses)},
            load={bus: float(self.load[n, k]) for k, bus in enumerate(self.load_buses)},
        )

    def __iter__(self) -> Iterator[Scenario]:
        return (self[n] for n in range(self.count))

    def __eq__(self, other) -> bool:
        if not isinstance(other, ScenarioSet):
            return NotImplemented
        return (
            self.wind_buses == other.wind_buses
            and self.load_buses == other.load_buses
            and self.seed == other.seed
            and self.source == other.source
            and self.offset == other.offset
            and np.array_equal(self.wind, other.wind)
            and np.array_equal(self.load, other.load)
        )

    def subset(self, start: int, stop: int) -> "ScenarioSet":
        # rows keep their values; provenance stays that of the parent set
        return ScenarioSet(self.wind_buses, self.load_buses, self.wind[start:stop], self.load[start:stop],
                           seed=self.seed, source=self.source, offset=self.offset)

    @property
    def provenance(self) -> Dict:
        return {"count": self.count, "seed": self.seed, "source": self.source, "offset": self.offset}


def sample_beta(a: float, b: float, count: int, seed: SeedLike) -> np.ndarray:
    """Beta(a, b) draws as X / (X + Y) with X ~ Gamma(a), Y ~ Gamma(b)."""
    if not (a > 0 and b > 0):
        raise ScenarioError(f"beta shapes must be positive, got a={a}, b={b}")
    if count < 1:
        raise ScenarioError(f"count must be at least 1, got {count}")
    rng = np.random.default_rng(seed)
    x = rng.standard_gamma(a, count)
    y = rng.standard_gamma(b, count)
    return x / (x + y)


def halton(dimension: int, count: int, offset: int = 0) -> np.ndarray:
    """First `count` Halton points (after skipping `offset`), bases the first primes.

    The origin of the sequence is always skipped, so dimension 1 starts 1/2, 1/4, 3/4.
    """
    if not 1 <= dimension <= MAX_HALTON_DIMENSION:
        raise ScenarioError(f"halton dimension must be in 1..{MAX_HALTON_DIMENSION}, got {dimension}")
    if count < 1:
        raise ScenarioError(f"count must be at least 1, got {count}")
    if offset < 0:
        raise ScenarioError(f"offset must be non-negative, got {offset}")
    engine = qmc.Halton(d=dimension, scramble=False)
    engine.fast_forward(1 + offset)
    return engine.random(count)


@dataclass(frozen=True)
class _Component:
    kind: str
    bus: int
    distribution: DistributionSpec
    mean: float
    params: Dict[str, float] = field(default_factory=dict)

    @property
    def is_random(self) -> bool:
        return self.distribution.kind != "point"

    def frozen(self):
        lo, hi = self.distribution.support
        if self.distribution.kind == "beta":
            return stats.beta(self.params["a"], self.params["b"], loc=lo, scale=hi - lo)
        if self.distribution.kind == "truncated_normal":
            mu, sigma = self.params["mu"], self.params["sigma"]
            return stats.truncnorm((lo - mu) / sigma, (hi - mu) / sigma, loc=mu, scale=sigma)
        raise ScenarioError(f"unsupported distribution kind {self.distribution.kind!r}")


def _components(net: Network) -> List[_Component]:
    out = []
    for w in sorted(net.wind_farms, key=lambda w: w.bus):
        out.append(_Component("wind", w.bus, w.distribution, w.forecast, resolved_params(w.distribution, w.forecast)))
    for l in sorted(net.loads, key=lambda l: l.bus):
        out.append(_Component("load", l.bus, l.distribution, l.mean, resolved_params(l.distribution, l.mean)))
    for c in out:
        if c.distribution.kind not in ("beta", "truncated_normal", "point"):
            raise ScenarioError(f"{c.kind} at bus {c.bus}: unsupported distribution kind {c.distribution.kind!r}")
    return out


def _monte_carlo(c: _Component, count: int, seed: np.random.SeedSequence) -> np.ndarray:
    lo, hi = c.distribution.support
    if c.distribution.kind == "beta":
        return lo + (hi - lo) * sample_beta(c.params["a"], c.params["b"], count, seed)
    return c.frozen().rvs(size=count, random_state=np.random.default_rng(seed))


def _inverse_cdf(c: _Component, u: np.ndarray) -> np.ndarray:
    lo, hi = c.distribution.support
    dist = c.frozen()
    values = dist.ppf(u)
    if not np.all(np.isfinite(values)):
        raise InverseCdfError(f"{c.kind} at bus {c.bus}: inverse CDF returned non-finite values")
    # Newton polish on points where scipy's inverse misses the tolerance
    for _ in range(4):
        residual = dist.cdf(values) - u
        bad = np.abs(residual) > INVERSE_CDF_TOL
        if not bad.any():
            return values
        density = dist.pdf(values[bad])
        step = np.divide(residual[bad], density, out=np.zeros_like(density), where=density > 0)
        values[bad] = np.clip(values[bad] - step, lo, hi)
    worst = float(np.max(np.abs(dist.cdf(values) - u)))
    if worst > INVERSE_CDF_TOL:
        raise InverseCdfError(f"{c.kind} at bus {c.bus}: inverse CDF did not converge (residual {worst:.3g})")
    return values


def _assemble(net: Network, columns: Dict[Tuple[str, int], np.ndarray], count: int,
              seed: Optional[int], source: str, offset: int) -> ScenarioSet:
    wind_buses = tuple(sorted(w.bus for w in net.wind_farms))
    load_buses = tuple(sorted(l.bus for l in net.loads))
    wind = np.column_stack([columns[("wind", b)] for b in wind_buses]) if wind_buses else np.zeros((count, 0))
    load = np.column_stack([columns[("load", b)] for b in load_buses]) if load_buses else np.zeros((count, 0))
    return ScenarioSet(wind_buses, load_buses, wind, load, seed=seed, source=source, offset=offset)


def generate_scenarios(net: Network, count: int, seed: Optional[int] = 0, source: str = MONTE_CARLO,
                       offset: int = 0) -> ScenarioSet:
    """Independent draws of every wind and load component, clipped to its support.

    monte-carlo: one child SeedSequence per component, so each column is fixed by
    (seed, component) alone. quasi-monte-carlo: Halton points (skipping `offset`)
    mapped through each inverse CDF; `seed` is recorded but unused.
    """
    if count < 1:
        raise ScenarioError(f"count must be at least 1, got {count}")
    if source not in SOURCES:
        raise ScenarioError(f"unknown scenario source {source!r}; expected one of {', '.join(SOURCES)}")
    components = _components(net)
    random = [c for c in components if c.is_random]

    columns = {}
    if source == MONTE_CARLO:
        children = np.random.SeedSequence(seed).spawn(len(components))
        for c, child in zip(components, children):
            if c.is_random:
                columns[(c.kind, c.bus)] = _monte_carlo(c, count, child)
    elif random:
        if len(random) > MAX_HALTON_DIMENSION:
            raise ScenarioError(f"{len(random)} random components exceed the Halton limit of {MAX_HALTON_DIMENSION}")
        points = halton(len(random), count, offset)
        for j, c in enumerate(random):
            columns[(c.kind, c.bus)] = _inverse_cdf(c, points[:, j])

    for c in components:
        lo, hi = c.distribution.support
        if c.is_random:
            columns[(c.kind, c.bus)] = np.clip(columns[(c.kind, c.bus)], lo, hi)
        else:
            columns[(c.kind, c.bus)] = np.full(count, float(c.params["value"]))

    logger.debug("generated %d %s scenarios over %d random components", count, source, len(random))
    return _assemble(net, columns, count, seed, source, offset if source == QUASI_MONTE_CARLO else 0)


def forecast_scenarios(net: Network) -> ScenarioSet:
    """The single scenario with wind at forecast and loads at their mean."""
    columns = {("wind", w.bus): np.array([w.forecast]) for w in net.wind_farms}
    columns.update({("load", l.bus): np.array([l.mean]) for l in net.loads})
    return _assemble(net, columns, 1, None, FORECAST, 0)


def check_schema(net: Network, scenarios: ScenarioSet) -> None:
    expected = [f"wind_bus_{b}" for b in sorted(w.bus for w in net.wind_farms)]
    expected += [f"load_bus_{b}" for b in sorted(l.bus for l in net.loads)]
    found = [f"wind_bus_{b}" for b in scenarios.wind_buses] + [f"load_bus_{b}" for b in scenarios.load_buses]
    if found != expected:
        missing = [c for c in expected if c not in found]
        extra = [c for c in found if c not in expected]
        detail = []
        if missing:
            detail.append(f"missing column(s) {', '.join(missing)}")
        if extra:
            detail.append(f"unexpected column(s) {', '.join(extra)}")
        raise ScenarioFormatError(f"scenario schema does not match network: {'; '.join(detail) or 'column order differs'}")


def _header(scenarios: ScenarioSet) -> List[str]:
    return (["sample"] + [f"wind_bus_{b}" for b in scenarios.wind_buses]
            + [f"load_bus_{b}" for b in scenarios.load_buses])


def metadata_path(path: Union[str, Path]) -> Path:
    return Path(path).with_suffix(".meta.json")


def save_scenarios(scenarios: ScenarioSet, path: Union[str, Path]) -> None:
    """Writes the scenario CSV plus a `.meta.json` sidecar holding seed and source."""
    frame = pd.DataFrame(np.column_stack([scenarios.wind, scenarios.load]), columns=_header(scenarios)[1:])
    frame.insert(0, "sample", np.arange(scenarios.count))
    frame.to_csv(path, index=False, lineterminator="\n")
    with open(metadata_path(path), "w") as f:
        json.dump(scenarios.provenance, f, indent=2, sort_keys=True)
        f.write("\n")


def _parse_header(columns: List[str], path) -> Tuple[Tuple[int, ...], Tuple[int, ...]]:
    if not columns or columns[0] != "sample":
        raise ScenarioFormatError(f"{path}: header must start with 'sample'")
    wind, load = [], []
    for name in columns[1:]:
        m = _COLUMN.match(name)
        if not m:
            raise ScenarioFormatError(f"{path}: malformed header column {name!r}")
        if m.group(1) == "wind":
            if load:
                raise ScenarioFormatError(f"{path}: wind columns must precede load columns")
            wind.append(int(m.group(2)))
        else:
            load.append(int(m.group(2)))
    for kind, buses in (("wind", wind), ("load", load)):
        if buses != sorted(set(buses)):
            raise ScenarioFormatError(f"{path}: {kind} columns must be unique and in ascending bus order")
    return tuple(wind), tuple(load)


def load_scenarios(path: Union[str, Path], net: Optional[Network] = None) -> ScenarioSet:
    """Reads a scenario CSV; with `net`, the columns must match its wind farms and loads."""
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.ParserError as e:
        raise ScenarioFormatError(f"{path}: row arity mismatch: {e}") from e
    except pd.errors.EmptyDataError as e:
        raise ScenarioFormatError(f"{path}: empty file") from e
    wind_buses, load_buses = _parse_header(list(frame.columns), path)
    if frame.empty:
        raise ScenarioFormatError(f"{path}: no scenario rows")
    if frame.isna().any().any():
        row = int(np.flatnonzero(frame.isna().any(axis=1).to_numpy())[0])
        raise ScenarioFormatError(f"{path}: row arity mismatch at data row {row + 1}")

    values = {}
    for name in frame.columns:
        try:
            values[name] = np.array(frame[name].tolist(), dtype=float)
        except ValueError as e:
            raise ScenarioFormatError(f"{path}: non-numeric cell in column {name!r}: {e}") from e
    if not np.array_equal(values["sample"], np.arange(len(frame))):
        raise ScenarioFormatError(f"{path}: sample column must be 0..N-1 in order")

    provenance = {"seed": None, "source": MONTE_CARLO, "offset": 0}
    meta = metadata_path(path)
    if meta.exists():
        with open(meta, "r") as f:
            provenance.update({k: v for k, v in json.load(f).items() if k in provenance})
    else:
        logger.warning("no %s next to %s; seed and source unknown", meta.name, path)

    count = len(frame)
    scenarios = ScenarioSet(
        wind_buses, load_buses,
        np.column_stack([values[f"wind_bus_{b}"] for b in wind_buses]) if wind_buses else np.zeros((count, 0)),
        np.column_stack([values[f"load_bus_{b}"] for b in load_buses]) if load_buses else np.zeros((count, 0)),
        seed=provenance["seed"], source=provenance["source"], offset=int(provenance["offset"]),
    )
    if net is not None:
        check_schema(net, scenarios)
    logger.debug("loaded %d scenarios from %s", count, path)
    return scenarios
