import json
import logging
import math
from dataclasses import MISSING, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union, get_args, get_origin, get_type_hints

import networkx as nx
from cryptography.hazmat.primitives import hashes

logger = logging.getLogger(__name__)

DEFAULT_ALPHA = 0.98
DEFAULT_ANGLE_BOUND = 0.5236  # rad, +-30 degrees
DEFAULT_BETA_A = 2.0
DEFAULT_RELATIVE_SIGMA = 0.05

DISTRIBUTION_PARAMS = {
    "beta": ("a", "b"),
    "truncated_normal": ("mu", "sigma"),
    "point": ("value",),
}


class NetworkError(ValueError):
    pass


class NetworkParseError(NetworkError):
    pass


@dataclass(frozen=True)
class Violation:
    code: str
    message: str


class NetworkValidationError(NetworkError):
    def __init__(self, violations: List[Violation]):
        self.violations = list(violations)
        super().__init__("; ".join(v.message for v in self.violations))


class DuplicateFeederError(NetworkValidationError):
    pass


class BusReferenceError(NetworkValidationError):
    pass


class InvariantViolationError(NetworkValidationError):
    pass


@dataclass(frozen=True)
class Bus:
    id: int
    is_slack: bool = field(default=False, metadata={"field_name": "slack"})


@dataclass(frozen=True)
class DistributionSpec:
    kind: str = field(metadata={"field_name": "type"})
    support: Tuple[float, float] = field(metadata={"field_name": "support_mw"})
    params: Dict[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class Feeder:
    from_bus: int = field(metadata={"field_name": "from"})
    to_bus: int = field(metadata={"field_name": "to"})
    susceptance: float = field(metadata={"field_name": "susceptance_mw_per_rad"})
    p_max: float = field(metadata={"field_name": "p_max_mw"})
    alpha: float = DEFAULT_ALPHA

    @property
    def key(self) -> Tuple[int, int]:
        return (self.from_bus, self.to_bus)

    @property
    def label(self) -> str:
        return f"{self.from_bus}_{self.to_bus}"


@dataclass(frozen=True)
class Generator:
    bus: int
    price: float = field(metadata={"field_name": "price_per_mwh"})
    p_min: float = field(metadata={"field_name": "p_min_mw"})
    p_max: float = field(metadata={"field_name": "p_max_mw"})


@dataclass(frozen=True)
class SlackSource:
    bus: int
    price: float = field(metadata={"field_name": "price_per_mwh"})
    p_min: float = field(metadata={"field_name": "p_min_mw"})
    p_max: float = field(metadata={"field_name": "p_max_mw"})


@dataclass(frozen=True)
class WindFarm:
    bus: int
    p_max: float = field(metadata={"field_name": "p_max_mw"})
    forecast: float = field(metadata={"field_name": "forecast_mw"})
    distribution: DistributionSpec = field(metadata={"field_name": "dist"})


@dataclass(frozen=True)
class Load:
    bus: int
    mean: float = field(metadata={"field_name": "mean_mw"})
    distribution: DistributionSpec = field(metadata={"field_name": "dist"})


@dataclass(frozen=True)
class Network:
    buses: Tuple[Bus, ...]
    feeders: Tuple[Feeder, ...]
    slack_source: SlackSource
    generators: Tuple[Generator, ...] = ()
    wind_farms: Tuple[WindFarm, ...] = ()
    loads: Tuple[Load, ...] = ()
    angle_min: float = -DEFAULT_ANGLE_BOUND
    angle_max: float = DEFAULT_ANGLE_BOUND

    @property
    def bus_ids(self) -> Tuple[int, ...]:
        return tuple(sorted(b.id for b in self.buses))

    @property
    def slack_bus(self) -> int:
        return next(b.id for b in self.buses if b.is_slack)

    def feeder(self, i: int, j: int) -> Feeder:
        for f in self.feeders:
            if {f.from_bus, f.to_bus} == {i, j}:
                return f
        raise KeyError(f"no feeder between buses {i} and {j}")


# Helper to deserialize JSON objects into the dataclasses above. JSON keys come
# from the "field_name" metadata; unknown keys are rejected.
def from_dict(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise NetworkParseError(f"{where}: expected an object, got {type(data).__name__}")

    field_names = {f.metadata.get("field_name", f.name): f for f in fields(cls)}
    unknown = sorted(set(data) - set(field_names))
    if unknown:
        raise NetworkParseError(f"{where}: unknown key(s) {', '.join(unknown)}")

    hints = get_type_hints(cls)
    init_args = {}
    for json_key, f in field_names.items():
        if json_key not in data:
            if f.default is MISSING and f.default_factory is MISSING:
                raise NetworkParseError(f"{where}.{json_key}: missing required field")
            continue
        init_args[f.name] = _coerce(hints[f.name], data[json_key], f"{where}.{json_key}")
    return cls(**init_args)


def _coerce(field_type, value: Any, where: str):
    if is_dataclass(field_type):
        return from_dict(field_type, value, where)

    origin = get_origin(field_type)
    if field_type is bool:
        if not isinstance(value, bool):
            raise NetworkParseError(f"{where}: expected true/false, got {value!r}")
        return value
    if field_type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise NetworkParseError(f"{where}: expected an integer, got {value!r}")
        return value
    if field_type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise NetworkParseError(f"{where}: expected a finite number, got {value!r}")
        return float(value)
    if field_type is str:
        if not isinstance(value, str):
            raise NetworkParseError(f"{where}: expected a string, got {value!r}")
        return value
    if origin is tuple:
        item_types = get_args(field_type)
        if not isinstance(value, list) or len(value) != len(item_types):
            raise NetworkParseError(f"{where}: expected a list of {len(item_types)} values")
        return tuple(_coerce(t, v, f"{where}[{i}]") for i, (t, v) in enumerate(zip(item_types, value)))
    if origin is dict:
        _, value_type = get_args(field_type)
        if not isinstance(value, dict):
            raise NetworkParseError(f"{where}: expected an object")
        return {str(k): _coerce(value_type, v, f"{where}.{k}") for k, v in value.items()}
    raise TypeError(f"unsupported field type {field_type!r} at {where}")


def _records(cls, data: Dict[str, Any], key: str, required: bool) -> Tuple:
    if key not in data:
        if required:
            raise NetworkParseError(f"{key}: missing required field")
        return ()
    items = data[key]
    if not isinstance(items, list):
        raise NetworkParseError(f"{key}: expected a list")
    return tuple(from_dict(cls, item, f"{key}[{i}]") for i, item in enumerate(items))


def network_from_dict(data: Any) -> Network:
    """Parses a network description without checking its invariants."""
    if not isinstance(data, dict):
        raise NetworkParseError("network file must contain a JSON object")
    known = {"buses", "feeders", "generators", "slack_source", "wind", "loads", "angle_bounds_rad"}
    unknown = sorted(set(data) - known)
    if unknown:
        raise NetworkParseError(f"unknown key(s) {', '.join(unknown)}")
    if "slack_source" not in data:
        raise NetworkParseError("slack_source: missing required field")

    angle_min, angle_max = -DEFAULT_ANGLE_BOUND, DEFAULT_ANGLE_BOUND
    if "angle_bounds_rad" in data:
        bounds = data["angle_bounds_rad"]
        if not isinstance(bounds, dict) or set(bounds) != {"min", "max"}:
            raise NetworkParseError("angle_bounds_rad: expected an object with keys min and max")
        angle_min = _coerce(float, bounds["min"], "angle_bounds_rad.min")
        angle_max = _coerce(float, bounds["max"], "angle_bounds_rad.max")

    return Network(
        buses=_records(Bus, data, "buses", required=True),
        feeders=_records(Feeder, data, "feeders", required=True),
        slack_source=from_dict(SlackSource, data["slack_source"], "slack_source"),
        generators=_records(Generator, data, "generators", required=False),
        wind_farms=_records(WindFarm, data, "wind", required=False),
        loads=_records(Load, data, "loads", required=False),
        angle_min=angle_min,
        angle_max=angle_max,
    )


def _to_record(obj) -> Dict[str, Any]:
    record = {}
    for f in fields(obj):
        value = getattr(obj, f.name)
        if is_dataclass(value):
            value = _to_record(value)
        elif isinstance(value, tuple):
            value = list(value)
        elif isinstance(value, dict):
            value = dict(value)
        record[f.metadata.get("field_name", f.name)] = value
    return record


def network_to_dict(net: Network) -> Dict[str, Any]:
    return {
        "buses": [_to_record(b) for b in net.buses],
        "feeders": [_to_record(f) for f in net.feeders],
        "generators": [_to_record(g) for g in net.generators],
        "slack_source": _to_record(net.slack_source),
        "wind": [_to_record(w) for w in net.wind_farms],
        "loads": [_to_record(l) for l in net.loads],
        "angle_bounds_rad": {"min": net.angle_min, "max": net.angle_max},
    }


def save_network(net: Network, path: Union[str, Path]) -> None:
    with open(path, "w", newline="\n") as f:
        json.dump(network_to_dict(net), f, indent=2)
        f.write("\n")


def sha256_hex(data: bytes) -> str:
    digest = hashes.Hash(hashes.SHA256())
    digest.update(data)
    return digest.finalize().hex()


def network_digest(net: Network) -> str:
    canonical = json.dumps(network_to_dict(net), sort_keys=True, separators=(",", ":"))
    return sha256_hex(canonical.encode("utf-8"))


def resolved_params(dist: DistributionSpec, mean: float) -> Dict[str, float]:
    """Concrete distribution parameters, with the defaults tied to the device mean.

    beta: `b` defaults to the value putting the scaled mean at `mean`;
    truncated_normal: `mu` defaults to `mean` and `sigma` to 5% of it;
    point: `value` defaults to `mean`.
    """
    params = dict(dist.params)
    lo, hi = dist.support
    if dist.kind == "beta":
        a = params.setdefault("a", DEFAULT_BETA_A)
        if "b" not in params:
            ratio = (mean - lo) / (hi - lo) if hi > lo else float("nan")
            params["b"] = a * (1.0 - ratio) / ratio if 0.0 < ratio < 1.0 else float("nan")
    elif dist.kind == "truncated_normal":
        params.setdefault("mu", mean)
        params.setdefault("sigma", DEFAULT_RELATIVE_SIGMA * mean)
    elif dist.kind == "point":
        params.setdefault("value", mean)
    return params


def _distribution_violations(dist: DistributionSpec, mean: float, where: str) -> List[Violation]:
    if dist.kind not in DISTRIBUTION_PARAMS:
        return [Violation("distribution", f"{where}: unsupported distribution kind {dist.kind!r}")]

    found = []
    unknown = sorted(set(dist.params) - set(DISTRIBUTION_PARAMS[dist.kind]))
    if unknown:
        found.append(Violation("distribution", f"{where}: unknown {dist.kind} parameter(s) {', '.join(unknown)}"))

    lo, hi = dist.support
    params = resolved_params(dist, mean)
    if dist.kind == "point":
        if not lo <= params["value"] <= hi:
            found.append(Violation("distribution", f"{where}: point value outside support"))
        return found

    if not lo < hi:
        found.append(Violation("distribution", f"{where}: support lower bound must be below upper bound"))
    if dist.kind == "beta":
        if not params["a"] > 0:
            found.append(Violation("distribution", f"{where}: beta shape a must be positive"))
        if not params["b"] > 0:
            found.append(Violation("distribution", f"{where}: beta shape b must be positive (or derivable from a mean strictly inside the support)"))
    elif not params["sigma"] > 0:
        found.append(Violation("distribution", f"{where}: truncated normal sigma must be positive"))
    return found


def validate_network(net: Network) -> List[Violation]:
    """Returns every violated invariant; an empty list means the network is valid."""
    found: List[Violation] = []

    ids = [b.id for b in net.buses]
    known = set(ids)
    if not ids:
        found.append(Violation("buses", "network has no buses"))
    if len(known) != len(ids):
        found.append(Violation("buses", "bus ids are not unique"))
    slack_count = sum(1 for b in net.buses if b.is_slack)
    if ids and slack_count != 1:
        found.append(Violation("slack", f"exactly one slack bus required, found {slack_count}"))

    refs_ok = True

    def check_ref(bus: int, where: str) -> None:
        nonlocal refs_ok
        if bus not in known:
            refs_ok = False
            found.append(Violation("unknown-bus", f"{where} references absent bus {bus}"))

    pairs = set()
    for f in net.feeders:
        where = f"feeder ({f.from_bus},{f.to_bus})"
        check_ref(f.from_bus, where)
        check_ref(f.to_bus, where)
        if f.from_bus == f.to_bus:
            found.append(Violation("feeder", f"{where}: from and to bus must differ"))
        pair = frozenset((f.from_bus, f.to_bus))
        if pair in pairs:
            found.append(Violation("duplicate-feeder", f"{where}: more than one feeder between the same buses"))
        pairs.add(pair)
        if not f.susceptance > 0:
            found.append(Violation("feeder", f"{where}: susceptance must be positive"))
        if not f.p_max > 0:
            found.append(Violation("feeder", f"{where}: p_max must be positive"))
        if f.alpha < 0.5:
            found.append(Violation("alpha", f"{where}: alpha below 0.5"))
        elif f.alpha > 1:
            found.append(Violation("alpha", f"{where}: alpha above 1"))

    gen_buses = set()
    for g in net.generators:
        where = f"generator at bus {g.bus}"
        check_ref(g.bus, where)
        if g.bus in gen_buses:
            found.append(Violation("generator", f"{where}: more than one generator on the bus"))
        gen_buses.add(g.bus)
        if not 0 <= g.p_min <= g.p_max:
            found.append(Violation("generator", f"{where}: requires 0 <= p_min <= p_max"))

    s = net.slack_source
    check_ref(s.bus, "slack source")
    if not s.p_min <= s.p_max:
        found.append(Violation("slack", "slack source: requires p_min <= p_max"))
    if s.bus in known and slack_count == 1 and s.bus != net.slack_bus:
        found.append(Violation("slack", f"slack source at bus {s.bus} is not on the slack bus"))

    wind_buses = set()
    for w in net.wind_farms:
        where = f"wind farm at bus {w.bus}"
        check_ref(w.bus, where)
        if w.bus in wind_buses:
            found.append(Violation("wind", f"{where}: more than one wind farm on the bus"))
        wind_buses.add(w.bus)
        if not 0 <= w.forecast <= w.p_max:
            found.append(Violation("wind", f"{where}: requires 0 <= forecast <= p_max"))
        found.extend(_distribution_violations(w.distribution, w.forecast, where))

    load_buses = set()
    for l in net.loads:
        where = f"load at bus {l.bus}"
        check_ref(l.bus, where)
        if l.bus in load_buses:
            found.append(Violation("load", f"{where}: more than one load on the bus"))
        load_buses.add(l.bus)
        if not l.mean >= 0:
            found.append(Violation("load", f"{where}: mean must be non-negative"))
        found.extend(_distribution_violations(l.distribution, l.mean, where))

    if not net.angle_min < 0 < net.angle_max:
        found.append(Violation("angles", "angle bounds must satisfy angle_min < 0 < angle_max"))

    if ids and refs_ok:
        graph = nx.Graph()
        graph.add_nodes_from(known)
        graph.add_edges_from(f.key for f in net.feeders)
        if not nx.is_connected(graph):
            found.append(Violation("connectivity", "graph not connected"))

    return found


def _violation_error(violations: List[Violation]) -> NetworkValidationError:
    codes = {v.code for v in violations}
    if "duplicate-feeder" in codes:
        return DuplicateFeederError(violations)
    if "unknown-bus" in codes:
        return BusReferenceError(violations)
    return InvariantViolationError(violations)


def check_network(net: Network) -> Network:
    violations = validate_network(net)
    if violations:
        raise _violation_error(violations)
    return net


def load_network(path: Union[str, Path]) -> Network:
    with open(path, "r") as f:
        text = f.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise NetworkParseError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e
    try:
        net = network_from_dict(data)
    except NetworkParseError as e:
        raise NetworkParseError(f"{path}: {e}") from e
    check_network(net)
    logger.debug("loaded network %s: %d buses, %d feeders", path, len(net.buses), len(net.feeders))
    return net


def with_alpha(net: Network, alpha: float) -> Network:
    return replace(net, feeders=tuple(replace(f, alpha=alpha) for f in net.feeders))


def with_wind_forecast(net: Network, forecasts: Dict[int, float]) -> Network:
    """Re-targets wind farm forecasts (MW by bus); mean-matched Beta shapes follow."""
    missing = set(forecasts) - {w.bus for w in net.wind_farms}
    if missing:
        raise NetworkError(f"no wind farm at bus(es) {', '.join(map(str, sorted(missing)))}")
    farms = tuple(replace(w, forecast=float(forecasts.get(w.bus, w.forecast))) for w in net.wind_farms)
    return check_network(replace(net, wind_farms=farms))


def load_cases(path: Union[str, Path]) -> Dict[str, Dict[int, float]]:
    with open(path, "r") as f:
        data = json.load(f)
    cases = {}
    for name, case in data.get("cases", {}).items():
        cases[name] = {int(bus): float(mw) for bus, mw in case["wind_forecast_mw"].items()}
    return cases
