from dataclasses import replace

import numpy as np
import pytest

from ccopf_core import BUNDLED_CASES, BUNDLED_NETWORK
from dcflow import Decision
from network import (DistributionSpec, check_network, load_cases, load_network, network_digest, network_from_dict,
                     with_wind_forecast)
from nlp import CONVERGED, SolveReport


def point(value, lo=0.0, hi=1000.0):
    return {"type": "point", "support_mw": [lo, hi], "params": {"value": value}}


def build(buses, feeders, slack=None, generators=(), wind=(), loads=()):
    """Network from compact tuples: feeders (i, j, B, p_max[, alpha]), loads (bus, mean[, dist])."""
    data = {
        "buses": [{"id": b, "slack": b == buses[0]} for b in buses],
        "feeders": [
            {"from": f[0], "to": f[1], "susceptance_mw_per_rad": f[2], "p_max_mw": f[3],
             **({"alpha": f[4]} if len(f) > 4 else {})}
            for f in feeders
        ],
        "slack_source": slack or {"bus": buses[0], "price_per_mwh": 15.0, "p_min_mw": 0.0, "p_max_mw": 1000.0},
        "generators": [{"bus": g[0], "price_per_mwh": g[1], "p_min_mw": g[2], "p_max_mw": g[3]} for g in generators],
        "wind": [
            {"bus": w[0], "p_max_mw": w[1], "forecast_mw": w[2], "dist": w[3]}
            for w in wind
        ],
        "loads": [
            {"bus": l[0], "mean_mw": l[1], "dist": l[2] if len(l) > 2 else point(l[1])}
            for l in loads
        ],
    }
    return check_network(network_from_dict(data))


def two_bus(load=100.0, p_max=200.0, generator=None, slack_max=1000.0, slack_min=0.0):
    gens = [(2, 10.0, 0.0, generator)] if generator is not None else []
    slack = {"bus": 1, "price_per_mwh": 15.0, "p_min_mw": slack_min, "p_max_mw": slack_max}
    return build([1, 2], [(1, 2, 1000.0, p_max)], slack=slack, generators=gens, loads=[(2, load)])


def triangle(load=90.0):
    return build([1, 2, 3], [(1, 2, 1000.0, 500.0), (1, 3, 1000.0, 500.0), (2, 3, 1000.0, 500.0)],
                 loads=[(3, load)])


def wind_toy(p_max=400.0, a=2.0, b=2.0):
    """Bus 2 holds only a Beta(a, b) wind farm on [0, 600]; the feeder carries all of it."""
    dist = {"type": "beta", "support_mw": [0.0, 600.0], "params": {"a": a, "b": b}}
    slack = {"bus": 1, "price_per_mwh": 15.0, "p_min_mw": -1000.0, "p_max_mw": 1000.0}
    return build([1, 2], [(1, 2, 1000.0, p_max)], slack=slack, wind=[(2, 600.0, 300.0, dist)])


def point_mass(net):
    """Same network with every wind farm at its forecast and every load at its mean."""
    def pinned(dist, value):
        return DistributionSpec(kind="point", support=dist.support, params={"value": value})
    return replace(
        net,
        wind_farms=tuple(replace(w, distribution=pinned(w.distribution, w.forecast)) for w in net.wind_farms),
        loads=tuple(replace(l, distribution=pinned(l.distribution, l.mean)) for l in net.loads),
    )


def make_report(net, decision, variant="inner", training=None):
    return SolveReport(
        variant=variant, status=CONVERGED, x_star=tuple(decision.to_vector(net)), objective=0.0, merit=0.0,
        max_violation=0.0, constraint_values={}, iterations=0, inner_iterations=0, wall_time=0.0,
        u_star=decision, network_digest=network_digest(net), training=training,
    )


@pytest.fixture
def pjm5():
    return load_network(BUNDLED_NETWORK)


@pytest.fixture
def cases():
    return load_cases(BUNDLED_CASES)


@pytest.fixture
def case1(pjm5, cases):
    return with_wind_forecast(pjm5, cases["case1"])


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


@pytest.fixture(autouse=True)
def isolated_config(tmp_path, monkeypatch):
    monkeypatch.setenv("CCOPF_CONFIG", str(tmp_path / "config" / "config.json"))
    monkeypatch.delenv("CCOPF_THREADS", raising=False)


def random_decision(net, rng):
    return Decision(
        beta_w={w.bus: float(rng.uniform(0.05, 0.95)) for w in net.wind_farms},
        p_g={g.bus: float(rng.uniform(g.p_min + 1.0, g.p_max - 1.0)) for g in net.generators},
    )
