import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

logger = logging.getLogger(__name__)

# Above this exponent the direct quotient is replaced by its logistic form.
_EXP_LIMIT = 500.0


@dataclass(frozen=True)
class SmoothingParams:
    """Parameters of the smoothed indicator: sharpness `tau` and shape `m1`, `m2`.

    theta majorizes the indicator only when m1 >= m2; parameters that break
    this are still constructible so `check_majorant` can report on them.
    """
    tau: float
    m1: float = 1.0
    m2: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if self.m1 <= 0.0 or self.m2 <= 0.0:
            raise ValueError(f"m1 and m2 must be positive, got m1={self.m1}, m2={self.m2}")

    @property
    def is_majorant(self) -> bool:
        return self.m1 >= self.m2

    @property
    def ceiling(self) -> float:
        return 1.0 + self.m1 * self.tau


def indicator(s):
    """1 where s >= 0, else 0."""
    return np.where(np.asarray(s, dtype=float) >= 0.0, 1.0, 0.0)[()]


def theta(p: SmoothingParams, s):
    """(1 + m1 tau) / (1 + m2 tau exp(-s / tau)), elementwise."""
    s = np.asarray(s, dtype=float)
    z = -s / p.tau
    with np.errstate(over="ignore"):
        direct = p.ceiling / (1.0 + p.m2 * p.tau * np.exp(np.minimum(z, _EXP_LIMIT)))
    tail = p.ceiling * expit(-z - np.log(p.m2 * p.tau))
    return np.where(z <= _EXP_LIMIT, direct, tail)[()]


def theta_ds(p: SmoothingParams, s):
    """Derivative of theta with respect to s."""
    x = np.asarray(s, dtype=float) / p.tau - np.log(p.m2 * p.tau)
    return (p.ceiling / p.tau * expit(x) * expit(-x))[()]


def majorant_grid(tau: float, half_width: float = 50.0, step: float = 0.1) -> np.ndarray:
    """Grid over [-half_width tau, +half_width tau] with spacing step * tau, containing 0."""
    k = int(round(half_width / step))
    return np.arange(-k, k + 1) * (step * tau)


@dataclass(frozen=True)
class MajorantCheck:
    ok: bool
    worst_margin: float
    worst_at: float

    def __bool__(self) -> bool:
        return self.ok


def check_majorant(p: SmoothingParams, grid: Optional[np.ndarray] = None) -> MajorantCheck:
    """Compares theta with the indicator on a grid; worst margin is min(theta - I)."""
    if grid is None:
        grid = majorant_grid(p.tau)
    grid = np.sort(np.asarray(grid, dtype=float))
    if grid[0] > -50.0 * p.tau or grid[-1] < 50.0 * p.tau:
        raise ValueError(f"grid must span [-50 tau, 50 tau] = [{-50 * p.tau}, {50 * p.tau}]")
    if grid.size > 1 and np.max(np.diff(grid)) > p.tau / 10.0 * (1.0 + 1e-9):
        raise ValueError(f"grid step exceeds tau / 10 = {p.tau / 10.0}")

    margin = theta(p, grid) - indicator(grid)
    k = int(np.argmin(margin))
    result = MajorantCheck(ok=bool(margin[k] >= 0.0), worst_margin=float(margin[k]), worst_at=float(grid[k]))
    if not result.ok:
        logger.debug("theta falls below the indicator at s=%g by %g", result.worst_at, -result.worst_margin)
    return result
