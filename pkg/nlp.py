"""Augmented-Lagrangian solver for box-constrained problems with smooth
inequality constraints, and the tau-continuation driver for the inner/outer
chance-constrained pair."""

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from scipy.optimize import minimize as scipy_minimize

from dcflow import Decision, default_decision
from network import Network, network_digest, with_alpha
from config import DEFAULT_PENALTY_WEIGHT
from saa import INNER, MW_MARGINS, OUTER, AssembledProblem, SampleAverage, assemble
from scenario import ScenarioSet
from smoothing import SmoothingParams

logger = logging.getLogger(__name__)

CONVERGED = "converged"
MAX_ITERATIONS = "max-iterations"
INFEASIBLE = "infeasible"
STATUSES = (CONVERGED, MAX_ITERATIONS, INFEASIBLE)

# consecutive outer iterations without violation progress before giving up
_STALL_LIMIT = 3


class SolverError(RuntimeError):
    pass


class InfeasibleError(ValueError):
    def __init__(self, message: str, best_alpha: Optional[float] = None):
        super().__init__(message)
        self.best_alpha = best_alpha


@dataclass(frozen=True)
class SolverConfig:
    max_outer_iterations: int = 30
    max_inner_iterations: int = 200
    constraint_tol: float = 1e-6
    stationarity_tol: float = 1e-5
    penalty0: float = 10.0
    penalty_growth: float = 10.0
    penalty_max: float = 1e10
    tau0: float = 0.5
    tau_decay: float = 0.5
    tau_min: float = 1e-3
    gap_tol: float = 5e-3

    def __post_init__(self):
        if self.max_outer_iterations < 1 or self.max_inner_iterations < 1:
            raise ValueError("iteration limits must be at least 1")
        for name in ("constraint_tol", "stationarity_tol", "penalty0", "gap_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.penalty_growth <= 1.0:
            raise ValueError(f"penalty_growth must exceed 1, got {self.penalty_growth}")
        if not 0.0 < self.tau_decay < 1.0:
            raise ValueError(f"tau_decay must lie in (0, 1), got {self.tau_decay}")
        if not 0.0 < self.tau_min < self.tau0 < 1.0:
            raise ValueError(f"need 0 < tau_min < tau0 < 1, got tau_min={self.tau_min}, tau0={self.tau0}")

    def schedule(self) -> List[float]:
        """tau0 * decay^k while above tau_min, then tau_min itself."""
        taus = []
        tau = self.tau0
        while tau > self.tau_min * (1.0 + 1e-12):
            taus.append(tau)
            tau *= self.tau_decay
        taus.append(self.tau_min)
        return taus

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SolverConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown solver setting(s): {', '.join(sorted(unknown))}")
        for name, value in sorted(data.items()):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ValueError(f"solver setting {name} must be a number, got {value!r}")
        return cls(**data)


@dataclass(frozen=True)
class BracketStep:
    tau: float
    outer_merit: float
    inner_merit: Optional[float]
    gap: float
    outer_status: str
    inner_status: str


@dataclass(frozen=True)
class SolveReport:
    variant: str
    status: str
    x_star: Tuple[float, ...]
    objective: float
    merit: float
    max_violation: float
    constraint_values: Dict[str, float]
    iterations: int
    inner_iterations: int
    wall_time: float
    u_star: Optional[Decision] = None
    violation_rates: Dict[str, float] = field(default_factory=dict)
    bound_audit: Dict[str, int] = field(default_factory=dict)
    tau: Optional[float] = None
    tau_trace: Tuple[float, ...] = ()
    bracket: Optional[Tuple[float, float]] = None
    steps: Tuple[BracketStep, ...] = ()
    network_digest: Optional[str] = None
    training: Optional[Dict[str, Any]] = None

    @property
    def gap(self) -> Optional[float]:
        if self.bracket is None:
            return None
        return relative_gap(*self.bracket)


def relative_gap(lower: float, upper: float) -> float:
    return (upper - lower) / max(abs(upper), 1.0)


def report_to_dict(report: SolveReport, include_timing: bool = True) -> Dict[str, Any]:
    data = asdict(report)
    if report.u_star is not None:
        data["u_star"] = {
            "beta_w": {str(k): v for k, v in sorted(report.u_star.beta_w.items())},
            "p_g": {str(k): v for k, v in sorted(report.u_star.p_g.items())},
        }
    data["x_star"] = list(report.x_star)
    data["tau_trace"] = list(report.tau_trace)
    data["bracket"] = list(report.bracket) if report.bracket is not None else None
    data["steps"] = [asdict(s) for s in report.steps]
    if not include_timing:
        data.pop("wall_time")
    return data


def report_from_dict(data: Dict[str, Any]) -> SolveReport:
    try:
        values = dict(data)
        u = values.get("u_star")
        if u is not None:
            values["u_star"] = Decision(
                beta_w={int(k): float(v) for k, v in u["beta_w"].items()},
                p_g={int(k): float(v) for k, v in u["p_g"].items()},
            )
        values["x_star"] = tuple(float(v) for v in values["x_star"])
        values["tau_trace"] = tuple(float(v) for v in values.get("tau_trace", ()))
        if values.get("bracket") is not None:
            values["bracket"] = tuple(float(v) for v in values["bracket"])
        values["steps"] = tuple(BracketStep(**s) for s in values.get("steps", ()))
        values.setdefault("wall_time", 0.0)
        report = SolveReport(**values)
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise ValueError(f"malformed solve report: {e}") from e
    if report.status not in STATUSES:
        raise ValueError(f"malformed solve report: unknown status {report.status!r}")
    return report


class _Merit:
    """Augmented-Lagrangian merit in box-normalized coordinates z in [0, 1]^m.

    L(z) = f(x) / f_scale + sum_k (max(0, lam_k + rho c_k)^2 - lam_k^2) / (2 rho)
    """

    def __init__(self, problem: AssembledProblem, x0: np.ndarray):
        self.problem = problem
        self.lower = np.asarray(problem.lower, dtype=float)
        self.upper = np.asarray(problem.upper, dtype=float)
        self.width = np.where(self.upper > self.lower, self.upper - self.lower, 1.0)
        self.fixed = self.upper <= self.lower
        self.f_scale = max(1.0, abs(self._objective(x0)[0]))
        self.n_constraints = len(self._constraints(x0)[0])
        self.evaluations = 0

    def to_x(self, z: np.ndarray) -> np.ndarray:
        return np.where(self.fixed, self.lower, self.lower + self.width * z)

    def to_z(self, x: np.ndarray) -> np.ndarray:
        return np.where(self.fixed, 0.0, np.clip((x - self.lower) / self.width, 0.0, 1.0))

    @property
    def bounds(self) -> List[Tuple[float, float]]:
        return [(0.0, 0.0) if fixed else (0.0, 1.0) for fixed in self.fixed]

    def _guard(self, fn, x, what):
        try:
            return fn(x)
        except (SolverError, KeyboardInterrupt):
            raise
        except Exception as e:
            raise SolverError(f"{what} evaluation failed at x={np.array2string(x, precision=6)}: {e}") from e

    def _objective(self, x):
        value, grad = self._guard(self.problem.objective, x, "objective")
        return float(value), np.asarray(grad, dtype=float)

    def _constraints(self, x):
        if self.problem.constraints is None:
            return np.zeros(0), np.zeros((0, len(x)))
        values, jac = self._guard(self.problem.constraints, x, "constraint")
        return np.atleast_1d(np.asarray(values, dtype=float)), np.atleast_2d(np.asarray(jac, dtype=float))

    def __call__(self, z: np.ndarray, lam: np.ndarray, rho: float) -> Tuple[float, np.ndarray]:
        self.evaluations += 1
        x = self.to_x(z)
        f, g = self._objective(x)
        value = f / self.f_scale
        grad = g / self.f_scale
        if self.n_constraints:
            c, jac = self._constraints(x)
            shifted = np.maximum(lam + rho * c, 0.0)
            value += float((shifted ** 2).sum() - (lam ** 2).sum()) / (2.0 * rho)
            grad = grad + (jac * shifted[:, None]).sum(axis=0)
        return value, np.where(self.fixed, 0.0, grad * self.width)

    def lagrangian_gradient(self, z: np.ndarray, lam: np.ndarray) -> np.ndarray:
        x = self.to_x(z)
        grad = self._objective(x)[1] / self.f_scale
        if self.n_constraints:
            jac = self._constraints(x)[1]
            grad = grad + (jac * lam[:, None]).sum(axis=0)
        return np.where(self.fixed, 0.0, grad * self.width)

    def violation(self, x: np.ndarray) -> Tuple[float, np.ndarray]:
        c = self._constraints(x)[0]
        return (float(max(c.max(), 0.0)) if c.size else 0.0), c


def _projected_gradient(z: np.ndarray, grad: np.ndarray) -> float:
    if z.size == 0:
        return 0.0
    return float(np.max(np.abs(z - np.clip(z - grad, 0.0, 1.0))))


def minimize(problem: AssembledProblem, u0: Union[Decision, np.ndarray], cfg: SolverConfig) -> SolveReport:
    """Minimizes problem.objective over the box subject to constraints(x) <= 0.

    Outer loop: PHR multiplier update with penalty growth when the violation
    does not drop by a factor four. Inner loop: L-BFGS-B on the merit, which
    keeps iterates exactly inside the box.
    """
    start = time.perf_counter()
    x0 = np.clip(problem.to_vector(u0), problem.lower, problem.upper)
    merit = _Merit(problem, x0)
    z = merit.to_z(x0)
    lam = np.zeros(merit.n_constraints)
    rho = cfg.penalty0

    best_x, best_f, best_viol = None, math.inf, math.inf
    least_x, least_viol = merit.to_x(z), math.inf
    prev_viol = math.inf
    stalls = 0
    status = MAX_ITERATIONS
    inner_iterations = 0
    outer = 0

    for outer in range(1, cfg.max_outer_iterations + 1):
        result = scipy_minimize(
            merit, z, args=(lam, rho), jac=True, method="L-BFGS-B", bounds=merit.bounds,
            options={"maxiter": cfg.max_inner_iterations, "ftol": 1e-15, "gtol": 0.1 * cfg.stationarity_tol},
        )
        inner_iterations += int(result.nit)
        z_new = np.clip(result.x, 0.0, 1.0)
        x = merit.to_x(z_new)
        viol, c = merit.violation(x)
        f = merit._objective(x)[0]

        if viol <= cfg.constraint_tol and f < best_f:
            best_x, best_f, best_viol = x, f, viol
        if viol < least_viol:
            least_x, least_viol = x, viol

        lam_new = np.maximum(lam + rho * c, 0.0) if merit.n_constraints else lam
        stationarity = _projected_gradient(z_new, merit.lagrangian_gradient(z_new, lam_new))
        moved = float(np.max(np.abs(z_new - z))) if z.size else 0.0
        logger.debug("outer %d: f=%.10g viol=%.3g rho=%.3g stationarity=%.3g moved=%.3g inner=%d",
                     outer, f, viol, rho, stationarity, moved, result.nit)

        if viol <= cfg.constraint_tol and (stationarity <= cfg.stationarity_tol or moved <= 1e-12):
            best_x, best_f, best_viol = x, f, viol
            status = CONVERGED
            z = z_new
            break

        if viol > cfg.constraint_tol:
            stalls = stalls + 1 if viol >= 0.99 * prev_viol and rho >= cfg.penalty0 * cfg.penalty_growth else 0
            if stalls >= _STALL_LIMIT or (rho >= cfg.penalty_max and viol >= 0.99 * prev_viol):
                logger.debug("constraint violation stalled at %.3g with rho=%.3g", viol, rho)
                break
            if viol > 0.25 * prev_viol:
                rho = min(rho * cfg.penalty_growth, cfg.penalty_max)
        else:
            stalls = 0
        prev_viol = viol
        lam = lam_new
        z = z_new

    if best_x is None:
        status = INFEASIBLE
        final_x, final_viol = least_x, least_viol
    else:
        final_x, final_viol = best_x, best_viol
    summary = problem.summary(final_x)
    report = SolveReport(
        variant=problem.variant,
        status=status,
        x_star=tuple(float(v) for v in final_x),
        objective=summary["objective"],
        merit=summary["merit"],
        max_violation=float(final_viol),
        constraint_values=summary["constraint_values"],
        iterations=outer,
        inner_iterations=inner_iterations,
        wall_time=time.perf_counter() - start,
        u_star=problem.to_decision(final_x),
        violation_rates=summary.get("violation_rates", {}),
        bound_audit=summary.get("bound_audit", {}),
        tau=problem.smoothing.tau if problem.smoothing else None,
        network_digest=network_digest(problem.network) if problem.network is not None else None,
        training=problem.scenarios.provenance if problem.scenarios is not None else None,
    )
    logger.debug("%s solve: %s after %d outer / %d inner iterations, objective %.6f",
                 problem.variant, status, outer, inner_iterations, report.objective)
    return report


# rounding allowed in each function value, in ulps of |f|
_ROUNDOFF_ULPS = 16.0


@dataclass(frozen=True)
class GradCheck:
    max_error: float
    errors: Dict[str, float]
    skipped: Tuple[str, ...]
    abs_errors: Dict[str, float] = field(default_factory=dict)


def grad_check(problem: AssembledProblem, u: Union[Decision, np.ndarray], step: float = 1e-6) -> GradCheck:
    """Central differences against every analytic gradient in problem.evaluators.

    `errors` are max-norm differences relative to max(|analytic|, |numeric|),
    after discounting the rounding of the two function values (subnormal
    values count as noise); `abs_errors` are the raw max-norm differences.
    Evaluators whose |P| kink lies inside the stencil are skipped.
    """
    x = problem.to_vector(u)
    skipped = problem.kinked(x, step)
    eps = np.finfo(float).eps
    errors, abs_errors = {}, {}
    for name, evaluate in problem.evaluators.items():
        if name in skipped:
            continue
        value, analytic = evaluate(x)
        analytic = np.asarray(analytic, dtype=float)
        numeric = np.empty_like(analytic)
        for k in range(len(x)):
            e = np.zeros_like(x)
            e[k] = step
            numeric[k] = (evaluate(x + e)[0] - evaluate(x - e)[0]) / (2.0 * step)
        diff = float(np.max(np.abs(analytic - numeric), initial=0.0))
        roundoff = (_ROUNDOFF_ULPS * eps * abs(float(value)) + np.finfo(float).tiny) / step
        scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)),
                    np.finfo(float).tiny)
        abs_errors[name] = diff
        errors[name] = max(diff - roundoff, 0.0) / scale
    for name in sorted(skipped):
        logger.info("gradient check skipped %s: flow crosses zero within the stencil", name)
    return GradCheck(max(errors.values(), default=0.0), errors, tuple(sorted(skipped)), abs_errors)


@dataclass(frozen=True)
class ContinuationResult:
    inner: SolveReport
    outer: SolveReport
    bracket: Tuple[float, float]
    steps: Tuple[BracketStep, ...]

    @property
    def gap(self) -> float:
        return relative_gap(*self.bracket)


def _largest_feasible_alpha(net: Network, scenarios: ScenarioSet, p: SmoothingParams, cfg: SolverConfig,
                            penalty_weight: float, u0: Decision,
                            margin_scale: str = MW_MARGINS, iterations: int = 6) -> Optional[float]:
    """Bisects a common alpha in [0.5, min feeder alpha] for a feasible inner problem."""
    def feasible(alpha: float) -> bool:
        problem = assemble(with_alpha(net, alpha), scenarios, INNER, p, penalty_weight, margin_scale=margin_scale)
        return minimize(problem, u0, cfg).status != INFEASIBLE

    lo, hi = 0.5, min(f.alpha for f in net.feeders)
    if not feasible(lo):
        return None
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            lo = mid
        else:
            hi = mid
    return lo


def continuation_solve(net: Network, scenarios: ScenarioSet, p0: SmoothingParams, cfg: SolverConfig,
                       penalty_weight: float = DEFAULT_PENALTY_WEIGHT,
                       u0: Optional[Decision] = None,
                       margin_scale: str = MW_MARGINS) -> ContinuationResult:
    """Solves the outer then the inner problem at each tau of the schedule.

    OA warm-starts from the previous OA, IA from the OA of the same tau. An
    infeasible IA is recorded and the schedule continues; the certified answer
    is the last feasible IA with the last OA objective as lower bound.
    """
    if not p0.is_majorant:
        raise ValueError(f"smoothing requires m1 >= m2, got m1={p0.m1}, m2={p0.m2}")
    sa = SampleAverage(net, scenarios, margin_scale=margin_scale)
    start = time.perf_counter()
    u_outer = u0 or default_decision(net)
    steps: List[BracketStep] = []
    trace: List[float] = []
    certified: Optional[SolveReport] = None
    outer_report: Optional[SolveReport] = None
    inner_iterations = outer_iterations = 0

    for tau in cfg.schedule():
        p = replace(p0, tau=tau)
        trace.append(tau)
        outer_report = minimize(assemble(net, scenarios, OUTER, p, penalty_weight, sample_average=sa), u_outer, cfg)
        u_outer = outer_report.u_star
        inner = minimize(assemble(net, scenarios, INNER, p, penalty_weight, sample_average=sa), u_outer, cfg)
        outer_iterations += outer_report.iterations + inner.iterations
        inner_iterations += outer_report.inner_iterations + inner.inner_iterations

        feasible = inner.status != INFEASIBLE
        gap = relative_gap(outer_report.merit, inner.merit) if feasible else math.inf
        steps.append(BracketStep(tau, outer_report.merit, inner.merit if feasible else None, gap,
                                 outer_report.status, inner.status))
        logger.info("tau=%.4g OA=%.4f (%s) IA=%s (%s) gap=%.3g", tau, outer_report.merit, outer_report.status,
                    f"{inner.merit:.4f}" if feasible else "-", inner.status, gap)
        if not feasible:
            continue
        if outer_report.merit > inner.merit + 10.0 * cfg.stationarity_tol * abs(inner.merit):
            logger.warning("bracket not monotone at tau=%.4g: OA %.6f exceeds IA %.6f",
                           tau, outer_report.merit, inner.merit)
        certified = inner
        if gap <= cfg.gap_tol:
            break

    if certified is None:
        p_min = replace(p0, tau=cfg.tau_min)
        best_alpha = _largest_feasible_alpha(net, scenarios, p_min, cfg, penalty_weight, u_outer, margin_scale)
        detail = f"largest feasible alpha found: {best_alpha:.4f}" if best_alpha is not None else "no alpha >= 0.5 is feasible"
        raise InfeasibleError(f"inner approximation infeasible at every tau down to {cfg.tau_min}; {detail}",
                              best_alpha)

    bracket = (outer_report.merit, certified.merit)
    wall = time.perf_counter() - start
    common = dict(tau_trace=tuple(trace), bracket=bracket, steps=tuple(steps), wall_time=wall,
                  iterations=outer_iterations, inner_iterations=inner_iterations)
    return ContinuationResult(
        inner=replace(certified, **common),
        outer=replace(outer_report, **common),
        bracket=bracket,
        steps=tuple(steps),
    )
