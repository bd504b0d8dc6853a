import argparse
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, List, Optional

from ccopf_core import (BUNDLED_CASES, BUNDLED_NETWORK, RunManifest, Stopwatch, find_network_path,
                        input_digests, manifest_path_for, read_manifest, read_solution, write_json,
                        write_manifest, write_solution)
from config import load_config, save_config
from dcflow import decision_names, default_decision
from network import NetworkError, load_cases, load_network, network_digest, with_alpha, with_wind_forecast
from nlp import CONVERGED, INFEASIBLE, InfeasibleError, SolverConfig, SolverError, continuation_solve, minimize
from saa import DETERMINISTIC, MARGIN_SCALES, MW_MARGINS, assemble
from scenario import MONTE_CARLO, QUASI_MONTE_CARLO, ScenarioError, generate_scenarios, load_scenarios, save_scenarios
from smoothing import SmoothingParams
from verify import ComparisonError, compare, save_probability_table, save_trajectories, trajectories, true_probability

logger = logging.getLogger("ccopf")

EXIT_OK = 0
EXIT_INFEASIBLE = 2
EXIT_INPUT = 3
EXIT_NOT_CONVERGED = 4

SOURCES = {"mc": MONTE_CARLO, "qmc": QUASI_MONTE_CARLO}

# solve flag dest -> SolverConfig field
SOLVER_FLAGS = {
    "tau0": "tau0",
    "tau_decay": "tau_decay",
    "tau_min": "tau_min",
    "max_outer": "max_outer_iterations",
    "max_inner": "max_inner_iterations",
    "constraint_tol": "constraint_tol",
    "stationarity_tol": "stationarity_tol",
    "gap_tol": "gap_tol",
}


class CliInputError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliInputError(f"{self.prog}: {message}")


# command -> {dest: flag}, used to write the resolved argument vector into manifests
_FLAGS: Dict[str, Dict[str, str]] = {}


def _option(parser, command: str, flag: str, **kwargs):
    action = parser.add_argument(flag, **kwargs)
    _FLAGS.setdefault(command, {})[action.dest] = flag


def _network_options(parser, command: str):
    _option(parser, command, "--network", help="Network JSON file. Defaults to the last used network, then the bundled 5-bus network.")
    _option(parser, command, "--case", help="Named wind-forecast case from the cases file (e.g. case1).")
    _option(parser, command, "--cases", help="Case definitions file. Defaults to the bundled data/cases.json.")
    if command != "gen":
        _option(parser, command, "--alpha", type=float, help="Probability level applied to every feeder.")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ccopf", description="Chance-constrained DC optimal power flow with inner/outer smoothing.")
    parser.add_argument("-v", "--verbose", action="store_true", help="Log solver progress at debug level.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = sub.add_parser("gen", help="Generate a scenario CSV.")
    _network_options(gen, "gen")
    _option(gen, "gen", "--count", type=int, required=True, help="Number of scenarios.")
    _option(gen, "gen", "--seed", type=int, default=0, help="Random seed (recorded for qmc).")
    _option(gen, "gen", "--source", choices=sorted(SOURCES), default="mc", help="Pseudo-random or Halton sampling.")
    _option(gen, "gen", "--out", required=True, help="Output CSV path.")

    solve = sub.add_parser("solve", help="Solve the chance-constrained (cc) or deterministic (det) OPF.")
    _network_options(solve, "solve")
    _option(solve, "solve", "--scenarios", help="Training scenario CSV (required for cc).")
    _option(solve, "solve", "--variant", choices=["cc", "det"], default="cc")
    _option(solve, "solve", "--tau0", type=float)
    _option(solve, "solve", "--tau-decay", type=float)
    _option(solve, "solve", "--tau-min", type=float)
    _option(solve, "solve", "--m1", type=float)
    _option(solve, "solve", "--m2", type=float)
    _option(solve, "solve", "--penalty-weight", type=float, help="Weight of the per-sample bound penalty.")
    _option(solve, "solve", "--margin-scale", choices=MARGIN_SCALES,
            help="Smooth feeder margins in MW (default) or relative to each feeder limit.")
    _option(solve, "solve", "--max-outer", type=int)
    _option(solve, "solve", "--max-inner", type=int)
    _option(solve, "solve", "--constraint-tol", type=float)
    _option(solve, "solve", "--stationarity-tol", type=float)
    _option(solve, "solve", "--gap-tol", type=float)
    _option(solve, "solve", "--out", required=True, help="Output report JSON path.")

    verify = sub.add_parser("verify", help="Estimate true feeder satisfaction probabilities of a solution.")
    _network_options(verify, "verify")
    _option(verify, "verify", "--solution", required=True, help="Report JSON written by solve.")
    _option(verify, "verify", "--points", type=int)
    _option(verify, "verify", "--method", choices=["qmc", "mc"], default="qmc")
    _option(verify, "verify", "--seed", type=int, help="MC seed; defaults to the training seed + 1.")
    _option(verify, "verify", "--out", required=True, help="Output probability CSV path.")

    comp = sub.add_parser("compare", help="Compare stochastic and deterministic solutions over a scenario set.")
    _network_options(comp, "compare")
    _option(comp, "compare", "--scenarios", required=True)
    _option(comp, "compare", "--stoch", required=True, help="Stochastic report JSON.")
    _option(comp, "compare", "--det", required=True, help="Deterministic report JSON.")
    _option(comp, "compare", "--out", required=True, help="Output directory.")

    rerun = sub.add_parser("rerun", help="Replay a command from its manifest.")
    rerun.add_argument("manifest", help="Manifest JSON written next to a command's output.")
    return parser


def _resolved_argv(command: str, resolved: Dict[str, Any]) -> List[str]:
    argv = [command]
    for dest, flag in _FLAGS[command].items():
        value = resolved.get(dest)
        if value is not None:
            argv += [flag, str(value)]
    return argv


def _load(args, config) -> Dict[str, Any]:
    """Resolves the network (and case) and returns the pieces every command records."""
    network_path = args.network or config.get("last_network") or find_network_path(".") or str(BUNDLED_NETWORK)
    network_path = str(Path(network_path).resolve())
    net = load_network(network_path)
    cases_path = None
    if args.case:
        cases_path = str(Path(args.cases).resolve()) if args.cases else str(BUNDLED_CASES)
        cases = load_cases(cases_path)
        if args.case not in cases:
            raise CliInputError(f"--case: unknown case {args.case!r}; known: {', '.join(sorted(cases))}")
        net = with_wind_forecast(net, cases[args.case])
    alpha = getattr(args, "alpha", None)
    if alpha is not None:
        if not 0.5 <= alpha <= 1.0:
            raise CliInputError(f"--alpha must lie in [0.5, 1], got {alpha}")
        net = with_alpha(net, alpha)
    return {"net": net, "network": network_path, "case": args.case, "cases": cases_path, "alpha": alpha}


def _finish(command: str, resolved: Dict[str, Any], inputs: Dict[str, Optional[str]], outputs: List[str],
            manifest_path: Path, watch: Stopwatch, config: Dict[str, Any], exit_code: int = EXIT_OK,
            extra: Optional[Dict[str, Any]] = None) -> int:
    manifest = RunManifest(
        command=command,
        argv=_resolved_argv(command, resolved),
        config=resolved,
        inputs=input_digests(inputs),
        outputs=outputs,
        wall_time=watch.elapsed,
        exit_code=exit_code,
        extra=extra or {},
    )
    write_manifest(manifest, manifest_path)
    config["last_network"] = resolved["network"]
    save_config(config)
    return exit_code


def cmd_gen(args) -> int:
    watch = Stopwatch()
    if args.count < 1:
        raise CliInputError(f"--count must be at least 1, got {args.count}")
    config = load_config()
    loaded = _load(args, config)
    scenarios = generate_scenarios(loaded["net"], args.count, seed=args.seed, source=SOURCES[args.source])
    save_scenarios(scenarios, args.out)
    logger.info("wrote %d %s scenarios to %s", scenarios.count, scenarios.source, args.out)

    resolved = {"network": loaded["network"], "case": loaded["case"], "cases": loaded["cases"],
                "count": args.count, "seed": args.seed, "source": args.source, "out": args.out}
    return _finish("gen", resolved, {"network": loaded["network"], "cases": loaded["cases"]},
                   [args.out], manifest_path_for(args.out), watch, config)


def _solver_config(args, config) -> Dict[str, Any]:
    settings = dict(config.get("solver") or {})
    smoothing = {"m1": settings.pop("m1", 1.0), "m2": settings.pop("m2", 1.0)}
    for dest, name in SOLVER_FLAGS.items():
        if getattr(args, dest) is not None:
            settings[name] = getattr(args, dest)
    for name in ("m1", "m2"):
        if getattr(args, name) is not None:
            smoothing[name] = getattr(args, name)
    try:
        cfg = SolverConfig.from_dict(settings)
        m1, m2 = _number(smoothing["m1"], "m1"), _number(smoothing["m2"], "m2")
    except TypeError as e:
        raise CliInputError(f"invalid solver settings: {e}") from e
    return {"solver": cfg, "m1": m1, "m2": m2}


def _number(value: Any, name: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise CliInputError(f"{name} must be a number, got {value!r}")
    return float(value)


def _decision_text(net, x) -> str:
    return ", ".join(f"{name}={value:.4f}" for name, value in zip(decision_names(net), x))


def cmd_solve(args) -> int:
    watch = Stopwatch()
    config = load_config()
    solver = _solver_config(args, config)
    cfg: SolverConfig = solver["solver"]
    penalty_weight = _number(args.penalty_weight if args.penalty_weight is not None else config["penalty_weight"],
                             "penalty_weight")
    margin_scale = args.margin_scale or config.get("margin_scale") or MW_MARGINS
    if margin_scale not in MARGIN_SCALES:
        raise CliInputError(f"margin_scale must be one of {', '.join(MARGIN_SCALES)}, got {margin_scale!r}")
    loaded = _load(args, config)
    net = loaded["net"]

    resolved = {"network": loaded["network"], "case": loaded["case"], "cases": loaded["cases"],
                "scenarios": args.scenarios, "variant": args.variant, "alpha": loaded["alpha"],
                "m1": solver["m1"], "m2": solver["m2"], "penalty_weight": penalty_weight, "margin_scale": margin_scale,
                "tau0": cfg.tau0, "tau_decay": cfg.tau_decay, "tau_min": cfg.tau_min,
                "max_outer": cfg.max_outer_iterations, "max_inner": cfg.max_inner_iterations,
                "constraint_tol": cfg.constraint_tol, "stationarity_tol": cfg.stationarity_tol,
                "gap_tol": cfg.gap_tol, "out": args.out, "solver": asdict(cfg)}
    inputs = {"network": loaded["network"], "cases": loaded["cases"], "scenarios": args.scenarios}
    manifest = manifest_path_for(args.out)

    if args.variant == "det":
        report = minimize(assemble(net, None, DETERMINISTIC), default_decision(net), cfg)
        write_solution(args.out, report)
        code = {CONVERGED: EXIT_OK, INFEASIBLE: EXIT_INFEASIBLE}.get(report.status, EXIT_NOT_CONVERGED)
        logger.info("deterministic solve %s: objective %.4f $/h", report.status, report.objective)
        logger.info("decision: %s", _decision_text(net, report.x_star))
        return _finish("solve", resolved, inputs, [args.out], manifest, watch, config, code,
                       {"solver_wall_time": report.wall_time})

    if not args.scenarios:
        raise CliInputError("--scenarios is required for the cc variant")
    scenarios = load_scenarios(args.scenarios, net)
    p0 = SmoothingParams(tau=cfg.tau0, m1=solver["m1"], m2=solver["m2"])
    if not p0.is_majorant:
        raise CliInputError(f"--m1 must be at least --m2, got m1={p0.m1}, m2={p0.m2}")
    try:
        result = continuation_solve(net, scenarios, p0, cfg, penalty_weight=penalty_weight, margin_scale=margin_scale)
    except InfeasibleError:
        _finish("solve", resolved, inputs, [], manifest, watch, config, EXIT_INFEASIBLE)
        raise
    write_solution(args.out, result.inner, result)
    code = EXIT_OK if result.inner.status == CONVERGED else EXIT_NOT_CONVERGED
    logger.info("certified objective %.4f $/h, lower bound %.4f, gap %.3g",
                result.inner.objective, result.bracket[0], result.gap)
    logger.info("decision: %s", _decision_text(net, result.inner.x_star))
    return _finish("solve", resolved, inputs, [args.out], manifest, watch, config, code,
                   {"solver_wall_time": result.inner.wall_time})


def _check_digest(report, net, what: str) -> None:
    if report.network_digest is not None and report.network_digest != network_digest(net):
        raise ComparisonError(f"{what} was solved on a different network (check --network, --case and --alpha)")


def cmd_verify(args) -> int:
    watch = Stopwatch()
    config = load_config()
    points = args.points if args.points is not None else int(config["verify_points"])
    report = read_solution(args.solution)
    loaded = _load(args, config)
    net = loaded["net"]
    _check_digest(report, net, args.solution)

    table = true_probability(net, report.u_star, points=points, method=args.method, seed=args.seed,
                             training=report.training)
    records = save_probability_table(table, args.out)
    resolved = {"network": loaded["network"], "case": loaded["case"], "cases": loaded["cases"],
                "alpha": loaded["alpha"], "solution": args.solution, "points": points, "method": args.method,
                "seed": args.seed, "out": args.out}
    return _finish("verify", resolved,
                   {"network": loaded["network"], "cases": loaded["cases"], "solution": args.solution},
                   [args.out, str(records)], manifest_path_for(args.out), watch, config)


def cmd_compare(args) -> int:
    watch = Stopwatch()
    config = load_config()
    loaded = _load(args, config)
    net = loaded["net"]
    scenarios = load_scenarios(args.scenarios, net)
    stochastic = read_solution(args.stoch)
    deterministic = read_solution(args.det)
    summary = compare(net, scenarios, stochastic, deterministic)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for name, report in (("stochastic", stochastic), ("deterministic", deterministic)):
        path = out / f"trajectories_{name}.csv"
        save_trajectories(trajectories(net, report.u_star, scenarios), path)
        outputs.append(str(path))
    data = summary.to_dict()
    data["decisions"] = {
        name: {"beta_w": {str(k): v for k, v in sorted(r.u_star.beta_w.items())},
               "p_g": {str(k): v for k, v in sorted(r.u_star.p_g.items())}}
        for name, r in (("stochastic", stochastic), ("deterministic", deterministic))
    }
    write_json(data, out / "summary.json")
    outputs.append(str(out / "summary.json"))
    for feeder in summary.feeders:
        logger.info("feeder %s: stochastic %.4f, deterministic %.4f%s", feeder.feeder, feeder.stochastic_rate,
                    feeder.deterministic_rate, "  <- flagged" if feeder.flagged else "")

    resolved = {"network": loaded["network"], "case": loaded["case"], "cases": loaded["cases"],
                "alpha": loaded["alpha"], "scenarios": args.scenarios, "stoch": args.stoch, "det": args.det,
                "out": args.out}
    inputs = {"network": loaded["network"], "cases": loaded["cases"], "scenarios": args.scenarios,
              "stoch": args.stoch, "det": args.det}
    return _finish("compare", resolved, inputs, outputs, out / "manifest.json", watch, config)


def cmd_rerun(args) -> int:
    manifest = read_manifest(args.manifest)
    logger.info("replaying: ccopf %s", " ".join(manifest.argv))
    return main(manifest.argv)


COMMANDS = {
    "gen": cmd_gen,
    "solve": cmd_solve,
    "verify": cmd_verify,
    "compare": cmd_compare,
    "rerun": cmd_rerun,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CliInputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return COMMANDS[args.command](args)
    except InfeasibleError as e:
        logger.error("%s", e)
        return EXIT_INFEASIBLE
    except SolverError as e:
        logger.error("solver failed: %s", e)
        return EXIT_NOT_CONVERGED
    except (CliInputError, NetworkError, ScenarioError, ComparisonError, ValueError, OSError) as e:
        logger.error("%s", e)
        return EXIT_INPUT
    except KeyboardInterrupt:
        print("\nExiting.", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
