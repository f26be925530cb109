"""Command-line front end: ``gridrestore run`` and ``gridrestore validate``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .dmpc import AITKEN, STANDARD, CoordinatorConfig
from .ga import GAConfig
from .oracle import DEFAULT_CAP, EnumerationRefused, exact_plan
from .partition import subsystems
from .sim import (PREDESIGNED, REALTIME, ScenarioError, SimConfig, apply_events, load_scenario,
                  planning_problem, run_scenario, validate_scenario, write_outputs,
                  _initial_state, _partition)

ORACLE = "oracle"
EXIT_INVALID = 2
EXIT_UNCONVERGED = 3

log = logging.getLogger("gridrestore")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gridrestore",
                                description="Real-time restoration planning for distribution networks.")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate a scenario and write plan and metric files")
    run.add_argument("--scenario", required=True, help="scenario JSON file")
    run.add_argument("--strategy", choices=[REALTIME, PREDESIGNED, ORACLE], default=REALTIME,
                     help="planning strategy (default: realtime)")
    run.add_argument("--solver", choices=[AITKEN, STANDARD], default=AITKEN,
                     help="multiplier update of the distributed solver (default: aitken)")
    run.add_argument("--subsystems", type=int, default=2, metavar="N",
                     help="number of subsystems when the scenario has no partition map (default: 2)")
    run.add_argument("--seed", type=int, default=0, help="GA random seed (default: 0)")
    run.add_argument("--generations", type=int, default=50, help="GA generations (default: 50)")
    run.add_argument("--population", type=int, default=201,
                     help="GA population; 4 parents each produce (N-1)/4 offspring (default: 201)")
    run.add_argument("--gamma-b", type=float, default=2.0, help="augmented penalty weight (default: 2)")
    run.add_argument("--gamma-c", type=float, default=1.0,
                     help="multiplier step and consensus weight (default: 1)")
    run.add_argument("--epsilon", type=float, default=0.01,
                     help="multiplier-change stopping threshold (default: 0.01)")
    run.add_argument("--max-iters", type=int, default=500,
                     help="outer iteration cap of the distributed solver (default: 500)")
    run.add_argument("--out", default="out", help="output directory (default: out)")
    run.add_argument("--strict", action="store_true",
                     help="exit nonzero if any distributed solve did not converge")
    run.add_argument("--compare-solvers", action="store_true",
                     help="record solve rounds of both solver modes for every executed plan")
    run.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    val = sub.add_parser("validate", help="check a scenario file and its network")
    val.add_argument("--scenario", required=True, help="scenario JSON file")
    return p


def _sim_config(args) -> SimConfig:
    parents = 4
    offspring = max(1, (args.population - 1) // parents)
    ga = GAConfig(parents=parents, offspring=offspring, generations=args.generations, seed=args.seed)
    coord = CoordinatorConfig(gamma_b=args.gamma_b, gamma_c=args.gamma_c, eps=args.epsilon,
                              max_outer_iters=args.max_iters, mode=args.solver)
    return SimConfig(ga=ga, coord=coord, n_subsystems=args.subsystems,
                     compare_solvers=args.compare_solvers)


def _load(path: str, report=None):
    report = report if report is not None else sys.stderr
    try:
        return load_scenario(path)
    except FileNotFoundError:
        print(f"error: scenario file {path} not found", file=sys.stderr)
    except ScenarioError as exc:
        for finding in str(exc).split("; "):
            print(finding, file=report)
    except (ValueError, KeyError) as exc:
        print(f"error: {path}: {exc}", file=report)
    return None


def cmd_validate(args) -> int:
    scenario = _load(args.scenario, sys.stdout)
    if scenario is None:
        return EXIT_INVALID
    findings = validate_scenario(scenario)
    for f in findings:
        print(f)
    if findings:
        return EXIT_INVALID
    topo = scenario.topology
    n_dmg = len(scenario.all_damages())
    print("OK")
    print(f"buses={topo.n_bus} lines={topo.n_line} switches={len(topo.switched)} "
          f"damages={n_dmg} crews={len(scenario.crews)} events={len(scenario.events)}")
    return 0


def _run_oracle(scenario, config: SimConfig, out: Path) -> bool:
    part = _partition(scenario, config)
    state = apply_events(_initial_state(scenario), scenario, 0.0)
    problem = planning_problem(scenario, state, part, subsystems(part, scenario.topology), config)
    res = exact_plan(problem, DEFAULT_CAP)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"scenario": scenario.name, "strategy": ORACLE, "total_cost": round(res.cost, 9),
           "routes": {c.id: list(r) for c, r in zip(problem.crews, res.routes)},
           "switch_states": res.switch_bits.tolist(), "evaluated": res.evaluated}
    (out / "plan.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "time_min", "window_cost", "assignments"])
        w.writerow([0, 0.0, f"{res.cost:.9g}", res.evaluated])
    return True


def cmd_run(args) -> int:
    scenario = _load(args.scenario)
    if scenario is None:
        return EXIT_INVALID
    findings = validate_scenario(scenario)
    if findings:
        for f in findings:
            print(f, file=sys.stderr)
        return EXIT_INVALID
    try:
        config = _sim_config(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    out = Path(args.out)
    if args.strategy == ORACLE:
        try:
            _run_oracle(scenario, config, out)
        except EnumerationRefused as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_INVALID
        return 0
    record, total = run_scenario(scenario, args.strategy, config)
    write_outputs(record, out)
    print(f"{scenario.name} {args.strategy}: total load-loss cost {total:.4f} "
          f"over {len(record.steps)} steps")
    if args.strict and not all(s.converged and s.unconverged_evaluations == 0 for s in record.steps):
        print("error: distributed solver did not converge at every step", file=sys.stderr)
        return EXIT_UNCONVERGED
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "verbose", False):
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "validate":
        return cmd_validate(args)
    return cmd_run(args)


if __name__ == "__main__":
    sys.exit(main())
