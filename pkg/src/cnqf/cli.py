"""Command line entry point: ``cnqf run | validate | version``."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from cnqf import __version__
from cnqf.cas import ATTRIBUTES
from cnqf.errors import AssertionFailure, CnqfError
from cnqf.harness.entities import REQUEST_FIELDS
from cnqf.harness.scenario import NAMED_SCENARIOS, load_scenario_file, run_scenario
from cnqf.harness.trace import write_trace
from cnqf.mms import METRICS
from cnqf.policy import Schema, load_policy_file, validate
from cnqf.topology import load_topology_file


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cnqf", description="Converged-network QoS control plane simulator")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario and write its trace")
    run.add_argument("--scenario", required=True, help="fig3, fig4 or a scenario JSON file")
    run.add_argument("--topology", type=Path, help="override the scenario topology")
    run.add_argument("--policies", type=Path, help="override the scenario policy file")
    run.add_argument("--seed", type=int, help="override the scenario seed")
    run.add_argument("--trace", type=Path, help="trace output path (default: stdout)")

    val = sub.add_parser("validate", help="check a policy file")
    val.add_argument("--policies", required=True, type=Path)
    val.add_argument("--topology", type=Path, help="also check metric targets against a topology")

    sub.add_parser("version", help="print the package version")
    return ap


def _emit(result, trace_path: Path | None) -> None:
    if trace_path is None:
        sys.stdout.write(result.text())
    else:
        write_trace(trace_path, result.trace, result.spec.seed)


def cmd_run(args: argparse.Namespace) -> int:
    try:
        if args.scenario in NAMED_SCENARIOS:
            spec = NAMED_SCENARIOS[args.scenario]()
        else:
            spec = load_scenario_file(args.scenario)
        if args.topology is not None:
            spec = replace(spec, topology=load_topology_file(args.topology))
        if args.policies is not None:
            spec = replace(spec, policies=load_policy_file(args.policies))
        if args.seed is not None:
            spec = replace(spec, seed=args.seed)
        spec.validate()
    except (CnqfError, OSError, KeyError, TypeError) as exc:
        print(f"cnqf: error: {exc}", file=sys.stderr)
        return 1
    try:
        result = run_scenario(spec)
    except AssertionFailure as exc:
        _emit(exc.result, args.trace)
        print(f"cnqf: assertion failed: {exc}", file=sys.stderr)
        return 2
    _emit(result, args.trace)
    return 0


def cmd_validate(args: argparse.Namespace) -> int:
    try:
        policies = load_policy_file(args.policies)
        schema = None
        if args.topology is not None:
            topo = load_topology_file(args.topology)
            schema = Schema(
                attributes=frozenset(ATTRIBUTES),
                metric_targets=frozenset(topo.links) | frozenset(topo.elements),
                metric_names=frozenset(METRICS),
                request_fields=REQUEST_FIELDS,
            )
    except (CnqfError, OSError) as exc:
        print(f"{args.policies}: {exc}", file=sys.stderr)
        return 1
    warnings = validate(policies, schema)
    for w in warnings:
        print(f"{args.policies}: warning: {w}", file=sys.stderr)
    print(f"{args.policies}: {len(policies)} policies, {len(warnings)} warnings")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "run":
        return cmd_run(args)
    if args.command == "validate":
        return cmd_validate(args)
    print(__version__)
    return 0


if __name__ == "__main__":
    sys.exit(main())
