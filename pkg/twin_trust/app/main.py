import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

# Load .env before anything reads TWIN_TRUST_* variables
import twin_trust.load_env  # noqa: F401
from twin_trust import __version__
from twin_trust.app.errors import (
    IdMismatchError,
    InvalidInputError,
    InvalidScenarioError,
    ParseError,
    TwinTrustError,
    TwinValidationError,
)
from twin_trust.app.schemas import ComplianceConfig, ResolvedConfig, SafetyRuleSet, Trace
from twin_trust.services.compliance import (
    assess,
    has_violations,
    peer_positions_from_traces,
    verdict_document,
    verdict_table,
)
from twin_trust.services.dt_model import load_twin, validate_annotations
from twin_trust.services.exporter import decisions_table, export_run
from twin_trust.services.safety_engine import check_static, compile_ruleset, load_ruleset
from twin_trust.services.settings import parse_weights
from twin_trust.services.swarm_sim import run_scenario_file
from twin_trust.services.utils.custom_logger import configure_logging
from twin_trust.services.utils.file_parser import load_json, load_jsonl, model_from_data, write_text

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_PARSE = 2
EXIT_VIOLATIONS = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="twin-trust",
        description="Digital-Twin based trust building between collaborating drones.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", help="Overrides TWIN_TRUST_LOG (DEBUG, INFO, WARNING, ERROR)")
    commands = parser.add_subparsers(dest="command", required=True)

    validate = commands.add_parser("validate", help="Validate a Digital Twin document")
    validate.add_argument("twin", help="Twin JSON file")
    validate.add_argument("--rules", default="default", help="Hazard catalog used for annotation checks")

    run = commands.add_parser("run", help="Run a scenario and write its artifacts")
    run.add_argument("scenario", help="Scenario JSON file")
    run.add_argument("--out", help="Output directory for artifacts")
    run.add_argument("--seed", type=int)
    run.add_argument("--rules", help="Hazard catalog path, or 'default'")
    run.add_argument("--window", type=int, help="Evaluation window in ticks")
    run.add_argument("--threshold", type=float, help="Trust decision threshold")
    run.add_argument("--weights", help="Direct and indirect weights, e.g. 0.7,0.3")

    check = commands.add_parser("assess", help="Assess a recorded trace against a twin")
    check.add_argument("twin", help="Twin JSON file")
    check.add_argument("trace", help="Trace JSON Lines file")
    check.add_argument("rules", nargs="?", help="Hazard catalog (rules.json of a run, or a catalog file)")
    check.add_argument("--peers", nargs="*", default=[], help="Peer trace files for separation checks")
    check.add_argument("--peer-dir", help="Directory of peer traces (<id>.jsonl)")
    check.add_argument("--config", help="resolved_config.json of a run")
    check.add_argument("--out", help="Directory for the verdict document")
    check.add_argument("--json", action="store_true", help="Print the verdict document instead of the table")
    return parser


def _load_rules(ref: Optional[str]) -> SafetyRuleSet:
    if ref is None or ref == "default":
        return load_ruleset("default")
    return compile_ruleset(load_json(ref))


def load_trace(path: str, drone_id: Optional[str] = None) -> Trace:
    """Read a JSON Lines trace; an empty file yields an empty trace for ``drone_id``."""
    rows = load_jsonl(path)
    if rows and isinstance(rows[0], dict):
        drone_id = rows[0].get("drone_id", drone_id)
    if drone_id is None:
        drone_id = Path(path).stem
    return model_from_data(Trace, {"drone_id": drone_id, "records": rows}, str(path))


def cmd_validate(args: argparse.Namespace) -> int:
    try:
        rules = _load_rules(args.rules)
        twin = load_twin(args.twin)
    except FileNotFoundError as e:
        print(f"error: file not found: {e.filename}", file=sys.stderr)
        return EXIT_PARSE
    except TwinValidationError as e:
        print(f"{args.twin}: INVALID")
        for violation in e.report.violations:
            print(f"  [{violation.kind}] {violation.message}")
        return EXIT_INVALID
    except TwinTrustError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PARSE

    annotations = validate_annotations(twin.fsm, rules)
    if not annotations.valid:
        print(f"{args.twin}: INVALID")
        for violation in annotations.violations:
            print(f"  [{violation.kind}] {violation.message}")
        return EXIT_INVALID

    print(f"{args.twin}: valid ({len(twin.fsm.states)} states, {len(twin.fsm.transitions)} transitions)")
    for violation in check_static(twin.attrs, rules):
        print(f"  static rule {violation.rule_id}: {violation.message}")
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    try:
        weights = parse_weights(args.weights) if args.weights else None
        rules_ref = args.rules
        if rules_ref is not None and rules_ref != "default":
            rules_ref = str(Path(rules_ref).resolve())
        result = run_scenario_file(
            args.scenario,
            seed=args.seed,
            window=args.window,
            threshold=args.threshold,
            weights=weights,
            rules=rules_ref,
        )
    except FileNotFoundError as e:
        print(f"error: file not found: {e.filename}", file=sys.stderr)
        return EXIT_INVALID
    except InvalidScenarioError as e:
        print(f"{args.scenario}: invalid scenario", file=sys.stderr)
        for problem in e.problems:
            print(f"  - {problem}", file=sys.stderr)
        return EXIT_INVALID
    except (InvalidInputError, TwinTrustError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID

    if args.out:
        manifest = export_run(result, args.out, scenario_path=args.scenario)
        print(f"wrote {len(manifest.outputs) + 1} files to {args.out} (config {manifest.config_hash[:12]})")
    print(decisions_table(result), end="")
    return EXIT_OK


def _peer_traces(args: argparse.Namespace, subject_id: str) -> List[Trace]:
    paths: List[Path] = [Path(p) for p in args.peers]
    if args.peer_dir:
        paths.extend(sorted(Path(args.peer_dir).glob("*.jsonl")))
    traces: List[Trace] = []
    seen = set()
    for path in paths:
        trace = load_trace(str(path))
        if trace.drone_id == subject_id or trace.drone_id in seen:
            continue
        seen.add(trace.drone_id)
        traces.append(trace)
    return traces


def cmd_assess(args: argparse.Namespace) -> int:
    try:
        twin = load_twin(args.twin)
        trace = load_trace(args.trace, twin.drone_id)
        rules = _load_rules(args.rules)
        compliance = ComplianceConfig()
        if args.config:
            compliance = model_from_data(ResolvedConfig, load_json(args.config), args.config).compliance
        peers = peer_positions_from_traces(_peer_traces(args, trace.drone_id), exclude=trace.drone_id)
        verdict = assess(twin, trace, rules, peers, compliance)
    except FileNotFoundError as e:
        print(f"error: file not found: {e.filename}", file=sys.stderr)
        return EXIT_PARSE
    except IdMismatchError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PARSE
    except ParseError as e:
        print(f"parse error at {e.location}: {e.message}", file=sys.stderr)
        return EXIT_PARSE
    except TwinTrustError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PARSE

    document = verdict_document(verdict)
    if args.out:
        write_text(Path(args.out) / f"{verdict.drone_id}.json", document)
    print(document if args.json else verdict_table(verdict), end="")
    return EXIT_VIOLATIONS if has_violations(verdict) else EXIT_OK


COMMANDS = {
    "validate": cmd_validate,
    "run": cmd_run,
    "assess": cmd_assess,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    logger.debug(f"twin-trust {__version__}: {args.command}")
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
