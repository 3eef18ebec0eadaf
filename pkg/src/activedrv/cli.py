"""Command-line front end: validate, decompose, check, simulate, stats.

Exit codes: 0 when everything passes, 1 when a verification fails,
2 on usage, parse or resource errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

from . import __version__
from .cfgopt import optimize
from .checker import (
    DEFAULT_STATE_BUDGET,
    ReplayError,
    StateBudgetExceeded,
    Status,
    Verdict,
    check_all,
)
from .decomposition import (
    DecompositionError,
    check_decomposition,
    load_decomposition,
    substitute_parts,
)
from .driver import DriverError, LoweringError, load_driver, lower, well_formed
from .driver.cfg import DEFAULT_INLINE_BUDGET
from .lexer import SyntaxError_
from .protocol import load_protocol, validate
from .runtime import DEFAULT_FAIRNESS_K, SimStatus
from .runtime import run as simulate_run

EXIT_OK, EXIT_FAIL, EXIT_ERROR = 0, 1, 2


class UsageError(Exception):
    pass


def _positive(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be positive: {value}")
    return value


def _digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _document(command: str, paths, result: dict) -> str:
    doc = {
        "tool": {"name": "activedrv", "version": __version__},
        "command": command,
        "inputs": [{"path": str(p), "sha256": _digest(p)} for p in paths],
        "result": result,
    }
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def _emit(args, command: str, paths, result: dict, text: str) -> None:
    if args.format == "machine":
        sys.stdout.write(_document(command, paths, result))
    else:
        sys.stdout.write(text)


# -- input loading -------------------------------------------------------------

def _load_protocols(paths):
    """Protocols as declared (for parsing the driver) and as checked
    (decomposition manifests replaced by their completed parts)."""
    declared, checked, manifests = [], [], []
    for p in paths:
        if str(p).endswith(".decomp"):
            d = load_decomposition(p)
            declared.append(d.parent)
            manifests.append(d)
        else:
            declared.append(load_protocol(p))
    checked = list(declared)
    for d in manifests:
        checked = substitute_parts(checked, d)
    return declared, checked


def _load_cfg(args, declared):
    program = load_driver(args.driver, declared)
    cfg = lower(program, args.inline_budget)
    errors = [d for d in well_formed(cfg, declared) if d.severity == "error"]
    if errors:
        raise UsageError("; ".join(str(e) for e in errors))
    opt = None
    if args.cfg_opt == "on":
        opt = optimize(cfg)
        cfg = opt.cfg
    return cfg, opt


# -- subcommands ---------------------------------------------------------------

def cmd_validate(args) -> int:
    results, lines, failed = [], [], False
    for path in args.files:
        p = load_protocol(path)
        diags = validate(p)
        failed |= any(d.severity == "error" for d in diags)
        results.append({"protocol": p.name, "diagnostics": [
            {"severity": d.severity, "message": d.message, "state": d.state} for d in diags]})
        lines.append(f"{path}: {p.name}: {'ok' if not diags else f'{len(diags)} diagnostic(s)'}")
        lines += [f"  {d}" for d in diags]
    _emit(args, "validate", args.files, {"protocols": results}, "\n".join(lines) + "\n")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_decompose(args) -> int:
    d = load_decomposition(args.manifest)
    report = check_decomposition(d, args.budget)
    _emit(args, "decompose", [args.manifest], report.to_dict(), report.format_text())
    return EXIT_OK if report.ok else EXIT_FAIL


def cmd_check(args) -> int:
    declared, checked = _load_protocols(args.protocols)
    cfg, opt = _load_cfg(args, declared)
    report = check_all(cfg, checked, args.budget, timing=args.timing)
    if opt is not None:
        report.cfg_opt = opt.to_dict()
    result = report.to_dict()
    result["options"] = {"cfg_opt": args.cfg_opt}
    text = report.format_text()
    if opt is not None:
        text += f"  cfg-opt: {len(opt.cfg.nodes)} nodes after rewriting\n"
    _emit(args, "check", [args.driver, *args.protocols], result, text)
    return EXIT_FAIL if report.failed else EXIT_OK


def _replay_verdict(args) -> tuple[Verdict, str]:
    doc = json.loads(Path(args.replay).read_text(encoding="utf-8"))
    report = doc.get("result", doc)
    failing = [Verdict.from_dict(v) for v in report.get("verdicts", ())
               if v.get("status") == Status.FAIL.value]
    if args.rule:
        failing = [v for v in failing if v.rule.value == args.rule]
    if not failing:
        raise UsageError(f"{args.replay} contains no failing verdict to replay")
    cfg_opt = report.get("options", {}).get("cfg_opt", "off")
    return failing[0], cfg_opt


def cmd_simulate(args) -> int:
    declared, checked = _load_protocols(args.protocols)
    verdict = None
    if args.replay:
        verdict, args.cfg_opt = _replay_verdict(args)
    cfg, _ = _load_cfg(args, declared)
    result = simulate_run(cfg, checked, seed=args.seed, max_steps=args.steps,
                          fairness_k=args.fairness_k, capacity1=args.capacity1,
                          priority=tuple(args.priority), replay=verdict)
    out = result.to_dict()
    if verdict is not None:
        out["replay"] = {"rule": verdict.rule.value, "source": str(args.replay)}
    paths = [args.driver, *args.protocols] + ([args.replay] if args.replay else [])
    _emit(args, "simulate", paths, out, result.format_text())
    return EXIT_FAIL if result.verdict.status is SimStatus.VIOLATION else EXIT_OK


def cmd_stats(args) -> int:
    rows = []
    for path in args.files:
        if str(path).endswith(".decomp"):
            d = load_decomposition(path)
            p, parts = d.parent, len(d.parts)
        else:
            p, parts = load_protocol(path), None
        rows.append({"protocol": p.name, "states": len(p.states),
                     "transitions": len(p.transitions), "subprotocols": parts})
    text = "protocol #states #transitions #subprotocols\n" + "".join(
        f"{r['protocol']} {r['states']} {r['transitions']} "
        f"{'-' if r['subprotocols'] is None else r['subprotocols']}\n" for r in rows)
    _emit(args, "stats", args.files, {"rows": rows}, text)
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--format", choices=("text", "machine"), default="text",
                        help="human-readable text or sorted-key JSON")

    parser = argparse.ArgumentParser(
        prog="activedrv", description="Protocol checking for message-passing device drivers.")
    parser.add_argument("--version", action="version", version=f"activedrv {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", parents=[common], help="parse and validate protocol files")
    p.add_argument("files", nargs="+")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("decompose", parents=[common], help="check a protocol decomposition")
    p.add_argument("manifest")
    p.add_argument("--budget", type=_positive, default=DEFAULT_STATE_BUDGET)
    p.set_defaults(func=cmd_decompose)

    driver_args = argparse.ArgumentParser(add_help=False)
    driver_args.add_argument("driver")
    driver_args.add_argument("protocols", nargs="*",
                             help="protocol files, or .decomp manifests to check against parts")
    driver_args.add_argument("--inline-budget", type=_positive, default=DEFAULT_INLINE_BUDGET)

    p = sub.add_parser("check", parents=[common, driver_args], help="check the five rules")
    p.add_argument("--cfg-opt", choices=("on", "off"), default="off")
    p.add_argument("--budget", type=_positive, default=DEFAULT_STATE_BUDGET,
                   help="maximum number of product states")
    p.add_argument("--timing", action="store_true", help="include wall time in the report")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("simulate", parents=[common, driver_args],
                       help="run the driver against a simulated OS")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=_positive, default=10_000)
    p.add_argument("--fairness-k", type=_positive, default=DEFAULT_FAIRNESS_K)
    p.add_argument("--capacity1", action="store_true", help="mailboxes hold one message")
    p.add_argument("--priority", action="append", default=[], metavar="MAILBOX",
                   help="deliver this mailbox ahead of others (repeatable)")
    p.add_argument("--replay", metavar="REPORT", help="replay a failing trace from a check report")
    p.add_argument("--rule", help="which failing verdict of the report to replay")
    p.add_argument("--cfg-opt", choices=("on", "off"), default="off")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("stats", parents=[common], help="protocol size table")
    p.add_argument("files", nargs="+")
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (SyntaxError_, DecompositionError, LoweringError, UsageError, ReplayError) as exc:
        where = ""
        if isinstance(exc, (DriverError,)) and getattr(args, "driver", None):
            where = f"{args.driver}:"
        print(f"activedrv: error: {where}{exc}", file=sys.stderr)
    except StateBudgetExceeded as exc:
        print(f"activedrv: error: {exc}", file=sys.stderr)
    except (OSError, json.JSONDecodeError, ValueError) as exc:
        print(f"activedrv: error: {exc}", file=sys.stderr)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
