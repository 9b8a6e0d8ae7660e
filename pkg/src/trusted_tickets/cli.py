"""Command-line entry point.

    trusted-tickets scenario generic --agents 100 --groups 3 --seed 7
    trusted-tickets inspect run.txt "count kind=QUOTE"
    trusted-tickets ledger cp --ledger-dir ./ledgers

Exit status: 0 success, 1 a scenario check failed, 2 bad usage.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import BadConfig, BadQuery
from .harness.faults import FaultPlan
from .harness.inspect import inspect
from .harness.network import Transcript
from .harness.runner import SCENARIOS, ScenarioConfig, parse_groups, run_scenario

LEDGER_FILES = {"pca": ("escrow.jsonl", "audit.jsonl"), "rs": ("rs.jsonl",), "cp": ("cp.jsonl",)}


def _config(args: argparse.Namespace) -> ScenarioConfig:
    cfg = ScenarioConfig.from_file(args.config) if args.config else ScenarioConfig()
    overrides = {}
    if args.agents is not None:
        overrides["agents"] = args.agents
    if args.groups is not None:
        overrides["groups"] = parse_groups(args.groups)
    if args.messages is not None:
        overrides["messages"] = args.messages
    if args.transport is not None:
        overrides["transport"] = args.transport
    if overrides:
        merged = {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}
        merged.update(overrides)
        cfg = ScenarioConfig(**merged)
    return cfg


def cmd_scenario(args: argparse.Namespace) -> int:
    cfg = _config(args)
    plan = FaultPlan.parse(args.fault, seed=args.seed)
    transcript, summary = run_scenario(args.name, cfg, args.seed, plan, args.ledger_dir)
    if args.transcript:
        transcript.write(args.transcript)
    sys.stdout.write(summary.text())
    return 0 if summary.ok else 1


def cmd_inspect(args: argparse.Namespace) -> int:
    transcript = Transcript.load(args.transcript)
    status = 0
    for query in args.query or ["count"]:
        result = inspect(transcript, query)
        lines = result.lines() if args.verbose else result.lines()[:1]
        print("\n".join(lines))
        if not result.monotone:
            print(f"{query}: sequence numbers are not monotone")
            status = 1
    return status


def cmd_ledger(args: argparse.Namespace) -> int:
    base = Path(args.ledger_dir)
    found = False
    for name in LEDGER_FILES[args.party]:
        path = base / name
        if path.exists():
            found = True
            print(f"# {name}")
            sys.stdout.write(path.read_text())
    if not found:
        print(f"no {args.party} ledger under {base}", file=sys.stderr)
        return 2
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="trusted-tickets", description="Group-credential ticket system simulator")
    sub = ap.add_subparsers(dest="command", required=True)

    sc = sub.add_parser("scenario", help="run a scenario and print its summary")
    sc.add_argument("name", choices=SCENARIOS)
    sc.add_argument("--seed", type=int, default=0)
    sc.add_argument("--agents", type=int)
    sc.add_argument("--groups", help="G, or g:price:k=v;k=v,...")
    sc.add_argument("--messages", type=int, help="push scenarios: messages per device")
    sc.add_argument("--fault", action="append", default=[], help="e.g. tamper_bit:segment=TA_RS")
    sc.add_argument("--transcript", help="write the transcript here")
    sc.add_argument("--transport", choices=("inproc", "socket"))
    sc.add_argument("--config", help="JSON scenario configuration")
    sc.add_argument("--ledger-dir", help="write PCA/RS/CP journals here")
    sc.set_defaults(func=cmd_scenario)

    ins = sub.add_parser("inspect", help="query a transcript file")
    ins.add_argument("transcript")
    ins.add_argument("query", nargs="*", help='e.g. "count kind=QUOTE", "search hello segment=NOC"')
    ins.add_argument("-v", "--verbose", action="store_true", help="print matching envelopes")
    ins.set_defaults(func=cmd_inspect)

    led = sub.add_parser("ledger", help="print a party's journal from --ledger-dir")
    led.add_argument("party", choices=sorted(LEDGER_FILES))
    led.add_argument("--ledger-dir", default=".")
    led.set_defaults(func=cmd_ledger)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (BadConfig, BadQuery) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
