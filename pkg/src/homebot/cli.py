"""Command-line entry point.

Exit codes: 0 ok, 1 regression mismatch (or invalid machine), 2 task failed or
diagnosed, 3 aborted, 64 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import queue
import random
import sys
import threading
from pathlib import Path
from typing import TextIO

from . import hallway, hfsm, prism
from .agent import Session
from .grammar import default_grammar
from .kb import KnowledgeBase
from .scenario import EXIT_USAGE, ScenarioError, run_scenario
from .world import WorldError

log = logging.getLogger("homebot")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# repl


def repl(session: Session, stdin: TextIO, stdout: TextIO) -> int:
    """Read utterances and meta-commands; execution happens on a worker thread
    so ``:abort`` is honoured while a task runs."""
    out_lock = threading.Lock()

    def say(text: str) -> None:
        with out_lock:
            stdout.write(text + "\n")
            stdout.flush()

    session.listeners.append(lambda e: say("  " + json.dumps(e, sort_keys=True)))
    work: queue.Queue[str | None] = queue.Queue()

    def worker() -> None:
        while True:
            item = work.get()
            if item is None:
                return
            if item == ":kb":
                for line in session.kb.dump():
                    say(line)
                continue
            report = session.command(item)
            if report.status == "parse-error":
                say(f"parse error: {report.message}")
                continue
            if report.diagnosis is not None:
                say(json.dumps(report.diagnosis.to_dict(), sort_keys=True))
            say(report.message)

    t = threading.Thread(target=worker, name="repl-worker", daemon=True)
    t.start()
    interactive = stdin.isatty()
    say("homebot repl: type a command, or :kb, :abort, :quit")
    while True:
        if interactive:
            with out_lock:
                stdout.write("> ")
                stdout.flush()
        line = stdin.readline()
        if not line:
            break
        line = line.strip()
        if not line:
            continue
        if line == ":quit":
            break
        if line == ":abort":
            session.abort()
            say("abort requested")
            continue
        if line.startswith(":") and line != ":kb":
            say(f"unknown meta-command {line}")
            continue
        work.put(line)
    work.put(None)
    t.join()
    return 0


def cmd_repl(args) -> int:
    try:
        session = Session(args.world, seed=args.seed, realtime=args.realtime)
    except (OSError, WorldError, ValueError) as exc:
        raise UsageError(f"cannot load world: {exc}") from None
    with session:
        code = repl(session, sys.stdin, sys.stdout)
        if args.log:
            Path(args.log).write_text(session.log_lines())
    return code


# ---------------------------------------------------------------------------
# batch subcommands


def cmd_run(args) -> int:
    try:
        result = run_scenario(args.scenario, seed=args.seed, max_steps=args.max_steps)
    except (ScenarioError, OSError, WorldError) as exc:
        raise UsageError(str(exc)) from None
    if args.log:
        Path(args.log).write_text(result.log)
    else:
        sys.stdout.write(result.log)
    for r in result.reports:
        log.info("%s: %s", r.status, r.message)
    print(f"status: {result.status}", file=sys.stderr)
    if result.expected is not None and result.status != result.expected:
        print(result.diff(), file=sys.stderr)
    return result.exit_code


def cmd_gen(args) -> int:
    g = default_grammar()
    rng = random.Random(args.seed)
    lines = []
    for _ in range(args.count):
        text, frame = g.generate(rng.getrandbits(32))
        lines.append(json.dumps({"utterance": text, "frame": frame.to_dict()}, sort_keys=True))
    body = "".join(l + "\n" for l in lines)
    if args.out:
        Path(args.out).write_text(body)
    else:
        sys.stdout.write(body)
    return 0


def cmd_prism(args) -> int:
    try:
        detections = prism.load_detections(args.detections)
        amap = prism.AnnotationMap.load(args.map) if args.map else prism.AnnotationMap()
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot read input: {exc}") from None
    amap.merge_distance = args.merge_distance
    kb = KnowledgeBase()
    prism.ingest(detections, amap, kb)
    amap.save(args.out)
    if args.facts:
        Path(args.facts).write_text("".join(l + "\n" for l in kb.dump()))
    print(f"{len(detections)} detections -> {len(amap)} annotations", file=sys.stderr)
    return 0


def cmd_hallway(args) -> int:
    try:
        spec = hallway.CorridorSpec()
        policy = hallway.SignalPolicy(hallway.CLI_POLICIES[args.policy])
        human = hallway.HumanModel(p_comply=args.p_comply, latency=args.latency, p_dodge=args.p_dodge)
    except hallway.InvalidSpec as exc:
        raise UsageError(str(exc)) from None
    report = hallway.run_batch(spec, policy, human, args.n, args.seed)
    if args.out:
        Path(args.out).write_text(report.to_json())
    else:
        sys.stdout.write(report.to_json())
    lo, hi = report.ci95
    print(f"{policy.kind} p_comply={args.p_comply}: rate {report.rate:.4f} (95% CI {lo:.4f}-{hi:.4f})", file=sys.stderr)
    return 0


def cmd_validate(args) -> int:
    try:
        m = hfsm.MachineDefinition.load(args.machine)
    except (OSError, ValueError, hfsm.InvalidMachine) as exc:
        raise UsageError(f"cannot load machine: {exc}") from None
    defects = hfsm.validate(m)
    if not defects:
        print("ok")
        return 0
    for d in defects:
        print(d)
    return 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="homebot", description="Service-robot task stack on a simulated home.")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    r = sub.add_parser("repl", help="interactive command session")
    r.add_argument("world", nargs="?", default="demo_apartment.json")
    r.add_argument("--seed", type=int)
    r.add_argument("--log", help="write the JSON-lines event log here")
    r.add_argument("--realtime", type=float, default=0.0, help="wall seconds per simulated tick")
    r.set_defaults(func=cmd_repl)

    s = sub.add_parser("run", help="run a scenario file")
    s.add_argument("scenario")
    s.add_argument("--seed", type=int)
    s.add_argument("--log", help="write the JSON-lines event log here instead of stdout")
    s.add_argument("--max-steps", type=int, default=1000)
    s.set_defaults(func=cmd_run)

    g = sub.add_parser("gen", help="generate a command corpus")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=100)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen)

    pr = sub.add_parser("prism", help="landmark annotation pipeline")
    psub = pr.add_subparsers(dest="prism_command", parser_class=_Parser)
    ing = psub.add_parser("ingest", help="register detections into an annotation map")
    ing.add_argument("--detections", required=True)
    ing.add_argument("--map", help="existing annotation map to extend")
    ing.add_argument("--out", required=True)
    ing.add_argument("--facts", help="also write the KB facts here")
    ing.add_argument("--merge-distance", type=float, default=prism.MERGE_DISTANCE)
    ing.add_argument("--seed", type=int, help="accepted for uniformity; ingestion is deterministic")
    ing.set_defaults(func=cmd_prism)

    h = sub.add_parser("hallway", help="corridor passing batch")
    h.add_argument("--policy", choices=sorted(hallway.CLI_POLICIES), default="signal")
    h.add_argument("--p-comply", type=float, default=0.1)
    h.add_argument("--p-dodge", type=float, default=0.0)
    h.add_argument("--latency", type=float, default=0.5)
    h.add_argument("--n", type=int, default=1000)
    h.add_argument("--seed", type=int, default=0)
    h.add_argument("--out")
    h.set_defaults(func=cmd_hallway)

    v = sub.add_parser("validate", help="check an HFSM definition")
    v.add_argument("--machine", required=True)
    v.set_defaults(func=cmd_validate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    func = getattr(args, "func", None)
    if func is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return func(args)
    except UsageError as exc:
        print(f"homebot: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
