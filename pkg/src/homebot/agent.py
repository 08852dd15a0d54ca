"""A robot session: world, knowledge base, grammar and executor wired together.

The REPL, the scenario runner and HFSM scripts all drive the robot through a
:class:`Session`, so the same commands under the same seed leave the same
event log whichever front end issued them.
"""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping

from .executor import AbortRequested, ExecutionResult, Executor, SkillUnavailable, sync_kb
from .grammar import CommandFrame, GrammarError, GrammarSpec, default_grammar, frame_to_goal
from .hfsm import Command, Configuration, EventQueue, MachineDefinition, RunTrace, run
from .kb import KBError, DiagnosisReport
from .planner import ActionInstance, Domain, Goal, PlanError, applicable, apply, state_from_kb
from .world import SimWorld, WorldSpec, load_world

log = logging.getLogger(__name__)


@dataclass
class TaskReport:
    status: str  # succeeded | failed | aborted | parse-error
    message: str
    frame: CommandFrame | None = None
    result: ExecutionResult | None = None

    @property
    def diagnosis(self) -> DiagnosisReport | None:
        return self.result.diagnosis if self.result is not None else None


def _success_message(goal: Goal, result: ExecutionResult, kb) -> str:
    t = goal.targets[0]
    if goal.assumption is not None and result.confirmed is not None:
        t = goal.bind(result.confirmed)[0]
    if t.predicate == "received":
        return f"delivered {kb.resolve(t.object)}"
    if t.predicate == "found":
        return f"found {kb.resolve(t.object)}"
    if t.predicate == "at":
        return f"stored {kb.resolve(t.subject)} at {t.object}"
    return f"done: {t}"


class Session:
    def __init__(
        self,
        world: str | Path | Mapping,
        *,
        seed: int | None = None,
        grammar: GrammarSpec | None = None,
        tick: float = 0.01,
        realtime: float = 0.0,
    ):
        spec, kb = load_world(world)
        if seed is not None:
            spec = replace(spec, seed=seed)
        self.spec: WorldSpec = spec
        self.kb = kb
        self.world = SimWorld(spec, kb, tick=tick, realtime=realtime)
        self.executor = Executor(kb, self.world, tick=tick)
        self.grammar = grammar or default_grammar()
        self.log: list[dict] = []
        self.listeners: list[Callable[[dict], None]] = []
        self.frame: CommandFrame | None = None
        self.reports: list[TaskReport] = []

    def close(self) -> None:
        self.executor.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- event log ----------------------------------------------------------

    def _emit(self, phase: str, action: str | None, outcome: str, hypothesis: str | None = None) -> None:
        self._record({"t": self.world.clock, "phase": phase, "action": action, "outcome": outcome, "hypothesis": hypothesis})

    def _record(self, event: dict) -> None:
        self.log.append(event)
        for fn in self.listeners:
            fn(event)

    def log_lines(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.log)

    # -- commands -----------------------------------------------------------

    def parse(self, utterance: str) -> CommandFrame:
        try:
            frame = self.grammar.parse(utterance)
        except GrammarError as exc:
            self._emit("command", "parse", f"error: {exc}")
            raise
        self._emit("command", "parse", json.dumps(frame.to_dict(), sort_keys=True))
        return frame

    def execute(self, frame: CommandFrame) -> TaskReport:
        try:
            goal = frame_to_goal(frame, self.kb)
            result = self.executor.execute(goal, state_from_kb(self.kb))
        except AbortRequested as exc:
            result = exc.result
            for e in result.events:
                self._record(e)
            report = TaskReport("aborted", "aborted", frame, result)
            self._emit("command", None, "aborted")
            self.reports.append(report)
            return report
        except (GrammarError, KBError, PlanError) as exc:
            report = TaskReport("failed", f"cannot execute: {exc}", frame)
            self._emit("command", None, report.message)
            self.reports.append(report)
            return report
        for e in result.events:
            self._record(e)
        if result.status == "succeeded":
            report = TaskReport("succeeded", _success_message(goal, result, self.kb), frame, result)
        elif result.diagnosis is not None:
            report = TaskReport("failed", result.diagnosis.summary(), frame, result)
        else:
            f = result.failure
            report = TaskReport("failed", f"failed: {f.action} ({f.error})" if f else "failed", frame, result)
        self.reports.append(report)
        return report

    def command(self, utterance: str) -> TaskReport:
        try:
            frame = self.parse(utterance)
        except GrammarError as exc:
            report = TaskReport("parse-error", str(exc))
            self.reports.append(report)
            return report
        self.frame = frame
        return self.execute(frame)

    def abort(self) -> bool:
        return self.executor.abort()

    # -- HFSM scripts -----------------------------------------------------------

    def run_machine(self, machine: MachineDefinition, utterances: Iterable[str] = (), *, max_steps: int = 1000) -> RunTrace:
        pending = deque(utterances)
        events = EventQueue()

        def on_transition(old: Configuration, event: str, new: Configuration) -> None:
            self._emit("hfsm", f"{'/'.join(old)} -> {'/'.join(new)}", event)

        def sink(cmd: Command) -> None:
            events.put(self._handle(cmd, pending))

        return run(machine, events, sink, max_steps=max_steps, on_transition=on_transition)

    def _handle(self, cmd: Command, pending: deque) -> str:
        self._emit("hfsm", str(cmd), "emitted")
        name = cmd.name
        try:
            if name == "speech.listen":
                if not pending:
                    return "no-more-commands"
                try:
                    self.frame = self.parse(pending.popleft())
                except GrammarError:
                    return "parse-failed"
                return "command-parsed"
            if name == "executor.execute":
                if self.frame is None:
                    return "error"
                report = self.execute(self.frame)
                return {"succeeded": "task-succeeded", "aborted": "task-aborted"}.get(report.status, "task-failed")
            if name == "skill.dispatch":
                return self._skill(ActionInstance.parse(cmd.arg("action")))
            if name == "speech.report":
                last = self.reports[-1].message if self.reports else cmd.arg("outcome")
                self._emit("report", None, last)
                return "reported"
            if name == "robot.stop":
                self.abort()
                return "recovered"
            if name == "timer.wait":
                for _ in range(int(cmd.arg("ticks", "1"))):
                    self.world._tick(None)
                return "timer-expired"
        except (KBError, PlanError, SkillUnavailable, ValueError) as exc:
            log.warning("command %s raised %s", cmd, exc)
            self._emit("hfsm", str(cmd), f"error: {exc}")
            return "error"
        raise ValueError(f"unknown HFSM command {name!r}")

    def _skill(self, action: ActionInstance) -> str:
        before = state_from_kb(self.kb)
        domain = Domain.from_kb(self.kb)
        outcome = self.executor.dispatch(action)
        self._emit("skill", str(action), str(outcome))
        if not outcome.ok:
            return "skill-failed"
        if applicable(action, before, domain):
            sync_kb(self.kb, before, apply(action, before, domain))
        return "skill-succeeded"
