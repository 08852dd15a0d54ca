"""Plan executor and monitor.

Runs plan -> dispatch -> monitor.  A failed ``find`` refutes the committed
hypothesis and triggers a replan; when no hypothesis is left the operator's
assumption is diagnosed and execution fails with the report.  Other skill
failures are retried once and then end the task.

Skills run on a worker thread so :meth:`Executor.abort` stays responsive: the
control loop never waits longer than one tick before re-checking for a
cancellation request.
"""

from __future__ import annotations

import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor, TimeoutError as FutureTimeout
from dataclasses import dataclass, field
from typing import Protocol

from .kb import DiagnosisReport, KnowledgeBase, Triple
from .planner import (
    ROBOT,
    ActionInstance,
    DiagnosisTrigger,
    Domain,
    Goal,
    NoPlan,
    Plan,
    State,
    apply,
    goal_satisfied,
    plan as make_plan,
    replan_after_failure,
)
from .world import PREEMPTED, SkillOutcome

log = logging.getLogger(__name__)

IDLE, EXECUTING, REPLANNING, DIAGNOSING, SUCCEEDED, FAILED = (
    "idle", "executing", "replanning", "diagnosing", "succeeded", "failed"
)
TRANSITIONS = {
    IDLE: {EXECUTING, SUCCEEDED, DIAGNOSING},
    EXECUTING: {EXECUTING, REPLANNING, SUCCEEDED, FAILED},
    REPLANNING: {EXECUTING, DIAGNOSING},
    DIAGNOSING: {FAILED},
    SUCCEEDED: set(),
    FAILED: set(),
}


class ExecutorError(Exception):
    pass


class SkillUnavailable(ExecutorError):
    pass


class AbortRequested(ExecutorError):
    def __init__(self, result: "ExecutionResult"):
        super().__init__("execution aborted")
        self.result = result


class Skills(Protocol):
    def supports(self, name: str) -> bool: ...

    def dispatch(self, action: ActionInstance, cancel: threading.Event | None = None) -> SkillOutcome: ...


@dataclass
class ExecutionStatus:
    phase: str = IDLE
    index: int = 0
    hypothesis: str | None = None
    attempts: int = 0


@dataclass
class FailureReport:
    action: str
    error: str | None
    hypothesis: str | None = None


@dataclass
class ExecutionResult:
    status: str
    state: State
    events: list[dict] = field(default_factory=list)
    confirmed: str | None = None
    diagnosis: DiagnosisReport | None = None
    failure: FailureReport | None = None
    plans: int = 0
    refutations: int = 0

    def event_lines(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.events)


def sync_kb(kb: KnowledgeBase, before: State, after: State) -> None:
    """Mirror the belief-state delta of one action into the knowledge base."""
    if before.robot != after.robot:
        kb.assert_fact(Triple(ROBOT, "at", after.robot))
    if before.holding != after.holding:
        if before.holding is not None:
            kb.retract_fact(Triple(ROBOT, "holds", before.holding))
        if after.holding is not None:
            kb.assert_fact(Triple(ROBOT, "holds", after.holding))
    for obj, loc in sorted(before.objects - after.objects):
        kb.retract_fact(Triple(obj, "at", loc))
    for obj, loc in sorted(after.objects - before.objects):
        if obj in kb.entities:
            kb.assert_fact(Triple(obj, "at", loc))
    for person, loc in sorted(after.people - before.people):
        kb.assert_fact(Triple(person, "at", loc))
    for obj, person in sorted(after.delivered - before.delivered):
        kb.assert_fact(Triple(person, "received", obj))
    for person, phrase in sorted(after.said - before.said):
        kb.assert_fact(Triple(person, "heard", phrase))
    for person in sorted(after.followed - before.followed):
        kb.assert_fact(Triple(ROBOT, "followed", person))


class Executor:
    def __init__(self, kb: KnowledgeBase, skills: Skills, *, tick: float = 0.01):
        self.kb = kb
        self.skills = skills
        self.tick = tick
        self.status = ExecutionStatus()
        self._cancel = threading.Event()
        self._running = False
        self._pool = ThreadPoolExecutor(max_workers=1, thread_name_prefix="skill")

    def close(self) -> None:
        self._pool.shutdown(wait=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- control ------------------------------------------------------------

    def abort(self) -> bool:
        """Request cancellation; a no-op while idle.  Always acknowledged."""
        if self._running:
            self._cancel.set()
        return True

    @property
    def abort_requested(self) -> bool:
        return self._cancel.is_set()

    def dispatch(self, action: ActionInstance) -> SkillOutcome:
        if not self.skills.supports(action.name):
            raise SkillUnavailable(action.name)
        if self._cancel.is_set():
            return PREEMPTED
        future = self._pool.submit(self.skills.dispatch, action, self._cancel)
        while True:
            try:
                return future.result(timeout=self.tick)
            except FutureTimeout:
                continue

    # -- main loop ------------------------------------------------------------

    def _clock(self) -> int:
        return int(getattr(self.skills, "clock", 0))

    def _phase(self, phase: str) -> None:
        if phase not in TRANSITIONS[self.status.phase]:
            raise ExecutorError(f"illegal phase change {self.status.phase} -> {phase}")
        self.status.phase = phase

    def _log(self, events: list, action: str | None, outcome: str, hypothesis: str | None = None) -> None:
        e = {"t": self._clock(), "phase": self.status.phase, "action": action, "outcome": outcome, "hypothesis": hypothesis}
        events.append(e)
        log.debug("event %s", e)

    def _resolve(self, a: ActionInstance) -> ActionInstance:
        return ActionInstance(a.name, tuple(self.kb.resolve(x) for x in a.args))

    def execute(self, goal: Goal, s0: State) -> ExecutionResult:
        for name in ("navigate", "find", "pick", "place", "handover", "follow", "guide", "say"):
            if not self.skills.supports(name):
                raise SkillUnavailable(name)
        self.status = ExecutionStatus()
        self._cancel.clear()
        self._running = True
        try:
            return self._run(goal, s0)
        finally:
            self._running = False
            self._cancel.clear()

    def _bound_targets(self, goal: Goal) -> tuple[Triple, ...]:
        if goal.assumption is None:
            return goal.targets
        ent = self.kb.confirmed_entity(goal.assumption)
        return goal.bind(ent) if ent is not None else ()

    def _run(self, goal: Goal, s0: State) -> ExecutionResult:
        events: list[dict] = []
        state = s0
        result = ExecutionResult(IDLE, state, events)
        try:
            current: Plan = make_plan(state, goal, self.kb)
        except NoPlan:
            if goal.assumption is None:
                raise
            self._phase(DIAGNOSING)
            return self._diagnose(goal, result)
        if not current.actions:
            self._phase(SUCCEEDED)
            result.status = SUCCEEDED
            return result

        self._phase(EXECUTING)
        result.plans = 1
        self.status.hypothesis = current.hypothesis
        self._log(events, "plan", "; ".join(map(str, current.actions)), current.hypothesis)
        while True:
            replanned = False
            for i, planned in enumerate(current.actions):
                self.status.index = i
                action = self._resolve(planned)
                outcome = self._attempt(action, events, current.hypothesis)
                result.state = state
                if outcome.status == "preempted":
                    result.status = "aborted"
                    raise AbortRequested(result)
                if outcome.ok:
                    if action.name == "find":
                        action = ActionInstance("find", (outcome.revealed or action.args[0], action.args[1]))
                    before, state = state, apply(action, state, self._domain())
                    sync_kb(self.kb, before, state)
                    result.state = state
                    continue
                if action.name != "find":
                    self._phase(FAILED)
                    result.status = FAILED
                    result.failure = FailureReport(str(action), outcome.error)
                    self._log(events, None, f"task failed: {action} {outcome}")
                    return result
                # sensing failure: the committed hypothesis was wrong
                result.failure = FailureReport(str(action), outcome.error, current.hypothesis)
                self._phase(REPLANNING)
                nxt = replan_after_failure(state, goal, self.kb, current.hypothesis, current.hypothesis)
                result.refutations += 1
                self._log(events, "refute", "refuted", current.hypothesis)
                if isinstance(nxt, DiagnosisTrigger):
                    self._phase(DIAGNOSING)
                    return self._diagnose(goal, result)
                current = nxt
                result.plans += 1
                self._phase(EXECUTING)
                self.status.hypothesis = current.hypothesis
                self._log(events, "plan", "; ".join(map(str, current.actions)), current.hypothesis)
                replanned = True
                break
            if replanned:
                continue
            targets = self._bound_targets(goal)
            if targets and goal_satisfied(targets, state, self._domain()):
                self._phase(SUCCEEDED)
                result.status = SUCCEEDED
                result.failure = None
                if goal.assumption is not None:
                    result.confirmed = self.kb.confirmed_entity(goal.assumption)
                self._log(events, None, "goal satisfied", current.hypothesis)
                return result
            self._phase(FAILED)
            result.status = FAILED
            self._log(events, None, "plan finished without satisfying the goal")
            return result

    def _attempt(self, action: ActionInstance, events: list, hypothesis: str | None) -> SkillOutcome:
        self.status.attempts = 0
        while True:
            self.status.attempts += 1
            outcome = self.dispatch(action)
            self._log(events, str(action), str(outcome), hypothesis)
            # only non-sensing failures earn one retry
            if outcome.ok or outcome.status == "preempted" or action.name == "find" or self.status.attempts > 1:
                return outcome

    def _diagnose(self, goal: Goal, result: ExecutionResult) -> ExecutionResult:
        report = self.kb.diagnose(goal.assumption)
        self._log(result.events, "diagnose", report.conclusion)
        self._phase(FAILED)
        result.status = FAILED
        result.diagnosis = report
        self._log(result.events, None, report.summary())
        return result

    def _domain(self) -> Domain:
        return Domain.from_kb(self.kb)
