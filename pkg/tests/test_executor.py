import threading
import time
from dataclasses import replace

import pytest

from conftest import apple_world, demo_world_dict
from homebot.agent import Session
from homebot.executor import AbortRequested, Executor, SkillUnavailable
from homebot.grammar import CommandFrame, frame_to_goal
from homebot.kb import REFUTED, ObjectDescriptor, Triple
from homebot.planner import ActionInstance, Domain, Goal, apply, state_from_kb
from homebot.world import SimWorld, load_world

APPLE = CommandFrame("bring", ObjectDescriptor("apple", "indefinite"), "kitchen", None, "operator")


def executor_for(world, **kw):
    spec, kb = load_world(world)
    sim = SimWorld(spec, kb, **kw)
    return Executor(kb, sim), kb, sim


@pytest.mark.parametrize("k", [1, 2, 3])
def test_apple_at_kth_location(k):
    ex, kb, _ = executor_for(apple_world(k))
    with ex:
        result = ex.execute(frame_to_goal(APPLE, kb), state_from_kb(kb))
    assert result.status == "succeeded"
    assert result.refutations == k - 1
    assert result.plans == k
    assert sum(1 for e in result.events if e["action"] == "plan") == k
    assert result.confirmed == "apple-1"
    assert ("apple-1", "operator") in result.state.delivered


def test_no_apple_diagnosis():
    ex, kb, _ = executor_for(apple_world(None))
    with ex:
        result = ex.execute(frame_to_goal(APPLE, kb), state_from_kb(kb))
    assert result.status == "failed"
    assert result.refutations == 3
    assert result.diagnosis.conclusion == "invalid"
    assert result.diagnosis.summary() == "assumption invalid: no apple in kitchen"
    assert result.events[-1]["outcome"] == "assumption invalid: no apple in kitchen"


def test_satisfied_goal_is_immediate():
    ex, kb, _ = executor_for("demo_apartment.json")
    with ex:
        result = ex.execute(Goal((Triple("robot", "at", "entrance"),)), state_from_kb(kb))
    assert result.status == "succeeded"
    assert result.events == []


def test_refutations_trace_to_failed_finds():
    ex, kb, _ = executor_for(apple_world(None))
    with ex:
        result = ex.execute(frame_to_goal(APPLE, kb), state_from_kb(kb))
    refuted = sorted(h for h, x in kb.hypotheses.items() if x.status == REFUTED)
    failed_finds = [
        e for e in result.events if (e["action"] or "").startswith("find(") and e["outcome"] == "failed(not-found)"
    ]
    assert sorted(e["hypothesis"] for e in failed_finds) == refuted
    assert len(failed_finds) == len(refuted) == 3


@pytest.mark.parametrize("k", [1, 3])
def test_event_log_replay(k):
    ex, kb, _ = executor_for(apple_world(k))
    s0 = state_from_kb(kb)
    with ex:
        result = ex.execute(frame_to_goal(APPLE, kb), s0)
    domain = Domain.from_kb(kb)
    s = s0
    for e in result.events:
        if e["action"] in (None, "plan", "refute", "diagnose") or e["outcome"] != "succeeded":
            continue
        a = ActionInstance.parse(e["action"])
        if a.name == "find":
            obj, loc = kb.resolve(a.args[0]), a.args[1]
            a = ActionInstance("find", (obj, loc))
            s = replace(s, expected=s.expected | {(obj, loc)})
        s = apply(a, s, domain)
    assert s == result.state


def test_dispatch_outcomes():
    ex, kb, sim = executor_for(apple_world(3))
    with ex:
        assert ex.dispatch(ActionInstance("navigate", ("counter",))).ok
        assert sim.robot == "counter"
        out = ex.dispatch(ActionInstance("find", ("apple", "counter")))
        assert str(out) == "failed(not-found)"


def test_dispatch_during_abort_is_preempted():
    ex, kb, sim = executor_for("demo_apartment.json")
    with ex:
        ex._running = True
        ex.abort()
        assert ex.dispatch(ActionInstance("navigate", ("counter",))).status == "preempted"
        assert sim.robot == "entrance"


def test_abort_idle_and_idempotent():
    ex, _, _ = executor_for("demo_apartment.json")
    with ex:
        assert ex.abort() is True
        assert ex.abort() is True
        assert not ex.abort_requested


def test_abort_mid_navigation():
    s = Session(apple_world(3), realtime=0.0005)
    out = {}
    t = threading.Thread(target=lambda: out.setdefault("r", s.command("bring me an apple from the kitchen")))
    t.start()
    time.sleep(0.05)
    assert s.abort()
    s.abort()
    t.join(timeout=5)
    s.close()
    report = out["r"]
    assert report.status == "aborted"
    # the robot stopped mid-leg: it never arrived and the clock stopped short of the leg
    assert s.world.robot == "entrance"
    assert 0 < s.world.clock < 400
    assert report.result.state.robot == "entrance"


def test_abort_raises_from_execute():
    ex, kb, sim = executor_for("demo_apartment.json", realtime=0.0005)
    goal = Goal((Triple("robot", "at", "cupboard"),))
    box = {}

    def go():
        try:
            ex.execute(goal, state_from_kb(kb))
        except AbortRequested as exc:
            box["exc"] = exc

    t = threading.Thread(target=go)
    t.start()
    time.sleep(0.05)
    ex.abort()
    t.join(timeout=5)
    ex.close()
    assert box["exc"].result.status == "aborted"


def test_non_sensing_failure_retries_once():
    w = demo_world_dict()
    w["skill_model"] = {"pick": {"p_success": 0.0, "failure": "slipped"}}
    ex, kb, _ = executor_for(w)
    goal = Goal((Triple("operator", "received", "coke-1"),))
    with ex:
        result = ex.execute(goal, state_from_kb(kb))
    picks = [e for e in result.events if e["action"] == "pick(coke-1)"]
    assert [e["outcome"] for e in picks] == ["failed(slipped)", "failed(slipped)"]
    assert result.status == "failed"
    assert result.failure.error == "slipped"
    assert result.refutations == 0
    assert not kb.hypotheses


class NoGuide:
    def supports(self, name):
        return name != "guide"

    def dispatch(self, action, cancel=None):  # pragma: no cover
        raise AssertionError


def test_missing_skill():
    _, kb = load_world("demo_apartment.json")
    with Executor(kb, NoGuide()) as ex:
        with pytest.raises(SkillUnavailable):
            ex.execute(Goal((Triple("robot", "at", "cupboard"),)), state_from_kb(kb))
        with pytest.raises(SkillUnavailable):
            ex.dispatch(ActionInstance("guide", ("jan", "cupboard")))


def test_plan_calls_bounded_by_hypotheses():
    ex, kb, _ = executor_for(apple_world(None))
    goal = frame_to_goal(CommandFrame("bring", ObjectDescriptor("apple", "indefinite"), None, None, "operator"), kb)
    n = len(kb.open_hypotheses(goal.assumption))
    with ex:
        result = ex.execute(goal, state_from_kb(kb))
    assert result.plans <= n
    assert result.diagnosis.conclusion == "invalid"
