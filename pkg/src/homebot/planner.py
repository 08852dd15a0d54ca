"""Forward state-space planner over grounded service-robot actions.

Search is A* (uniform cost plus an admissible travel lower bound).  Among
equal-cost plans the lexicographically smallest action sequence wins, so the
result is a pure function of ``(state, goal, kb)``.

Goals that refer to an object the robot has not seen carry a placeholder
variable and the id of the operator assumption behind it.  The planner tries
each open hypothesis of that assumption and commits to the cheapest plan.
"""

from __future__ import annotations

import heapq
import itertools
import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Mapping

from .kb import HYPOTHETICAL, REFUTED, KBError, KnowledgeBase, Triple

ROBOT = "robot"
SCHEMAS = ("navigate", "find", "pick", "place", "handover", "follow", "guide", "say")
ARITY = {"navigate": 1, "find": 2, "pick": 1, "place": 2, "handover": 2, "follow": 1, "guide": 2, "say": 2}
MAX_EXPANSIONS = 500_000


class PlanError(Exception):
    pass


class NotApplicable(PlanError):
    pass


class NoPlan(PlanError):
    pass


class NoCupboard(PlanError):
    pass


def _key(x: float) -> float:
    # float sums are compared after rounding so that equal-cost plans tie exactly
    return round(x, 9)


@dataclass(frozen=True, order=True)
class ActionInstance:
    name: str
    args: tuple[str, ...]

    def __post_init__(self):
        if self.name not in SCHEMAS:
            raise ValueError(f"unknown action schema {self.name!r}")
        if len(self.args) != ARITY[self.name]:
            raise ValueError(f"{self.name} takes {ARITY[self.name]} arguments, got {self.args}")

    def __str__(self) -> str:
        return f"{self.name}({', '.join(self.args)})"

    @classmethod
    def parse(cls, text: str) -> "ActionInstance":
        text = text.strip()
        name, _, rest = text.partition("(")
        if not rest.endswith(")"):
            raise ValueError(f"malformed action {text!r}")
        parts = [p.strip() for p in rest[:-1].split(",")]
        arity = ARITY.get(name)
        if arity is None:
            raise ValueError(f"unknown action schema {name!r}")
        # the final argument of say() is free text and may itself contain commas
        if len(parts) > arity:
            parts = parts[: arity - 1] + [", ".join(parts[arity - 1 :])]
        return cls(name, tuple(parts))

    def rename(self, mapping: Mapping[str, str]) -> "ActionInstance":
        return ActionInstance(self.name, tuple(mapping.get(a, a) for a in self.args))


@dataclass(frozen=True)
class State:
    robot: str
    holding: str | None = None
    objects: frozenset = frozenset()  # (object, location) known to the robot
    expected: frozenset = frozenset()  # (object, location) assumed by the committed hypothesis
    people: frozenset = frozenset()  # (person, location)
    delivered: frozenset = frozenset()  # (object, person)
    said: frozenset = frozenset()  # (person, phrase)
    followed: frozenset = frozenset()

    def object_location(self, obj: str) -> str | None:
        for o, loc in self.objects:
            if o == obj:
                return loc
        return None

    def expected_location(self, obj: str) -> str | None:
        for o, loc in self.expected:
            if o == obj:
                return loc
        return None

    def person_location(self, person: str) -> str | None:
        for p, loc in self.people:
            if p == person:
                return loc
        return None

    def is_delivered(self, obj: str) -> bool:
        return any(o == obj for o, _ in self.delivered)

    def rename(self, mapping: Mapping[str, str]) -> "State":
        def pairs(s):
            return frozenset((mapping.get(a, a), mapping.get(b, b)) for a, b in s)

        return State(
            robot=self.robot,
            holding=mapping.get(self.holding, self.holding) if self.holding else None,
            objects=pairs(self.objects),
            expected=pairs(self.expected),
            people=self.people,
            delivered=pairs(self.delivered),
            said=self.said,
            followed=self.followed,
        )

    def to_dict(self) -> dict:
        return {
            "robot": self.robot,
            "holding": self.holding,
            "objects": sorted(self.objects),
            "expected": sorted(self.expected),
            "people": sorted(self.people),
            "delivered": sorted(self.delivered),
            "said": sorted(self.said),
            "followed": sorted(self.followed),
        }


@dataclass(frozen=True)
class Domain:
    """Static facts the planner needs: the travel table, room membership, follow targets."""

    locations: tuple[str, ...]
    distances: Mapping[tuple[str, str], float]
    rooms: Mapping[str, tuple[str, ...]]
    follow_targets: Mapping[str, str] = field(default_factory=dict)

    def d(self, a: str, b: str) -> float:
        if a == b:
            return 0.0
        return self.distances.get((a, b), math.inf)

    @classmethod
    def from_kb(cls, kb: KnowledgeBase) -> "Domain":
        locations = tuple(kb.locations())
        rooms: dict[str, list[str]] = {r: [] for r in kb.rooms()}
        for loc in locations:
            r = kb.room_of(loc)
            if r is not None:
                rooms.setdefault(r, []).append(loc)
        follow = {t.subject: t.object for t in kb.query(Triple("?", "heading-to", "?"))}
        return cls(locations, kb.distances, {r: tuple(v) for r, v in rooms.items()}, follow)


@dataclass(frozen=True)
class Goal:
    targets: tuple[Triple, ...]
    assumption: str | None = None
    variable: str | None = None

    def __post_init__(self):
        if not self.targets:
            raise ValueError("a goal needs at least one target")

    def bind(self, entity: str) -> tuple[Triple, ...]:
        if self.variable is None:
            return self.targets
        return tuple(
            Triple(*(entity if x == self.variable else x for x in t.as_list())) for t in self.targets
        )

    def to_dict(self) -> dict:
        return {
            "targets": [t.as_list() for t in self.targets],
            "assumption": self.assumption,
            "variable": self.variable,
        }


@dataclass(frozen=True)
class Plan:
    actions: tuple[ActionInstance, ...]
    costs: tuple[float, ...]
    hypothesis: str | None = None

    @property
    def cost(self) -> float:
        return sum(self.costs)

    def __len__(self) -> int:
        return len(self.actions)

    def to_jsonl(self) -> str:
        return "".join(
            json.dumps({"action": str(a), "cost": c}, sort_keys=True) + "\n"
            for a, c in zip(self.actions, self.costs)
        )

    @classmethod
    def from_jsonl(cls, text: str, hypothesis: str | None = None) -> "Plan":
        rows = [json.loads(line) for line in text.splitlines() if line.strip()]
        return cls(
            tuple(ActionInstance.parse(r["action"]) for r in rows),
            tuple(float(r["cost"]) for r in rows),
            hypothesis,
        )


@dataclass(frozen=True)
class DiagnosisTrigger:
    assumption: str


# ---------------------------------------------------------------------------
# action semantics


def action_cost(a: ActionInstance, s: State, domain: Domain) -> float:
    if a.name in ("navigate", "guide"):
        return domain.d(s.robot, a.args[-1])
    if a.name == "follow":
        return domain.d(s.robot, domain.follow_targets[a.args[0]])
    return 1.0


def applicable(a: ActionInstance, s: State, domain: Domain) -> bool:
    name, args = a.name, a.args
    if name == "navigate":
        return args[0] != s.robot and args[0] in domain.locations
    if name == "find":
        obj, loc = args
        return (
            s.robot == loc
            and s.holding != obj
            and s.object_location(obj) is None
            and not s.is_delivered(obj)
        )
    if name == "pick":
        return s.holding is None and (args[0], s.robot) in s.objects
    if name == "place":
        return s.holding == args[0] and s.robot == args[1]
    if name == "handover":
        return s.holding == args[0] and (args[1], s.robot) in s.people
    if name == "follow":
        target = domain.follow_targets.get(args[0])
        return (args[0], s.robot) in s.people and target is not None and target != s.robot
    if name == "guide":
        return (args[0], s.robot) in s.people and args[1] != s.robot and args[1] in domain.locations
    if name == "say":
        return (args[0], s.robot) in s.people
    return False


def _move_person(people: frozenset, person: str, loc: str) -> frozenset:
    return frozenset((p, loc if p == person else l) for p, l in people)


def apply(a: ActionInstance, s: State, domain: Domain) -> State:
    if not applicable(a, s, domain):
        raise NotApplicable(f"{a} is not applicable with robot at {s.robot}")
    name, args = a.name, a.args
    if name == "navigate":
        return replace(s, robot=args[0])
    if name == "find":
        obj, loc = args
        return replace(
            s,
            objects=s.objects | {(obj, loc)},
            expected=frozenset(p for p in s.expected if p[0] != obj),
        )
    if name == "pick":
        return replace(s, holding=args[0], objects=s.objects - {(args[0], s.robot)})
    if name == "place":
        return replace(s, holding=None, objects=s.objects | {(args[0], args[1])})
    if name == "handover":
        return replace(s, holding=None, delivered=s.delivered | {(args[0], args[1])})
    if name == "follow":
        target = domain.follow_targets[args[0]]
        return replace(
            s, robot=target, people=_move_person(s.people, args[0], target), followed=s.followed | {args[0]}
        )
    if name == "guide":
        return replace(s, robot=args[1], people=_move_person(s.people, args[0], args[1]))
    if name == "say":
        return replace(s, said=s.said | {(args[0], args[1])})
    raise NotApplicable(str(a))


def _is_person(s: State, x: str) -> bool:
    return s.person_location(x) is not None


def satisfied(t: Triple, s: State, domain: Domain) -> bool:
    subj, pred, obj = t.subject, t.predicate, t.object
    if subj == ROBOT:
        if pred == "at":
            return s.robot == obj
        if pred == "in-room":
            return s.robot in domain.rooms.get(obj, ())
        if pred == "holds":
            return s.holding == obj
        if pred == "near":
            return s.person_location(obj) == s.robot
        if pred == "followed":
            return obj in s.followed
        if pred == "found":
            return (obj, s.robot) in s.objects
    elif _is_person(s, subj):
        if pred == "at":
            return (subj, obj) in s.people
        if pred == "in-room":
            return s.person_location(subj) in domain.rooms.get(obj, ())
        if pred == "received":
            return (obj, subj) in s.delivered
        if pred == "heard":
            return (subj, obj) in s.said
    elif pred == "at":
        return (subj, obj) in s.objects
    raise PlanError(f"unsupported goal {t}")


def goal_satisfied(targets: Iterable[Triple], s: State, domain: Domain) -> bool:
    return all(satisfied(t, s, domain) for t in targets)


def _where(obj: str, s: State) -> str | None:
    """Where an object is or is believed to be; None when it has left the robot's reach."""
    if s.holding == obj:
        return s.robot
    loc = s.object_location(obj)
    if loc is None:
        loc = s.expected_location(obj)
    return loc


def _bound(t: Triple, s: State, domain: Domain) -> float:
    """Lower bound on travel still needed for ``t`` alone."""
    if satisfied(t, s, domain):
        return 0.0
    d = domain.d
    r = s.robot
    subj, pred, obj = t.subject, t.predicate, t.object

    def reach_then(src: str, targets: Iterable[str]) -> float:
        return min((d(src, x) for x in targets), default=math.inf)

    if subj == ROBOT:
        if pred == "at":
            return d(r, obj)
        if pred == "in-room":
            return reach_then(r, domain.rooms.get(obj, ()))
        if pred in ("holds", "found"):
            if s.holding == obj:
                return 0.0
            loc = _where(obj, s)
            return math.inf if loc is None else d(r, loc)
        p = s.person_location(obj)
        if p is None:
            return math.inf
        if pred == "near":
            return d(r, p)
        if pred == "followed":
            target = domain.follow_targets.get(obj)
            return math.inf if target is None else d(r, p) + d(p, target)
    elif _is_person(s, subj):
        p = s.person_location(subj)
        if pred == "at":
            return d(r, p) + d(p, obj)
        if pred == "in-room":
            return d(r, p) + reach_then(p, domain.rooms.get(obj, ()))
        if pred == "heard":
            return d(r, p)
        if pred == "received":
            if s.holding == obj:
                return d(r, p)
            loc = _where(obj, s)
            if loc is None:
                return math.inf
            return min(d(r, loc), d(r, p)) + d(loc, p)
    elif pred == "at":
        loc = _where(obj=subj, s=s)
        if loc is None:
            return math.inf
        if s.holding == subj:
            return d(r, obj)
        return d(r, loc) + d(loc, obj)
    raise PlanError(f"unsupported goal {t}")


def heuristic(targets: Iterable[Triple], s: State, domain: Domain) -> float:
    return max((_bound(t, s, domain) for t in targets), default=0.0)


def _relevant(targets: tuple[Triple, ...], s: State):
    objects: set[str] = set()
    people: set[str] = set()
    phrases: set[tuple[str, str]] = set()
    recipients: set[str] = set()
    for t in targets:
        if t.subject == ROBOT:
            if t.predicate in ("holds", "found"):
                objects.add(t.object)
            elif t.predicate == "followed":
                people.add(t.object)
        elif _is_person(s, t.subject):
            if t.predicate in ("at", "in-room"):
                people.add(t.subject)
            elif t.predicate == "received":
                objects.add(t.object)
                recipients.add(t.subject)
            elif t.predicate == "heard":
                phrases.add((t.subject, t.object))
        else:
            objects.add(t.subject)
    return objects, people, phrases, recipients


def successors(
    s: State, domain: Domain, relevant
) -> Iterator[tuple[ActionInstance, State, float]]:
    """Applicable actions restricted to goal-relevant entities.

    Moving an object the goal never mentions can only cost more, so those
    groundings are skipped; the held object is always considered.  People are
    led (guide, follow) only when the goal is about where they are or about
    following them: a delivery brings the object to the person, never the
    person to the object.
    """
    objects, people, phrases, recipients = relevant
    here = s.robot
    cands: list[ActionInstance] = [ActionInstance("navigate", (loc,)) for loc in domain.locations if loc != here]
    for obj, loc in s.expected:
        if loc == here:
            cands.append(ActionInstance("find", (obj, loc)))
    if s.holding is None:
        for obj, loc in s.objects:
            if loc == here and obj in objects:
                cands.append(ActionInstance("pick", (obj,)))
    else:
        cands.append(ActionInstance("place", (s.holding, here)))
    for person, loc in s.people:
        if loc != here:
            continue
        if s.holding is not None and person in recipients:
            cands.append(ActionInstance("handover", (s.holding, person)))
        if person in people:
            if person in domain.follow_targets:
                cands.append(ActionInstance("follow", (person,)))
            cands.extend(ActionInstance("guide", (person, l)) for l in domain.locations if l != here)
        for p, phrase in phrases:
            if p == person:
                cands.append(ActionInstance("say", (person, phrase)))
    for a in cands:
        if applicable(a, s, domain):
            yield a, apply(a, s, domain), action_cost(a, s, domain)


def search(s0: State, targets: tuple[Triple, ...], domain: Domain) -> tuple[tuple[ActionInstance, ...], tuple[float, ...]]:
    """A* returning the least-cost, then lexicographically least, action sequence."""
    relevant = _relevant(targets, s0)
    h0 = heuristic(targets, s0, domain)
    if math.isinf(h0):
        raise NoPlan("goal unreachable from the initial state")
    tie = itertools.count()
    frontier = [(_key(h0), (), 0.0, next(tie), s0, ())]
    best: dict[State, tuple[float, tuple[str, ...]]] = {s0: (0.0, ())}
    expanded = 0
    while frontier:
        _, seq, g, _, s, costs = heapq.heappop(frontier)
        if best.get(s) != (_key(g), seq):
            continue
        if goal_satisfied(targets, s, domain):
            return tuple(ActionInstance.parse(x) for x in seq), costs
        expanded += 1
        if expanded > MAX_EXPANSIONS:
            raise NoPlan("search budget exhausted")
        for a, nxt, c in successors(s, domain, relevant):
            g2 = _key(g + c)
            seq2 = seq + (str(a),)
            prev = best.get(nxt)
            if prev is not None and prev <= (g2, seq2):
                continue
            h = heuristic(targets, nxt, domain)
            if math.isinf(h):
                continue
            best[nxt] = (g2, seq2)
            heapq.heappush(frontier, (_key(g2 + h), seq2, g2, next(tie), nxt, costs + (c,)))
    raise NoPlan("goal unreachable")


# ---------------------------------------------------------------------------
# public operations


def state_from_kb(kb: KnowledgeBase) -> State:
    robot = kb.robot_location()
    if robot is None:
        raise PlanError("knowledge base has no robot location")
    objects, people = set(), set()
    for t in kb.query(Triple("?", "at", "?")):
        ent = kb.entities[t.subject]
        if ent.origin == HYPOTHETICAL or t.subject == ROBOT:
            continue
        if kb.ontology.is_a(ent.cls, "person"):
            people.add((t.subject, t.object))
        else:
            objects.add((t.subject, t.object))
    return State(
        robot=robot,
        holding=kb.value(ROBOT, "holds"),
        objects=frozenset(objects),
        people=frozenset(people),
        delivered=frozenset((t.object, t.subject) for t in kb.query(Triple("?", "received", "?"))),
        said=frozenset((t.subject, t.object) for t in kb.query(Triple("?", "heard", "?"))),
        followed=frozenset(t.object for t in kb.query(Triple(ROBOT, "followed", "?"))),
    )


def plan(s: State, goal: Goal, kb: KnowledgeBase, domain: Domain | None = None) -> Plan:
    """Least-cost plan for ``goal``; commits to the cheapest open hypothesis if it needs one."""
    domain = domain or Domain.from_kb(kb)
    if goal.assumption is None:
        actions, costs = search(s, goal.targets, domain)
        return Plan(actions, costs)
    confirmed = kb.confirmed_entity(goal.assumption)
    if confirmed is not None:
        actions, costs = search(s, goal.bind(confirmed), domain)
        return Plan(actions, costs)
    candidates = kb.open_hypotheses(goal.assumption)
    if not candidates:
        raise NoPlan(f"no open hypotheses remain for assumption {goal.assumption}")
    best = None
    for rank, h in enumerate(candidates):
        s_h = replace(s, expected=s.expected | {(h.entity, h.location)})
        try:
            actions, costs = search(s_h, goal.bind(h.entity), domain)
        except NoPlan:
            continue
        key = (_key(sum(costs)), rank)
        if best is None or key < best[0]:
            best = (key, Plan(actions, costs, h.id))
    if best is None:
        raise NoPlan(f"no open hypothesis of {goal.assumption} admits a plan")
    return best[1]


def replan_after_failure(
    s: State, goal: Goal, kb: KnowledgeBase, failed: str, committed: str | None
) -> Plan | DiagnosisTrigger:
    """Refute the committed hypothesis that just failed, then plan again or ask for diagnosis."""
    if failed != committed:
        raise PlanError(f"{failed} is not the committed hypothesis ({committed})")
    kb.refute_hypothesis(failed)
    if goal.assumption is None:
        raise PlanError("goal has no assumption to replan over")
    if kb.assumption(goal.assumption).status == REFUTED:
        return DiagnosisTrigger(goal.assumption)
    try:
        return plan(s, goal, kb)
    except NoPlan:
        return DiagnosisTrigger(goal.assumption)


def storing_placement(cls: str, kb: KnowledgeBase) -> str:
    """Storage location whose contents share ``cls``'s similarity group.

    Most same-group items wins, then lexicographic id; with no match the
    lexicographically first storage location is used.
    """
    onto = kb.ontology
    shelves = sorted(
        loc for loc in kb.locations() if onto.is_a_any(kb.entities[loc].cls, onto.storage_classes)
    )
    if not shelves:
        raise NoCupboard("no storage location in the knowledge base")
    group = onto.group_of(cls)
    if group is None:
        return shelves[0]
    scores = []
    for shelf in shelves:
        contents = [t.subject for t in kb.query(Triple("?", "at", shelf))]
        n = sum(1 for c in contents if onto.is_a(kb.entities[c].cls, group))
        scores.append((-n, shelf))
    n, shelf = min(scores)
    return shelf if n < 0 else shelves[0]


__all__ = [
    "ActionInstance",
    "DiagnosisTrigger",
    "Domain",
    "Goal",
    "KBError",
    "NoCupboard",
    "NoPlan",
    "NotApplicable",
    "Plan",
    "PlanError",
    "State",
    "applicable",
    "apply",
    "goal_satisfied",
    "plan",
    "replan_after_failure",
    "search",
    "state_from_kb",
    "storing_placement",
]
