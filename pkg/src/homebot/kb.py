"""Typed triple store with open-world hypothesis management.

Facts are ``(subject, predicate, object)`` triples whose predicates come from a
closed relation set declared in the ontology.  Operator commands that mention
objects the robot has never seen produce an *assumption* ("an apple is in the
kitchen") refined into one *hypothesis* per placement location.  Sensing
confirms or refutes hypotheses; an assumption whose hypotheses are all refuted
is itself refuted, which is what :meth:`KnowledgeBase.diagnose` reports.
"""

from __future__ import annotations

import copy
import json
import math
import threading
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

OBSERVED = "observed"
ASSERTED = "asserted"
HYPOTHETICAL = "hypothetical"
ORIGINS = (OBSERVED, ASSERTED, HYPOTHETICAL)

OPEN = "open"
REFUTED = "refuted"
CONFIRMED = "confirmed"

LITERAL = "literal"
IS_A = "is-a"


class KBError(Exception):
    pass


class OntologyError(KBError):
    pass


class UnknownEntity(KBError):
    pass


class RelationTypeError(KBError):
    pass


class NoPlacementLocations(KBError):
    pass


class HypothesisNotOpen(KBError):
    pass


class UnknownAssumption(KBError):
    pass


def is_wildcard(symbol: str | None) -> bool:
    return symbol is None or symbol.startswith("?")


@dataclass(frozen=True, order=True)
class Triple:
    subject: str
    predicate: str
    object: str

    def matches(self, pattern: "Triple") -> bool:
        return all(
            is_wildcard(p) or p == v
            for p, v in zip(
                (pattern.subject, pattern.predicate, pattern.object),
                (self.subject, self.predicate, self.object),
            )
        )

    def as_list(self) -> list[str]:
        return [self.subject, self.predicate, self.object]

    def __str__(self) -> str:
        return f"({self.subject}, {self.predicate}, {self.object})"


@dataclass(frozen=True)
class Entity:
    id: str
    cls: str
    origin: str = ASSERTED


@dataclass(frozen=True)
class ObjectDescriptor:
    """What a command says about an object: its class and how it was referred to."""

    cls: str
    determiner: str = "indefinite"
    known_instance: str | None = None

    def __post_init__(self):
        if self.determiner not in ("definite", "indefinite"):
            raise ValueError(f"bad determiner {self.determiner!r}")
        if self.determiner == "indefinite" and self.known_instance is not None:
            raise ValueError("an indefinite descriptor cannot name a known instance")


@dataclass(frozen=True)
class Relation:
    name: str
    domain: tuple[str, ...]
    range: tuple[str, ...]
    functional: bool = False


@dataclass
class Ontology:
    parents: dict[str, tuple[str, ...]]
    relations: dict[str, Relation]
    placement_classes: tuple[str, ...] = ("placement",)
    storage_classes: tuple[str, ...] = ()
    similarity_groups: tuple[str, ...] = ()
    _ancestors: dict[str, frozenset[str]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for cls, parents in self.parents.items():
            for p in parents:
                if p not in self.parents:
                    raise OntologyError(f"class {cls!r} has undeclared parent {p!r}")
        for cls in self.parents:
            self._ancestors[cls] = self._closure(cls, ())
        for rel in self.relations.values():
            for c in rel.domain + rel.range:
                if c != LITERAL and c not in self.parents:
                    raise OntologyError(f"relation {rel.name!r} uses undeclared class {c!r}")

    def _closure(self, cls: str, trail: tuple[str, ...]) -> frozenset[str]:
        if cls in trail:
            raise OntologyError(f"class hierarchy cycle through {cls!r}")
        if cls in self._ancestors:
            return self._ancestors[cls]
        out = {cls}
        for p in self.parents[cls]:
            out |= self._closure(p, trail + (cls,))
        return frozenset(out)

    @classmethod
    def from_dict(cls, data: Mapping) -> "Ontology":
        relations = {
            name: Relation(
                name,
                tuple(spec["domain"]),
                tuple(spec["range"]),
                bool(spec.get("functional", False)),
            )
            for name, spec in data["relations"].items()
        }
        if IS_A in relations:
            raise OntologyError("is-a is built in and cannot be redeclared")
        return cls(
            parents={k: tuple(v) for k, v in data["classes"].items()},
            relations=relations,
            placement_classes=tuple(data.get("placement_classes", ("placement",))),
            storage_classes=tuple(data.get("storage_classes", ())),
            similarity_groups=tuple(data.get("similarity_groups", ())),
        )

    @classmethod
    def load(cls, path: str | Path | None = None) -> "Ontology":
        if path is None:
            text = resources.files("homebot").joinpath("data/ontology.json").read_text()
        else:
            text = Path(path).read_text()
        return cls.from_dict(json.loads(text))

    def declared(self, cls: str) -> bool:
        return cls in self.parents

    def is_a(self, cls: str, ancestor: str) -> bool:
        return ancestor in self._ancestors.get(cls, ())

    def is_a_any(self, cls: str, ancestors: Iterable[str]) -> bool:
        return any(self.is_a(cls, a) for a in ancestors)

    def group_of(self, cls: str) -> str | None:
        for group in self.similarity_groups:
            if self.is_a(cls, group):
                return group
        return None


_default_ontology: Ontology | None = None


def default_ontology() -> Ontology:
    global _default_ontology
    if _default_ontology is None:
        _default_ontology = Ontology.load()
    return _default_ontology


@dataclass
class Hypothesis:
    id: str
    claim: Triple
    parent: str
    status: str = OPEN

    @property
    def entity(self) -> str:
        return self.claim.subject

    @property
    def location(self) -> str:
        return self.claim.object


@dataclass
class Assumption:
    """An operator-level belief such as "an apple is in the kitchen"."""

    id: str
    cls: str
    scope: str | None
    children: list[str] = field(default_factory=list)
    status: str = OPEN

    @property
    def text(self) -> str:
        where = self.scope if self.scope is not None else "any room"
        return f"{self.cls} in {where}"


@dataclass
class DiagnosisReport:
    assumption_id: str
    assumption: str
    children: list[tuple[Triple, str]]
    conclusion: str

    @property
    def invalid(self) -> bool:
        return self.conclusion == "invalid"

    def to_dict(self) -> dict:
        return {
            "assumption": self.assumption,
            "children": [{"claim": c.as_list(), "status": s} for c, s in self.children],
            "conclusion": self.conclusion,
        }

    def summary(self) -> str:
        if self.invalid:
            cls, _, where = self.assumption.partition(" in ")
            return f"assumption invalid: no {cls} in {where}"
        return f"assumption {self.assumption}: {self.conclusion}"


class KnowledgeBase:
    """Semantic network of entities and typed relations.

    Mutating methods take an internal lock (single writer).  Readers that need
    a stable view while another thread writes should work on :meth:`snapshot`.
    """

    def __init__(self, ontology: Ontology | None = None, distances: Mapping | None = None):
        self.ontology = ontology or default_ontology()
        self.entities: dict[str, Entity] = {}
        self.hypotheses: dict[str, Hypothesis] = {}
        self.assumptions: dict[str, Assumption] = {}
        self.aliases: dict[str, str] = {}
        self.distances: dict[tuple[str, str], float] = dict(distances or {})
        self._triples: set[Triple] = set()
        self._counters: dict[str, int] = {}
        self._lock = threading.RLock()

    # -- entities -----------------------------------------------------------

    def add_entity(self, id: str, cls: str, origin: str = ASSERTED) -> Entity:
        if origin not in ORIGINS:
            raise ValueError(f"unknown origin {origin!r}")
        if not self.ontology.declared(cls):
            raise OntologyError(f"class {cls!r} is not declared in the ontology")
        with self._lock:
            existing = self.entities.get(id)
            if existing is not None:
                if existing.cls != cls or existing.origin != origin:
                    raise KBError(f"entity {id!r} already exists as {existing}")
                return existing
            ent = Entity(id, cls, origin)
            self.entities[id] = ent
            return ent

    def entity(self, id: str) -> Entity:
        try:
            return self.entities[id]
        except KeyError:
            raise UnknownEntity(id) from None

    def resolve(self, id: str) -> str:
        while id in self.aliases:
            id = self.aliases[id]
        return id

    def instances(self, cls: str, include_hypothetical: bool = False) -> list[str]:
        return sorted(
            e.id
            for e in self.entities.values()
            if self.ontology.is_a(e.cls, cls)
            and (include_hypothetical or e.origin != HYPOTHETICAL)
        )

    # -- facts --------------------------------------------------------------

    @property
    def triples(self) -> list[Triple]:
        return sorted(self._triples)

    def __len__(self) -> int:
        return len(self._triples)

    def __contains__(self, t: Triple) -> bool:
        return t in self._triples

    def _typecheck(self, t: Triple) -> Relation:
        rel = self.ontology.relations.get(t.predicate)
        if rel is None:
            raise RelationTypeError(f"undeclared relation {t.predicate!r}")
        subj = self.entity(t.subject)
        if not self.ontology.is_a_any(subj.cls, rel.domain):
            raise RelationTypeError(f"{t}: subject class {subj.cls!r} not in domain {rel.domain}")
        if rel.range == (LITERAL,):
            return rel
        obj = self.entity(t.object)
        if not self.ontology.is_a_any(obj.cls, rel.range):
            raise RelationTypeError(f"{t}: object class {obj.cls!r} not in range {rel.range}")
        return rel

    def assert_fact(self, t: Triple) -> "KnowledgeBase":
        """Insert ``t``; functional relations replace the subject's previous value.

        Asserting that a non-hypothetical entity is at a location confirms a
        matching open hypothesis and aliases its hypothetical entity to it.
        """
        with self._lock:
            rel = self._typecheck(t)
            if rel.functional:
                for old in [x for x in self._triples if x.subject == t.subject and x.predicate == t.predicate]:
                    self._triples.discard(old)
            self._triples.add(t)
            if t.predicate == "at":
                self._confirm_matching(t)
        return self

    def retract_fact(self, t: Triple) -> "KnowledgeBase":
        with self._lock:
            self._triples.discard(t)
        return self

    def value(self, subject: str, predicate: str) -> str | None:
        for t in self._triples:
            if t.subject == subject and t.predicate == predicate:
                return t.object
        return None

    def query(self, pattern: Triple, include_hypothetical: bool = False) -> list[Triple]:
        """All facts matching ``pattern`` (``"?"``-prefixed symbols or ``None`` are wildcards).

        ``is-a`` patterns are answered from the class hierarchy.  With
        ``include_hypothetical`` the claims of open hypotheses are returned too.
        """
        if not is_wildcard(pattern.subject) and pattern.subject not in self.entities:
            raise UnknownEntity(pattern.subject)
        if not is_wildcard(pattern.object):
            rel = self.ontology.relations.get(pattern.predicate or "")
            if pattern.predicate == IS_A:
                if not self.ontology.declared(pattern.object):
                    raise OntologyError(f"class {pattern.object!r} is not declared")
            elif rel is not None and rel.range != (LITERAL,) and pattern.object not in self.entities:
                raise UnknownEntity(pattern.object)

        def visible(t: Triple) -> bool:
            if include_hypothetical:
                return True
            for sym in (t.subject, t.object):
                ent = self.entities.get(sym)
                if ent is not None and ent.origin == HYPOTHETICAL:
                    return False
            return True

        out: set[Triple] = set()
        if is_wildcard(pattern.predicate) or pattern.predicate == IS_A:
            for e in self.entities.values():
                if not is_wildcard(pattern.subject) and e.id != pattern.subject:
                    continue
                target = pattern.object if not is_wildcard(pattern.object) else e.cls
                if self.ontology.is_a(e.cls, target):
                    t = Triple(e.id, IS_A, target)
                    if visible(t):
                        out.add(t)
        if pattern.predicate != IS_A:
            candidates = set(self._triples)
            if include_hypothetical:
                candidates |= {h.claim for h in self.hypotheses.values() if h.status == OPEN}
            out |= {t for t in candidates if t.matches(pattern) and visible(t)}
        return sorted(out)

    # -- geometry helpers used for search ordering --------------------------

    def distance(self, a: str, b: str) -> float:
        if a == b:
            return 0.0
        return self.distances.get((a, b), math.inf)

    def robot_location(self) -> str | None:
        return self.value("robot", "at")

    def rooms(self) -> list[str]:
        return self.instances("room")

    def room_of(self, location: str) -> str | None:
        return self.value(location, "in-room")

    def locations(self) -> list[str]:
        return self.instances("location")

    def placement_locations(self, room: str | None = None) -> list[str]:
        """Placement-capable locations in ``room`` (every room if None), cheapest first."""
        locs = [
            loc
            for loc in self.instances("location")
            if self.ontology.is_a_any(self.entities[loc].cls, self.ontology.placement_classes)
            and (room is None and self.room_of(loc) is not None or room is not None and self.room_of(loc) == room)
        ]
        here = self.robot_location()
        if here is None:
            return sorted(locs)
        return sorted(locs, key=lambda loc: (self.distance(here, loc), loc))

    # -- hypotheses ---------------------------------------------------------

    def _next_id(self, prefix: str) -> int:
        n = self._counters.get(prefix, 0) + 1
        self._counters[prefix] = n
        return n

    def inject_hypotheses(self, descriptor: ObjectDescriptor, scope: str | None) -> list[Hypothesis]:
        """Assume an instance of ``descriptor.cls`` somewhere in ``scope``.

        ``scope=None`` spreads the assumption over every room.  Re-injecting a
        descriptor whose assumption is still open or already refuted returns
        that assumption's open hypotheses instead of creating new ones.
        """
        if not self.ontology.declared(descriptor.cls):
            raise OntologyError(f"class {descriptor.cls!r} is not declared in the ontology")
        with self._lock:
            if scope is not None:
                ent = self.entity(scope)
                if not self.ontology.is_a(ent.cls, "room"):
                    raise KBError(f"{scope!r} is not a room")
            for a in self.assumptions.values():
                if a.cls == descriptor.cls and a.scope == scope and a.status != CONFIRMED:
                    return self.open_hypotheses(a.id)
            locs = self.placement_locations(scope)
            if not locs:
                raise NoPlacementLocations(f"no placement locations in {scope!r}")
            assumption = Assumption(f"a{self._next_id('a')}", descriptor.cls, scope)
            self.assumptions[assumption.id] = assumption
            made = []
            for loc in locs:
                ent = self.add_entity(f"{descriptor.cls}-h{self._next_id(descriptor.cls + '-h')}", descriptor.cls, HYPOTHETICAL)
                h = Hypothesis(f"h{self._next_id('h')}", Triple(ent.id, "at", loc), assumption.id)
                self.hypotheses[h.id] = h
                assumption.children.append(h.id)
                made.append(h)
            return made

    def assumption(self, id: str) -> Assumption:
        try:
            return self.assumptions[id]
        except KeyError:
            raise UnknownAssumption(id) from None

    def children(self, assumption_id: str) -> list[Hypothesis]:
        return [self.hypotheses[h] for h in self.assumption(assumption_id).children]

    def open_hypotheses(self, assumption_id: str) -> list[Hypothesis]:
        """Open children of an assumption in search order (travel cost, then location id)."""
        kids = [h for h in self.children(assumption_id) if h.status == OPEN]
        here = self.robot_location()
        if here is None:
            return kids
        return sorted(kids, key=lambda h: (self.distance(here, h.location), h.location, h.id))

    def confirmed_entity(self, assumption_id: str) -> str | None:
        for h in self.children(assumption_id):
            if h.status == CONFIRMED:
                return self.resolve(h.entity)
        return None

    def _confirm_matching(self, t: Triple) -> None:
        subj = self.entities[t.subject]
        done: set[str] = set()
        for h in sorted(self.hypotheses.values(), key=lambda h: int(h.id[1:])):
            if h.status != OPEN or h.parent in done or h.location != t.object:
                continue
            if subj.origin == HYPOTHETICAL:
                if h.claim != t:
                    continue
            else:
                if not self.ontology.is_a(subj.cls, self.entities[h.entity].cls):
                    continue
                self.aliases[h.entity] = subj.id
            h.status = CONFIRMED
            self.assumptions[h.parent].status = CONFIRMED
            done.add(h.parent)

    def refute_hypothesis(self, hypothesis_id: str) -> "KnowledgeBase":
        with self._lock:
            h = self.hypotheses.get(hypothesis_id)
            if h is None:
                raise KBError(f"unknown hypothesis {hypothesis_id!r}")
            if h.status != OPEN:
                raise HypothesisNotOpen(f"{hypothesis_id} is {h.status}")
            h.status = REFUTED
            parent = self.assumptions[h.parent]
            if all(self.hypotheses[c].status == REFUTED for c in parent.children):
                parent.status = REFUTED
        return self

    def diagnose(self, assumption_id: str) -> DiagnosisReport:
        a = self.assumption(assumption_id)
        kids = self.children(assumption_id)
        confirmed = [h for h in kids if h.status == CONFIRMED]
        open_ = [h for h in kids if h.status == OPEN]
        if confirmed:
            conclusion = f"confirmed at {confirmed[0].location}"
        elif not open_:
            conclusion = "invalid"
        else:
            n = len(open_)
            conclusion = f"undetermined, {n} location{'s' if n != 1 else ''} unsearched"
        return DiagnosisReport(a.id, a.text, [(h.claim, h.status) for h in kids], conclusion)

    # -- snapshots ----------------------------------------------------------

    def snapshot(self) -> "KnowledgeBase":
        with self._lock:
            kb = KnowledgeBase.__new__(KnowledgeBase)
            kb.ontology = self.ontology
            kb.entities = dict(self.entities)
            kb.hypotheses = copy.deepcopy(self.hypotheses)
            kb.assumptions = copy.deepcopy(self.assumptions)
            kb.aliases = dict(self.aliases)
            kb.distances = self.distances
            kb._triples = set(self._triples)
            kb._counters = dict(self._counters)
            kb._lock = threading.RLock()
            return kb

    def dump(self) -> list[str]:
        lines = [str(t) for t in self.triples]
        for h in sorted(self.hypotheses.values(), key=lambda h: int(h.id[1:])):
            lines.append(f"{h.id} {h.claim} [{h.status}] <- {h.parent}")
        return lines
