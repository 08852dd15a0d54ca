"""Deterministic simulated apartment: ground truth plus skill implementations.

The world file lists rooms, locations, a travel-cost table, objects with their
true locations, and people with scripted waypoints.  Objects marked
``known: false`` are hidden: they exist in the ground truth but only reach the
knowledge base through a successful ``find``.
"""

from __future__ import annotations

import json
import logging
import math
import os
import random
import threading
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Mapping

from .kb import ASSERTED, OBSERVED, HYPOTHETICAL, KnowledgeBase, Ontology, Triple, default_ontology
from .planner import ROBOT, ActionInstance

log = logging.getLogger(__name__)

FIXTURES_ENV = "HOMEBOT_FIXTURES"


class WorldError(Exception):
    pass


class SchemaError(WorldError):
    pass


class MetricViolation(WorldError):
    pass


class NotAtLocation(WorldError):
    pass


def data_path(*parts: str) -> Path:
    """Path to a bundled fixture, honouring the HOMEBOT_FIXTURES override."""
    root = os.environ.get(FIXTURES_ENV)
    if root:
        candidate = Path(root).joinpath(*parts)
        if candidate.exists():
            return candidate
    return Path(str(resources.files("homebot").joinpath("data", *parts)))


@dataclass
class SkillModel:
    p_success: float = 1.0
    failure: str = "failed"

    def __post_init__(self):
        if not 0.0 <= self.p_success <= 1.0:
            raise SchemaError(f"success probability {self.p_success} outside [0, 1]")


@dataclass
class WorldSpec:
    name: str
    rooms: list[str]
    locations: dict[str, dict]  # id -> {"class", "room"}
    distances: dict[tuple[str, str], float]
    objects: list[dict]
    people: list[dict]
    robot_start: str
    seed: int = 0
    skill_models: dict[str, SkillModel] = field(default_factory=dict)

    def placement_locations(self, ontology: Ontology | None = None) -> list[str]:
        onto = ontology or default_ontology()
        return sorted(
            loc
            for loc, info in self.locations.items()
            if info.get("room") and onto.is_a_any(info["class"], onto.placement_classes)
        )


def _check_metric(locs: list[str], dist: dict[tuple[str, str], float]) -> None:
    for a in locs:
        for b in locs:
            if a == b:
                continue
            if (a, b) not in dist:
                raise SchemaError(f"distance table misses ({a}, {b})")
            if dist[(a, b)] < 0:
                raise MetricViolation(f"negative distance d({a},{b})")
            if abs(dist[(a, b)] - dist[(b, a)]) > 1e-9:
                raise MetricViolation(f"asymmetric distance d({a},{b}) != d({b},{a})")
    for a in locs:
        for b in locs:
            for c in locs:
                if len({a, b, c}) < 3:
                    continue
                if dist[(a, c)] > dist[(a, b)] + dist[(b, c)] + 1e-9:
                    raise MetricViolation(
                        f"d({a},{c})={dist[(a, c)]} > d({a},{b})+d({b},{c})={dist[(a, b)] + dist[(b, c)]}"
                    )


def parse_world(data: Mapping, ontology: Ontology | None = None) -> WorldSpec:
    onto = ontology or default_ontology()
    try:
        rooms = list(data["rooms"])
        raw_locs = data["locations"]
        raw_dist = data["distances"]
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"world file missing field {exc}") from None
    if not rooms:
        raise SchemaError("world has no rooms")
    if len(set(rooms)) != len(rooms):
        raise SchemaError("duplicate room ids")
    locations: dict[str, dict] = {}
    for entry in raw_locs:
        lid = entry["id"]
        if lid in locations or lid in rooms:
            raise SchemaError(f"duplicate id {lid!r}")
        if not onto.is_a(entry["class"], "location"):
            raise SchemaError(f"{lid!r} has non-location class {entry['class']!r}")
        room = entry.get("room")
        if room is not None and room not in rooms:
            raise SchemaError(f"{lid!r} refers to unknown room {room!r}")
        locations[lid] = {"class": entry["class"], "room": room}
    dist: dict[tuple[str, str], float] = {}
    for a, b, d in raw_dist:
        if a not in locations or b not in locations:
            raise SchemaError(f"distance entry for unknown location ({a}, {b})")
        d = float(d)
        if (b, a) in dist and abs(dist[(b, a)] - d) > 1e-9:
            raise MetricViolation(f"asymmetric distance d({a},{b})")
        dist[(a, b)] = d
        dist.setdefault((b, a), d)
    _check_metric(sorted(locations), dist)

    objects = []
    for obj in data.get("objects", []):
        if obj["true_location"] not in locations:
            raise SchemaError(f"object {obj['id']!r} placed at unknown location {obj['true_location']!r}")
        if not onto.is_a(obj["class"], "physical-object"):
            raise SchemaError(f"object {obj['id']!r} has non-object class {obj['class']!r}")
        objects.append({"id": obj["id"], "class": obj["class"], "true_location": obj["true_location"], "known": bool(obj.get("known", False))})
    people = []
    for p in data.get("people", []):
        wps = list(p.get("waypoints") or [p.get("location")])
        if not wps or any(w not in locations for w in wps):
            raise SchemaError(f"person {p['name']!r} has unknown waypoints {wps}")
        people.append({"name": p["name"], "waypoints": wps, "compliant": bool(p.get("compliant", True))})
    robot = data.get("robot", {}).get("location")
    if robot not in locations:
        raise SchemaError(f"robot start {robot!r} is not a location")
    ids = [o["id"] for o in objects] + [p["name"] for p in people] + list(locations) + rooms
    if len(set(ids)) != len(ids) or ROBOT in ids:
        raise SchemaError("entity ids must be unique and must not be 'robot'")
    models = {name: SkillModel(**m) for name, m in data.get("skill_model", {}).items()}
    return WorldSpec(
        name=data.get("name", "world"),
        rooms=rooms,
        locations=locations,
        distances=dist,
        objects=objects,
        people=people,
        robot_start=robot,
        seed=int(data.get("seed", 0)),
        skill_models=models,
    )


def seed_kb(spec: WorldSpec, ontology: Ontology | None = None) -> KnowledgeBase:
    kb = KnowledgeBase(ontology, spec.distances)
    for room in spec.rooms:
        kb.add_entity(room, "room")
    for lid, info in sorted(spec.locations.items()):
        kb.add_entity(lid, info["class"])
        if info["room"]:
            kb.assert_fact(Triple(lid, "in-room", info["room"]))
    kb.add_entity(ROBOT, "robot")
    kb.assert_fact(Triple(ROBOT, "at", spec.robot_start))
    for p in spec.people:
        kb.add_entity(p["name"], "person")
        kb.assert_fact(Triple(p["name"], "at", p["waypoints"][0]))
        if len(p["waypoints"]) > 1:
            kb.assert_fact(Triple(p["name"], "heading-to", p["waypoints"][-1]))
    for obj in spec.objects:
        if obj["known"]:
            kb.add_entity(obj["id"], obj["class"], ASSERTED)
            kb.assert_fact(Triple(obj["id"], "at", obj["true_location"]))
    return kb


def load_world(source: str | Path | Mapping, ontology: Ontology | None = None) -> tuple[WorldSpec, KnowledgeBase]:
    """Parse a world file (path or already-decoded dict) and seed a knowledge base from it."""
    if isinstance(source, Mapping):
        data = source
    else:
        path = Path(source)
        if not path.exists() and not path.is_absolute():
            path = data_path("worlds", str(source))
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: {exc}") from None
    spec = parse_world(data, ontology)
    return spec, seed_kb(spec, ontology)


@dataclass(frozen=True)
class SkillOutcome:
    status: str  # succeeded | failed | preempted
    error: str | None = None
    revealed: str | None = None

    @property
    def ok(self) -> bool:
        return self.status == "succeeded"

    def __str__(self) -> str:
        if self.status == "failed":
            return f"failed({self.error})"
        return self.status


SUCCEEDED = SkillOutcome("succeeded")
PREEMPTED = SkillOutcome("preempted")


def failed(error: str) -> SkillOutcome:
    return SkillOutcome("failed", error)


class SimWorld:
    """Ground truth and skills.  Skill ticks are applied in submission order.

    ``tick`` is simulated seconds per tick and ``speed`` metres per second;
    ``realtime`` sleeps that many wall seconds per tick (0 runs as fast as
    possible).  ``on_tick`` is called after every tick with the tick count.
    """

    def __init__(
        self,
        spec: WorldSpec,
        kb: KnowledgeBase,
        *,
        tick: float = 0.01,
        speed: float = 1.0,
        realtime: float = 0.0,
        on_tick: Callable[[int], None] | None = None,
    ):
        self.spec = spec
        self.kb = kb
        self.tick = tick
        self.speed = speed
        self.realtime = realtime
        self.on_tick = on_tick
        self.clock = 0
        self.rng = random.Random(spec.seed)
        self.robot = spec.robot_start
        self.holding: str | None = None
        self.in_transit: tuple[str, str, float] | None = None
        self.object_class = {o["id"]: o["class"] for o in spec.objects}
        # where each object truly is: a location id, "robot", or "person:<name>"
        self.truth: dict[str, str] = {o["id"]: o["true_location"] for o in spec.objects}
        self.people = {p["name"]: p["waypoints"][0] for p in spec.people}
        self.waypoints = {p["name"]: p["waypoints"] for p in spec.people}
        self.compliant = {p["name"]: p["compliant"] for p in spec.people}
        self.said: list[tuple[str, str]] = []
        self._lock = threading.Lock()

    # -- plumbing -------------------------------------------------------------

    SKILLS = ("navigate", "find", "pick", "place", "handover", "follow", "guide", "say")

    def supports(self, name: str) -> bool:
        return name in self.SKILLS

    def _tick(self, cancel: threading.Event | None) -> bool:
        """Advance one tick; False means the skill was cancelled before it."""
        if cancel is not None and cancel.is_set():
            return False
        self.clock += 1
        if self.realtime:
            time.sleep(self.realtime)
        if self.on_tick is not None:
            self.on_tick(self.clock)
        return True

    def _ticks_for(self, distance: float) -> int:
        return max(1, math.ceil(round(distance / (self.speed * self.tick), 9)))

    def _travel(self, dest: str, cancel: threading.Event | None) -> bool:
        d = self.spec.distances.get((self.robot, dest), 0.0)
        n = self._ticks_for(d)
        for i in range(n):
            if not self._tick(cancel):
                return False
            self.in_transit = (self.robot, dest, (i + 1) / n)
        self.in_transit = None
        return True

    def _roll(self, skill: str) -> SkillOutcome | None:
        model = self.spec.skill_models.get(skill)
        if model is None or model.p_success >= 1.0:
            return None
        if self.rng.random() < model.p_success:
            return None
        return failed(model.failure)

    def dispatch(self, action: ActionInstance, cancel: threading.Event | None = None) -> SkillOutcome:
        if not self.supports(action.name):
            raise WorldError(f"no skill for {action.name}")
        with self._lock:
            if cancel is not None and cancel.is_set():
                return PREEMPTED
            return getattr(self, f"skill_{action.name}")(*action.args, cancel=cancel)

    # -- skills -------------------------------------------------------------

    def skill_navigate(self, loc: str, cancel=None) -> SkillOutcome:
        if loc not in self.spec.locations:
            return failed("unknown-location")
        if loc == self.robot:
            return failed("already-there")
        bad = self._roll("navigate")
        if bad:
            self._tick(cancel)
            return bad
        if not self._travel(loc, cancel):
            return PREEMPTED
        self.robot = loc
        if self.holding:
            self.truth[self.holding] = "robot"
        return SUCCEEDED

    def _matches(self, wanted: str, loc: str) -> list[str]:
        """Objects truly at ``loc`` that satisfy the searched-for entity."""
        ent = self.kb.entities.get(wanted)
        if ent is not None and ent.origin != HYPOTHETICAL:
            return [wanted] if self.truth.get(wanted) == loc else []
        cls = ent.cls if ent is not None else wanted
        onto = self.kb.ontology
        return sorted(o for o, where in self.truth.items() if where == loc and onto.is_a(self.object_class[o], cls))

    def skill_find(self, obj: str, loc: str, cancel=None) -> SkillOutcome:
        if self.robot != loc:
            raise NotAtLocation(f"robot is at {self.robot}, not {loc}")
        if not self._tick(cancel):
            return PREEMPTED
        bad = self._roll("find")
        if bad:
            return bad
        hits = self._matches(obj, loc)
        if not hits:
            return failed("not-found")
        found = hits[0]
        if found not in self.kb.entities:
            self.kb.add_entity(found, self.object_class[found], OBSERVED)
        self.kb.assert_fact(Triple(found, "at", loc))
        return SkillOutcome("succeeded", revealed=found)

    def skill_pick(self, obj: str, cancel=None) -> SkillOutcome:
        if self.holding is not None:
            return failed("hand-occupied")
        if self.truth.get(obj) != self.robot:
            return failed("not-reachable")
        if not self._tick(cancel):
            return PREEMPTED
        bad = self._roll("pick")
        if bad:
            return bad
        self.holding = obj
        self.truth[obj] = "robot"
        return SUCCEEDED

    def skill_place(self, obj: str, loc: str, cancel=None) -> SkillOutcome:
        if self.holding != obj:
            return failed("not-holding")
        if self.robot != loc:
            return failed("not-at-location")
        if not self._tick(cancel):
            return PREEMPTED
        bad = self._roll("place")
        if bad:
            return bad
        self.holding = None
        self.truth[obj] = loc
        return SUCCEEDED

    def skill_handover(self, obj: str, person: str, cancel=None) -> SkillOutcome:
        if self.holding != obj:
            return failed("not-holding")
        if self.people.get(person) != self.robot:
            return failed("person-not-here")
        if not self._tick(cancel):
            return PREEMPTED
        bad = self._roll("handover")
        if bad:
            return bad
        self.holding = None
        self.truth[obj] = f"person:{person}"
        return SUCCEEDED

    def skill_follow(self, person: str, cancel=None) -> SkillOutcome:
        if self.people.get(person) != self.robot:
            return failed("person-not-here")
        route = self.waypoints[person]
        start = route.index(self.people[person]) if self.people[person] in route else 0
        if start >= len(route) - 1:
            return failed("nowhere-to-go")
        bad = self._roll("follow")
        if bad:
            self._tick(cancel)
            return bad
        for wp in route[start + 1 :]:
            if not self._travel(wp, cancel):
                return PREEMPTED
            self.robot = wp
            self.people[person] = wp
        return SUCCEEDED

    def _nearest_in_room(self, room: str) -> str | None:
        cands = [l for l, info in self.spec.locations.items() if info["room"] == room]
        if self.robot in cands:
            return self.robot
        return min(cands, key=lambda l: (self.spec.distances.get((self.robot, l), math.inf), l), default=None)

    def skill_guide(self, person: str, loc: str, cancel=None) -> SkillOutcome:
        """Lead ``person`` to a location, or to the nearest location of a room."""
        if self.people.get(person) != self.robot:
            return failed("person-not-here")
        if loc in self.spec.rooms:
            loc = self._nearest_in_room(loc)
            if loc is None:
                return failed("bad-destination")
            if loc == self.robot:
                return SUCCEEDED if self._tick(cancel) else PREEMPTED
        if loc not in self.spec.locations or loc == self.robot:
            return failed("bad-destination")
        if not self.compliant[person]:
            self._tick(cancel)
            return failed("person-not-following")
        bad = self._roll("guide")
        if bad:
            self._tick(cancel)
            return bad
        if not self._travel(loc, cancel):
            return PREEMPTED
        self.robot = loc
        self.people[person] = loc
        return SUCCEEDED

    def skill_say(self, person: str, phrase: str, cancel=None) -> SkillOutcome:
        if self.people.get(person) != self.robot:
            return failed("person-not-here")
        if not self._tick(cancel):
            return PREEMPTED
        self.said.append((person, phrase))
        return SUCCEEDED

    # -- invariants ---------------------------------------------------------

    def check_conservation(self) -> None:
        for obj, where in self.truth.items():
            if where == "robot":
                assert self.holding == obj, f"{obj} marked in hand but robot holds {self.holding}"
            elif where.startswith("person:"):
                assert where[7:] in self.people, f"{obj} held by unknown person"
            else:
                assert where in self.spec.locations, f"{obj} at unknown place {where}"
        if self.holding is not None:
            assert self.truth[self.holding] == "robot"
