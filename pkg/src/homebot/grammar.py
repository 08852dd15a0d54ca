"""GPSR-style command grammar: generation, parsing, and grounding into planner goals.

The grammar is data.  Each rule is a template such as
``"bring me {object} from the {source}"`` whose ``{slots}`` name CommandFrame
fields and draw their fillers from the matching vocabulary category.
Rules are flat (no recursion), so every derivation can be enumerated to check
that the grammar is unambiguous.
"""

from __future__ import annotations

import json
import random
import re
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterator, Mapping

from .kb import CONFIRMED, KnowledgeBase, ObjectDescriptor, Triple
from .planner import ROBOT, Goal, storing_placement

TASKS = ("bring", "go", "find_object", "find_person", "guide", "follow", "say", "store")
SLOT_CATEGORY = {
    "object": "objects",
    "source": "rooms",
    "destination": "rooms",
    "person": "names",
    "payload": "phrases",
}
REQUIRED = {
    "bring": ("object",),
    "go": ("destination",),
    "find_object": ("object",),
    "find_person": ("person",),
    "guide": ("person", "destination"),
    "follow": ("person",),
    "say": ("person", "payload"),
    "store": ("object",),
}
OPERATOR = "operator"

_SLOT = re.compile(r"^\{(\w+)\}$")
_TOKEN = re.compile(r"[^\s,]+|,")


class GrammarError(Exception):
    pass


class InvalidGrammar(GrammarError):
    pass


class ParseError(GrammarError):
    def __init__(self, message: str, position: int, token: str):
        super().__init__(message)
        self.position = position
        self.token = token


class UnknownRoom(GrammarError):
    pass


class UnknownPerson(GrammarError):
    pass


@dataclass(frozen=True)
class CommandFrame:
    task: str
    object: ObjectDescriptor | None = None
    source: str | None = None
    destination: str | None = None
    person: str | None = None
    payload: str | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        for name in REQUIRED[self.task]:
            if getattr(self, name) is None:
                raise ValueError(f"{self.task} frame requires {name}")

    def to_dict(self) -> dict:
        out = asdict(self)
        if self.object is not None:
            out["object"] = {
                "class": self.object.cls,
                "determiner": self.object.determiner,
                "known_instance": self.object.known_instance,
            }
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "CommandFrame":
        obj = data.get("object")
        desc = None
        if obj is not None:
            desc = ObjectDescriptor(obj["class"], obj["determiner"], obj.get("known_instance"))
        return cls(
            data["task"],
            desc,
            data.get("source"),
            data.get("destination"),
            data.get("person"),
            data.get("payload"),
        )


def normalize(text: str) -> list[str]:
    """Lowercase, drop terminal punctuation, split into word and comma tokens."""
    text = " ".join(text.lower().split())
    text = text.rstrip(".!?;:").strip()
    return _TOKEN.findall(text)


def render(tokens: list[str]) -> str:
    return " ".join(tokens).replace(" ,", ",")


@dataclass(frozen=True)
class _Rule:
    task: str
    parts: tuple[str, ...]  # literal tokens and "{slot}" markers
    fixed: tuple[tuple[str, str], ...]

    def slots(self) -> list[str]:
        return [m.group(1) for p in self.parts if (m := _SLOT.match(p))]


@dataclass
class GrammarSpec:
    version: str
    vocabulary: dict[str, list[dict]]
    rules: list[dict]
    _compiled: list[_Rule] = field(default_factory=list, repr=False)
    _fillers: dict[str, list[tuple[tuple[str, ...], object]]] = field(default_factory=dict, repr=False)
    _by_first: dict[str, dict[str, list]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        defects = self._compile()
        if defects:
            raise InvalidGrammar("; ".join(defects))

    @classmethod
    def from_dict(cls, data: Mapping) -> "GrammarSpec":
        try:
            return cls(str(data["version"]), dict(data["vocabulary"]), list(data["rules"]))
        except KeyError as exc:
            raise InvalidGrammar(f"grammar file missing {exc}") from None

    @classmethod
    def load(cls, path: str | Path | None = None) -> "GrammarSpec":
        if path is None:
            text = resources.files("homebot").joinpath("data/grammar.json").read_text()
        else:
            text = Path(path).read_text()
        return cls.from_dict(json.loads(text))

    def _compile(self) -> list[str]:
        defects = []
        if not self.version:
            defects.append("missing version")
        for cat in ("objects", "rooms", "names", "phrases"):
            if not self.vocabulary.get(cat):
                defects.append(f"empty vocabulary category {cat!r}")
        if defects:
            return defects

        objects = []
        for entry in self.vocabulary["objects"]:
            words = tuple(normalize(entry["text"]))
            objects.append((("the",) + words, ObjectDescriptor(entry["class"], "definite")))
            objects.append(((entry.get("article", "a"),) + words, ObjectDescriptor(entry["class"], "indefinite")))
        self._fillers = {"objects": objects}
        for cat in ("rooms", "names"):
            self._fillers[cat] = [(tuple(normalize(e["text"])), e["id"]) for e in self.vocabulary[cat]]
        self._fillers["phrases"] = [(tuple(normalize(e["text"])), " ".join(normalize(e["text"]))) for e in self.vocabulary["phrases"]]
        for cat, fillers in self._fillers.items():
            seen = [f[0] for f in fillers]
            if len(set(seen)) != len(seen):
                defects.append(f"duplicate surface forms in {cat!r}")
            if any(not f[0] for f in fillers):
                defects.append(f"empty surface form in {cat!r}")
        self._by_first = {}
        for cat, fillers in self._fillers.items():
            index: dict[str, list] = {}
            for words, value in fillers:
                index.setdefault(words[0], []).append((words, value))
            self._by_first[cat] = index

        self._compiled = []
        for i, rule in enumerate(self.rules):
            task = rule.get("task")
            if task not in TASKS:
                defects.append(f"rule {i}: unknown task {task!r}")
                continue
            parts = tuple(normalize(rule.get("template", "").replace("{", " {").replace("}", "} ")))
            compiled = _Rule(task, parts, tuple(sorted(rule.get("fixed", {}).items())))
            slots = compiled.slots()
            for s in slots:
                if s not in SLOT_CATEGORY:
                    defects.append(f"rule {i}: unknown slot {{{s}}}")
            if len(set(slots)) != len(slots):
                defects.append(f"rule {i}: repeated slot")
            present = set(slots) | {k for k, _ in compiled.fixed}
            for need in REQUIRED[task]:
                if need not in present:
                    defects.append(f"rule {i}: {task} needs slot {need}")
            if not parts:
                defects.append(f"rule {i}: empty template")
            self._compiled.append(compiled)
        if not defects:
            defects.extend(self.ambiguities())
        return defects

    # -- derivations --------------------------------------------------------

    def _frame(self, rule: _Rule, values: Mapping[str, object]) -> CommandFrame:
        fields_ = dict(rule.fixed)
        fields_.update(values)
        return CommandFrame(rule.task, **fields_)

    def derivations(self) -> Iterator[tuple[str, CommandFrame]]:
        """Every (utterance, frame) pair the grammar can produce."""
        for rule in self._compiled:
            slots = rule.slots()
            choices = [self._fillers[SLOT_CATEGORY[s]] for s in slots]

            def expand(i: int, picked: list):
                if i == len(slots):
                    yield list(picked)
                    return
                for filler in choices[i]:
                    picked.append(filler)
                    yield from expand(i + 1, picked)
                    picked.pop()

            for picked in expand(0, []):
                yield self._realize(rule, dict(zip(slots, picked)))

    def _realize(self, rule: _Rule, picked: Mapping[str, tuple]) -> tuple[str, CommandFrame]:
        tokens: list[str] = []
        values = {}
        for part in rule.parts:
            m = _SLOT.match(part)
            if m:
                words, value = picked[m.group(1)]
                tokens.extend(words)
                values[m.group(1)] = value
            else:
                tokens.append(part)
        return render(tokens), self._frame(rule, values)

    def ambiguities(self) -> list[str]:
        seen: dict[str, CommandFrame] = {}
        out = []
        for utterance, frame in self.derivations():
            prev = seen.setdefault(utterance, frame)
            if prev != frame:
                out.append(f"ambiguous utterance {utterance!r}")
        return out

    # -- generate / parse ---------------------------------------------------

    def generate(self, seed: int) -> tuple[str, CommandFrame]:
        rng = random.Random(seed)
        rule = rng.choice(self._compiled)
        picked = {s: rng.choice(self._fillers[SLOT_CATEGORY[s]]) for s in rule.slots()}
        return self._realize(rule, picked)

    def parse(self, utterance: str) -> CommandFrame:
        tokens = normalize(utterance)
        if not tokens:
            raise ParseError("empty command", 0, "<end>")
        furthest = -1
        frames: set[CommandFrame] = set()

        def walk(rule: _Rule, i: int, pos: int, values: dict):
            nonlocal furthest
            if i == len(rule.parts):
                if pos == len(tokens):
                    frames.add(self._frame(rule, values))
                else:
                    furthest = max(furthest, pos)
                return
            part = rule.parts[i]
            if pos >= len(tokens):
                furthest = max(furthest, pos)
                return
            m = _SLOT.match(part)
            if m is None:
                if tokens[pos] == part:
                    walk(rule, i + 1, pos + 1, values)
                else:
                    furthest = max(furthest, pos)
                return
            slot = m.group(1)
            cat = SLOT_CATEGORY[slot]
            # object fillers start with a determiner, so a bad noun fails one token later
            offset = 1 if cat == "objects" and tokens[pos] in {w[0] for w, _ in self._fillers[cat]} else 0
            matched = False
            for words, value in self._by_first[cat].get(tokens[pos], ()):
                if tuple(tokens[pos : pos + len(words)]) == words:
                    matched = True
                    values[slot] = value
                    walk(rule, i + 1, pos + len(words), values)
                    del values[slot]
            if not matched:
                furthest = max(furthest, pos + offset)

        for rule in self._compiled:
            walk(rule, 0, 0, {})
        if len(frames) == 1:
            return frames.pop()
        if len(frames) > 1:
            raise ParseError(f"ambiguous command {render(tokens)!r}", 0, tokens[0])
        token = tokens[furthest] if furthest < len(tokens) else "<end>"
        raise ParseError(f"cannot parse at token {furthest} ({token!r})", furthest, token)


_default_grammar: GrammarSpec | None = None


def default_grammar() -> GrammarSpec:
    global _default_grammar
    if _default_grammar is None:
        _default_grammar = GrammarSpec.load()
    return _default_grammar


def generate(g: GrammarSpec, seed: int) -> tuple[str, CommandFrame]:
    return g.generate(seed)


def parse(g: GrammarSpec, utterance: str) -> CommandFrame:
    return g.parse(utterance)


# ---------------------------------------------------------------------------
# grounding


def _check_room(kb: KnowledgeBase, room: str | None) -> None:
    if room is None:
        return
    ent = kb.entities.get(room)
    if ent is None or not kb.ontology.is_a(ent.cls, "room"):
        raise UnknownRoom(room)


def _check_person(kb: KnowledgeBase, person: str) -> None:
    ent = kb.entities.get(person)
    if ent is None or not kb.ontology.is_a(ent.cls, "person"):
        raise UnknownPerson(person)


def _object_symbol(desc: ObjectDescriptor, scope: str | None, kb: KnowledgeBase) -> tuple[str, str | None, str | None]:
    """An entity id for the described object, or a placeholder plus the assumption behind it."""
    if desc.known_instance is not None:
        return kb.resolve(desc.known_instance), None, None
    here = kb.robot_location()
    known = []
    for obj in kb.instances(desc.cls):
        loc = kb.value(obj, "at")
        if loc is None:
            continue
        if scope is None or kb.room_of(loc) == scope:
            known.append((kb.distance(here, loc) if here else 0.0, obj))
    if known:
        return min(known)[1], None, None
    hyps = kb.inject_hypotheses(desc, scope)
    if hyps:
        assumption = hyps[0].parent
    else:
        assumption = next(
            a.id for a in kb.assumptions.values() if a.cls == desc.cls and a.scope == scope and a.status != CONFIRMED
        )
    return f"?{desc.cls}", assumption, f"?{desc.cls}"


def frame_to_goal(frame: CommandFrame, kb: KnowledgeBase) -> Goal:
    """Ground a parsed command against the knowledge base.

    An object the robot has not seen becomes a placeholder backed by
    hypotheses over the source room, or over every room when the command
    leaves the source out.
    """
    _check_room(kb, frame.source)
    _check_room(kb, frame.destination)
    if frame.person is not None:
        _check_person(kb, frame.person)
    task = frame.task
    if task == "go":
        return Goal((Triple(ROBOT, "in-room", frame.destination),))
    if task == "find_person":
        return Goal((Triple(ROBOT, "near", frame.person),))
    if task == "guide":
        return Goal((Triple(frame.person, "in-room", frame.destination),))
    if task == "follow":
        return Goal((Triple(ROBOT, "followed", frame.person),))
    if task == "say":
        return Goal((Triple(frame.person, "heard", frame.payload),))

    symbol, assumption, variable = _object_symbol(frame.object, frame.source, kb)
    if task == "bring":
        recipient = frame.person or OPERATOR
        _check_person(kb, recipient)
        target = Triple(recipient, "received", symbol)
    elif task == "find_object":
        target = Triple(ROBOT, "found", symbol)
    elif task == "store":
        target = Triple(symbol, "at", storing_placement(frame.object.cls, kb))
    else:  # pragma: no cover - TASKS is closed
        raise GrammarError(task)
    return Goal((target,), assumption, variable)
