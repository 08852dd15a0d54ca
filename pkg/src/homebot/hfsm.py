"""Hierarchical finite state machines for top-level task scripts.

A machine is data: named states, ``(state, event) -> state`` transitions, an
initial state and a recovery state.  A state is either a leaf whose entry emits
commands, or a composite holding a child machine.  ``succeeded``, ``failed``
and ``aborted`` are terminal; when a child machine reaches one, the enclosing
composite receives that name as an event in the same step.

Transitions missing from the table leave the configuration unchanged (the
transition function is completed with self-loops).  An ``error`` event always
moves to the recovery state of the innermost active machine.
"""

from __future__ import annotations

import json
import queue
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

from .world import data_path

TERMINALS = ("succeeded", "failed", "aborted")
ERROR = "error"

Configuration = tuple[str, ...]


class HFSMError(Exception):
    pass


class UndeclaredEvent(HFSMError):
    pass


class StepLimitExceeded(HFSMError):
    pass


class InvalidMachine(HFSMError):
    pass


@dataclass(frozen=True)
class Command:
    name: str
    args: tuple[tuple[str, str], ...] = ()

    def arg(self, key: str, default: str | None = None) -> str | None:
        return dict(self.args).get(key, default)

    def __str__(self) -> str:
        if not self.args:
            return self.name
        return f"{self.name}({', '.join(f'{k}={v}' for k, v in self.args)})"


@dataclass
class StateDef:
    name: str
    entry: tuple[Command, ...] = ()
    child: "MachineDefinition | None" = None

    @property
    def composite(self) -> bool:
        return self.child is not None


@dataclass
class MachineDefinition:
    name: str
    states: dict[str, StateDef]
    transitions: dict[tuple[str, str], str]
    initial: str
    recovery: str | None
    events: frozenset[str]
    parent_state: str | None = None

    @classmethod
    def from_dict(cls, data: Mapping, name: str | None = None) -> "MachineDefinition":
        try:
            states = {}
            for sname, sdef in data["states"].items():
                entry = tuple(
                    Command(c["command"], tuple(sorted((k, str(v)) for k, v in c.get("args", {}).items())))
                    for c in sdef.get("entry", [])
                )
                child = None
                if "machine" in sdef:
                    child = cls.from_dict(sdef["machine"], name=f"{name or data.get('name', 'machine')}/{sname}")
                    child.parent_state = sname
                states[sname] = StateDef(sname, entry, child)
            transitions = {}
            for t in data.get("transitions", []):
                key = (t["from"], t["event"])
                if key in transitions:
                    raise InvalidMachine(f"duplicate transition {key}")
                transitions[key] = t["to"]
            return cls(
                name=name or data.get("name", "machine"),
                states=states,
                transitions=transitions,
                initial=data["initial"],
                recovery=data.get("recovery"),
                events=frozenset(data.get("events", [])),
            )
        except KeyError as exc:
            raise InvalidMachine(f"machine definition missing {exc}") from None

    @classmethod
    def load(cls, source: str | Path) -> "MachineDefinition":
        path = Path(source)
        if not path.exists():
            stem = path.name if path.suffix else f"{path.name}.json"
            path = data_path("machines", stem)
        data = json.loads(path.read_text())
        return cls.from_dict(data, name=data.get("name", path.stem))

    def machines(self) -> Iterable["MachineDefinition"]:
        yield self
        for s in self.states.values():
            if s.child is not None:
                yield from s.child.machines()

    @property
    def alphabet(self) -> frozenset[str]:
        out = set(TERMINALS) | {ERROR}
        for m in self.machines():
            out |= m.events
        return frozenset(out)

    def local_alphabet(self) -> frozenset[str]:
        children_terminate = any(s.composite for s in self.states.values())
        return self.events | {ERROR} | (frozenset(TERMINALS) if children_terminate else frozenset())


def validate(m: MachineDefinition) -> list[str]:
    """Structural defects of ``m`` and every nested machine; empty means ok."""
    defects: list[str] = []
    for sub in m.machines():
        prefix = "" if sub is m else f"{sub.name}: "
        names = set(sub.states)
        if sub.initial not in names:
            defects.append(f"{prefix}initial state {sub.initial!r} undeclared")
        if sub.recovery is None:
            defects.append(f"{prefix}no recovery state")
        elif sub.recovery not in names:
            defects.append(f"{prefix}recovery state {sub.recovery!r} undeclared")
        clash = names & set(TERMINALS)
        if clash:
            defects.append(f"{prefix}states shadow terminals: {sorted(clash)}")
        allowed = sub.local_alphabet()
        edges: dict[str, set[str]] = {s: set() for s in names}
        for (src, ev), dst in sorted(sub.transitions.items()):
            if src not in names:
                defects.append(f"{prefix}transition from undeclared state {src!r}")
                continue
            if ev not in allowed:
                defects.append(f"{prefix}undeclared event {ev!r} on {src}")
            if dst not in names and dst not in TERMINALS:
                defects.append(f"{prefix}transition to undeclared state {dst!r}")
                continue
            edges[src].add(dst)
        if sub.recovery in names:
            for s in names:
                edges[s].add(sub.recovery)
        if sub.initial not in names:
            continue
        seen = {sub.initial}
        todo = deque([sub.initial])
        while todo:
            for nxt in edges.get(todo.popleft(), ()):
                if nxt in names and nxt not in seen:
                    seen.add(nxt)
                    todo.append(nxt)
        for s in sorted(names - seen):
            defects.append(f"{prefix}unreachable: {s}")
        for s in sorted(names):
            if not _reaches_terminal(s, edges, names):
                defects.append(f"{prefix}no path to a terminal state from {s}")
    return defects


def _reaches_terminal(start: str, edges: Mapping[str, set[str]], names: set[str]) -> bool:
    seen = {start}
    todo = deque([start])
    while todo:
        for nxt in edges.get(todo.popleft(), ()):
            if nxt not in names:
                return True
            if nxt not in seen:
                seen.add(nxt)
                todo.append(nxt)
    return False


def _chain(m: MachineDefinition, config: Configuration) -> list[MachineDefinition]:
    """The machine active at each level of ``config``."""
    chain = [m]
    for name in config[:-1]:
        child = chain[-1].states[name].child
        if child is None:
            raise HFSMError(f"configuration {config} descends into leaf {name}")
        chain.append(child)
    return chain


def _enter(m: MachineDefinition, state: str) -> tuple[Configuration, list[Command]]:
    if state in TERMINALS:
        return (state,), []
    sdef = m.states[state]
    cmds = list(sdef.entry)
    if sdef.child is None:
        return (state,), cmds
    sub, more = _enter(sdef.child, sdef.child.initial)
    return (state,) + sub, cmds + more


def start(m: MachineDefinition) -> tuple[Configuration, list[Command]]:
    return _enter(m, m.initial)


def is_terminal(config: Configuration) -> bool:
    return len(config) == 1 and config[0] in TERMINALS


def _fire(m: MachineDefinition, config: Configuration, event: str, top: int) -> tuple[Configuration, list[Command]]:
    chain = _chain(m, config)
    for level in range(top, -1, -1):
        target = chain[level].transitions.get((config[level], event))
        if target is None:
            continue
        sub, cmds = _enter(chain[level], target)
        new = config[:level] + sub
        if target in TERMINALS and level > 0:
            # child finished: the enclosing composite sees the outcome as an event
            parent_cfg = config[:level]
            nxt, more = _fire(m, parent_cfg, target, level - 1)
            return nxt, cmds + more
        return new, cmds
    return config, []


def step(m: MachineDefinition, config: Configuration, event: str) -> tuple[Configuration, list[Command]]:
    """Deliver one event; returns the new configuration and the commands to emit."""
    if is_terminal(config):
        return config, []
    if event not in m.alphabet:
        raise UndeclaredEvent(event)
    if event == ERROR:
        chain = _chain(m, config)
        for level in range(len(config) - 1, -1, -1):
            rec = chain[level].recovery
            if rec is not None:
                sub, cmds = _enter(chain[level], rec)
                return config[:level] + sub, cmds
        return config, []
    return _fire(m, config, event, len(config) - 1)


def recovery_states(m: MachineDefinition) -> set[tuple[str, str]]:
    """(machine name, state) pairs that are declared recovery states."""
    return {(sub.name, sub.recovery) for sub in m.machines() if sub.recovery}


def in_recovery(m: MachineDefinition, config: Configuration) -> bool:
    chain = _chain(m, config)
    recs = recovery_states(m)
    return any((chain[i].name, config[i]) in recs for i in range(len(config)))


def reachable_configurations(m: MachineDefinition) -> set[Configuration]:
    init, _ = start(m)
    seen = {init}
    todo = deque([init])
    alphabet = sorted(m.alphabet)
    while todo:
        cfg = todo.popleft()
        for ev in alphabet:
            nxt, _ = step(m, cfg, ev)
            if nxt not in seen:
                seen.add(nxt)
                todo.append(nxt)
    return seen


class EventQueue:
    """Thread-safe FIFO event source; returns None when empty."""

    def __init__(self, events: Iterable[str] = ()):
        self._q: queue.Queue[str] = queue.Queue()
        for e in events:
            self._q.put(e)

    def put(self, event: str) -> None:
        self._q.put(event)

    def __call__(self) -> str | None:
        try:
            return self._q.get_nowait()
        except queue.Empty:
            return None


@dataclass
class RunTrace:
    status: str
    steps: int
    transitions: list[tuple[Configuration, str, Configuration]] = field(default_factory=list)
    commands: list[Command] = field(default_factory=list)


def run(
    m: MachineDefinition,
    source: Callable[[], str | None],
    sink: Callable[[Command], None],
    *,
    max_steps: int = 1000,
    on_transition: Callable[[Configuration, str, Configuration], None] | None = None,
) -> RunTrace:
    """Pump events from ``source`` until a terminal state; emitted commands go to ``sink``.

    ``source`` returning None counts as an idle step.
    """
    defects = validate(m)
    if defects:
        raise InvalidMachine("; ".join(defects))
    config, cmds = start(m)
    trace = RunTrace("", 0)
    for c in cmds:
        trace.commands.append(c)
        sink(c)
    while not is_terminal(config):
        if trace.steps >= max_steps:
            raise StepLimitExceeded(f"{m.name} did not terminate within {max_steps} steps")
        trace.steps += 1
        event = source()
        if event is None:
            continue
        new, cmds = step(m, config, event)
        trace.transitions.append((config, event, new))
        if on_transition is not None:
            on_transition(config, event, new)
        config = new
        for c in cmds:
            trace.commands.append(c)
            sink(c)
    trace.status = config[0]
    return trace


BUNDLED = ("gpsr", "help_me_carry", "restaurant", "storing_groceries", "patrol")


def bundled(name: str) -> MachineDefinition:
    return MachineDefinition.load(data_path("machines", f"{name}.json"))
