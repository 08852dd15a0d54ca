"""Scenario files: a world, a seed and either a command list or an HFSM script.

A scenario is JSON::

    {"world": "demo_apartment.json", "seed": 7,
     "commands": ["bring me an apple from the kitchen"],
     "machine": "gpsr",            # optional
     "expect": "succeeded"}        # optional

Without ``machine`` the commands run one after another, as if typed into the
REPL, stopping at the first one that does not succeed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .agent import Session, TaskReport
from .hfsm import MachineDefinition
from .world import data_path

EXIT_OK, EXIT_MISMATCH, EXIT_FAILED, EXIT_ABORTED, EXIT_USAGE = 0, 1, 2, 3, 64


class ScenarioError(Exception):
    """Malformed or unresolvable scenario (a configuration error)."""


@dataclass
class ScenarioFile:
    world: Path
    commands: list[str] = field(default_factory=list)
    machine: str | None = None
    seed: int | None = None
    expect: str | None = None
    name: str = "scenario"

    @classmethod
    def load(cls, source: str | Path) -> "ScenarioFile":
        path = Path(source)
        if not path.exists() and not path.is_absolute():
            bundled = data_path("scenarios", path.name if path.suffix else f"{path.name}.scenario")
            if bundled.exists():
                path = bundled
        if not path.exists():
            raise ScenarioError(f"scenario file not found: {source}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"{path}: {exc}") from None
        if "world" not in data:
            raise ScenarioError(f"{path}: no world given")
        if "commands" not in data and "machine" not in data:
            raise ScenarioError(f"{path}: needs commands or a machine")
        world = Path(data["world"])
        if not world.is_absolute():
            local = path.parent / world
            world = local if local.exists() else data_path("worlds", str(world))
        if not world.exists():
            raise ScenarioError(f"world file not found: {data['world']}")
        return cls(
            world=world,
            commands=list(data.get("commands", [])),
            machine=data.get("machine"),
            seed=data.get("seed"),
            expect=data.get("expect"),
            name=path.stem,
        )

    def machine_definition(self) -> MachineDefinition:
        try:
            return MachineDefinition.load(self.machine)
        except FileNotFoundError:
            raise ScenarioError(f"machine not found: {self.machine}") from None


@dataclass
class ScenarioResult:
    status: str
    expected: str | None
    log: str
    reports: list[TaskReport]

    @property
    def diagnosed(self) -> bool:
        return any(r.diagnosis is not None for r in self.reports)

    @property
    def exit_code(self) -> int:
        if self.expected is not None:
            return EXIT_OK if self.status == self.expected else EXIT_MISMATCH
        if self.status == "succeeded":
            return EXIT_OK
        if self.status == "aborted":
            return EXIT_ABORTED
        return EXIT_FAILED

    def diff(self) -> str:
        return f"- expected: {self.expected}\n+ actual:   {self.status}"


def run_commands(session: Session, commands: list[str]) -> str:
    status = "succeeded"
    for utterance in commands:
        report = session.command(utterance)
        if report.status != "succeeded":
            status = "failed" if report.status == "parse-error" else report.status
            break
    return status


def run_scenario(scenario: ScenarioFile | str | Path, *, seed: int | None = None, max_steps: int = 1000) -> ScenarioResult:
    sc = scenario if isinstance(scenario, ScenarioFile) else ScenarioFile.load(scenario)
    machine = sc.machine_definition() if sc.machine else None
    with Session(sc.world, seed=seed if seed is not None else sc.seed) as session:
        if machine is None:
            status = run_commands(session, sc.commands)
        else:
            status = session.run_machine(machine, sc.commands, max_steps=max_steps).status
        return ScenarioResult(status, sc.expect, session.log_lines(), list(session.reports))


def bundled_scenarios() -> list[Path]:
    return sorted(data_path("scenarios").glob("*.scenario"))
