"""Corridor passing trials between a signalling robot and an oncoming person.

The corridor runs along x with the robot starting at x = 0 and the person at
the far end; y is measured from the wall on the robot's right.  The robot
always dodges to its left (high y) once the person is within the turn
distance, which is the person's intuitive right.  A person who understands
the turn signal moves to the other lane instead.

Lateral motion is a two-lane abstraction: each party is in the centre or
moving toward a lane centre ``lane_offset`` from a wall, at a finite lateral
speed.  Many trials are advanced together as numpy arrays, but every trial
draws its randomness from its own ``SeedSequence([seed, i])`` so a trial's
outcome does not depend on the batch it ran in.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

NONE, TURN_SIGNAL, PASSIVE_DEMO = "none", "turn_signal", "turn_signal_with_passive_demo"
POLICIES = (NONE, TURN_SIGNAL, PASSIVE_DEMO)
CLI_POLICIES = {"none": NONE, "signal": TURN_SIGNAL, "signal+demo": PASSIVE_DEMO}

FULL_STOP = "robot_full_stop"
CROSSED = "human_crossed_into_robot_path"
NO_CONFLICT = "none"
CAUSES = (FULL_STOP, CROSSED, NO_CONFLICT)


class InvalidSpec(ValueError):
    pass


@dataclass(frozen=True)
class CorridorSpec:
    length: float = 17.5
    width: float = 1.85
    turn_distance: float = 2.75
    stop_distance: float = 1.0
    dt: float = 0.05
    robot_speed: float = 0.6
    human_speed: float = 1.2
    robot_lateral_speed: float = 0.5
    human_lateral_speed: float = 0.6
    lane_offset: float = 0.35
    # the LEDs come on this far ahead of the encounter
    signal_distance: float = 6.0
    # an undecided person drifts to their preferred side at this distance
    intuition_distance: float = 4.0
    # simulated time after the nominal meeting point
    tail: float = 3.0

    def __post_init__(self):
        if not (0 < self.stop_distance < self.turn_distance < self.length):
            raise InvalidSpec("need 0 < stop distance < turn distance < length")
        if min(self.robot_speed, self.human_speed, self.robot_lateral_speed, self.human_lateral_speed, self.dt) <= 0:
            raise InvalidSpec("speeds and time step must be positive")
        if not (0 < self.lane_offset < self.width / 2):
            raise InvalidSpec("lane offset must lie within the near half of the corridor")
        if not (self.turn_distance < self.signal_distance < self.length):
            raise InvalidSpec("the signal must come on before the turn and after the start")

    @property
    def centre(self) -> float:
        return self.width / 2

    @property
    def low_lane(self) -> float:
        return self.lane_offset

    @property
    def high_lane(self) -> float:
        return self.width - self.lane_offset

    @property
    def ticks(self) -> int:
        meet = self.length / (self.robot_speed + self.human_speed)
        return int(math.ceil((meet + self.tail) / self.dt))


@dataclass(frozen=True)
class SignalPolicy:
    kind: str = TURN_SIGNAL
    demo_trigger: str = "motion_start"  # the demo turn happens as the robot sets off

    def __post_init__(self):
        if self.kind not in POLICIES:
            raise InvalidSpec(f"unknown signal policy {self.kind!r}")

    @property
    def signals(self) -> bool:
        return self.kind != NONE


@dataclass(frozen=True)
class HumanModel:
    p_comply: float = 0.0
    latency: float = 0.5
    side_preference: str = "right"
    # chance that a person caught in the robot's lane sidesteps out of it
    p_dodge: float = 0.0
    dodge_speed: float = 1.5
    # "left" or "right": keep to that wall for the whole trial
    hug: str | None = None

    def __post_init__(self):
        for name in ("p_comply", "p_dodge"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidSpec(f"{name} must be a probability, got {v}")
        if self.latency < 0:
            raise InvalidSpec("latency must be non-negative")
        if self.side_preference not in ("left", "right") or self.hug not in (None, "left", "right"):
            raise InvalidSpec("sides are 'left' or 'right'")


@dataclass
class TrialOutcome:
    conflict: bool
    cause: str
    min_separation: float
    summary: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.conflict != (self.cause != NO_CONFLICT):
            raise ValueError("conflict flag disagrees with cause")


@dataclass
class Trajectories:
    """Per-tick state, shaped (trials, ticks)."""

    robot_x: np.ndarray
    robot_y: np.ndarray
    human_x: np.ndarray
    human_y: np.ndarray
    stopped: np.ndarray
    committed: np.ndarray

    def __getitem__(self, i) -> "Trajectories":
        return Trajectories(*(np.atleast_2d(getattr(self, f)[i]) for f in self.__dataclass_fields__))


# ---------------------------------------------------------------------------


def _human_lane(spec: CorridorSpec, side: str) -> float:
    # the person faces -x, so their right is high y
    return spec.high_lane if side == "right" else spec.low_lane


def _draws(seed, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Two uniforms per trial (comply, dodge), one generator per trial."""
    u = np.empty((n, 2))
    for i in range(n):
        u[i] = np.random.default_rng(np.random.SeedSequence([seed, i])).random(2)
    return u[:, 0], u[:, 1]


def simulate(
    spec: CorridorSpec,
    policy: SignalPolicy,
    human: HumanModel,
    u_comply: np.ndarray,
    u_dodge: np.ndarray,
) -> tuple[Trajectories, dict]:
    """Advance all trials together; returns trajectories and per-trial event ticks."""
    n, T, dt = len(u_comply), spec.ticks, spec.dt
    c, low, high = spec.centre, spec.low_lane, spec.high_lane
    rx, ry = np.zeros(n), np.full(n, c)
    hx = np.full(n, spec.length)
    start = _human_lane(spec, human.hug) if human.hug else c
    hy = np.full(n, start)
    r_target = np.full(n, c)
    h_target = np.full(n, start)
    h_lat = np.full(n, spec.human_lateral_speed)
    decided = np.full(n, human.hug is not None)
    complies = u_comply < human.p_comply
    dodger = u_dodge < human.p_dodge
    committed = np.zeros(n, bool)
    stopped = np.zeros(n, bool)
    commit_tick = np.full(n, -1)
    stop_tick = np.full(n, -1)
    signal_tick = np.full(n, -1)
    perceive_at = np.full(n, np.inf)
    dodge_at = np.full(n, np.inf)
    dodged = np.zeros(n, bool)
    if policy.kind == PASSIVE_DEMO:
        perceive_at[:] = human.latency  # the demo turn is seen shortly after the start
    shape = (n, T)
    log = {k: np.empty(shape) for k in ("robot_x", "robot_y", "human_x", "human_y")}
    log_stop, log_commit = np.empty(shape, bool), np.empty(shape, bool)
    min_sep = np.full(n, np.inf)
    intuitive = _human_lane(spec, human.side_preference)
    lag = int(round(human.latency / dt))

    for k in range(T):
        t = k * dt
        along = hx - rx
        sep = np.hypot(along, hy - ry)
        min_sep = np.minimum(min_sep, sep)

        # robot: halt for good inside the stop radius, otherwise commit the turn once
        halt = ~stopped & (sep <= spec.stop_distance)
        stopped |= halt
        stop_tick[halt] = k
        turn = ~committed & ~stopped & (along > 0) & (along <= spec.turn_distance)
        committed |= turn
        commit_tick[turn] = k
        r_target[turn] = high

        # the LEDs light ahead of the turn; the person reads them after a lag
        if policy.signals:
            on = (signal_tick < 0) & (along > 0) & (along <= spec.signal_distance)
            signal_tick[on] = k
            if policy.kind == TURN_SIGNAL:
                perceive_at[on] = t + human.latency
        seen = ~decided & (t >= perceive_at - 1e-9) & complies
        h_target[seen] = low
        decided |= seen
        drift = ~decided & (along > 0) & (along <= spec.intuition_distance)
        h_target[drift] = intuitive
        decided |= drift

        # someone who ends up in the robot's lane may sidestep after noticing the turn
        in_lane = hy > c
        notice = committed & dodger & ~dodged & in_lane & ~stopped & np.isinf(dodge_at)
        dodge_at[notice] = t + human.latency
        go = ~dodged & (t >= dodge_at - 1e-9)
        h_target[go] = low
        h_lat[go] = human.dodge_speed
        dodged |= go

        log["robot_x"][:, k], log["robot_y"][:, k] = rx, ry
        log["human_x"][:, k], log["human_y"][:, k] = hx, hy
        log_stop[:, k], log_commit[:, k] = stopped, committed

        moving = ~stopped
        rx = np.where(moving, rx + spec.robot_speed * dt, rx)
        ry = np.where(moving, ry + np.clip(r_target - ry, -spec.robot_lateral_speed * dt, spec.robot_lateral_speed * dt), ry)
        # the person is blocked while the robot stands in front of them
        walking = moving | (hx < rx)
        hx = np.where(walking, hx - spec.human_speed * dt, hx)
        hy = hy + np.clip(h_target - hy, -h_lat * dt, h_lat * dt)

    traj = Trajectories(log["robot_x"], log["robot_y"], log["human_x"], log["human_y"], log_stop, log_commit)
    events = {
        "commit_tick": commit_tick,
        "stop_tick": stop_tick,
        "signal_tick": signal_tick,
        "complied": complies & (human.hug is None),
        "dodged": dodged,
        "min_separation": min_sep,
        "lag": lag,
    }
    return traj, events


def detect_conflict(traj: Trajectories, spec: CorridorSpec) -> list[str]:
    """Classify each trial: a full stop, a crossing into the robot's lane, or none."""
    stopped = np.atleast_2d(traj.stopped).any(axis=1)
    along = np.atleast_2d(traj.human_x) - np.atleast_2d(traj.robot_x)
    close = (along > 0) & (along < spec.turn_distance)
    in_lane = np.atleast_2d(traj.human_y) > spec.centre
    crossed = (np.atleast_2d(traj.committed) & close & in_lane).any(axis=1)
    return [FULL_STOP if s else CROSSED if x else NO_CONFLICT for s, x in zip(stopped, crossed)]


def _outcomes(traj: Trajectories, events: dict, spec: CorridorSpec) -> list[TrialOutcome]:
    causes = detect_conflict(traj, spec)
    out = []
    for i, cause in enumerate(causes):
        out.append(
            TrialOutcome(
                conflict=cause != NO_CONFLICT,
                cause=cause,
                min_separation=float(events["min_separation"][i]),
                summary={
                    "commit_tick": int(events["commit_tick"][i]),
                    "stop_tick": int(events["stop_tick"][i]),
                    "signal_tick": int(events["signal_tick"][i]),
                    "complied": bool(events["complied"][i]),
                    "dodged": bool(events["dodged"][i]),
                    "final_robot_x": float(traj.robot_x[i, -1]),
                    "final_human_x": float(traj.human_x[i, -1]),
                },
            )
        )
    return out


def run_trial(spec: CorridorSpec, policy: SignalPolicy, human: HumanModel, seed: int, index: int = 0) -> TrialOutcome:
    """One trial; identical to trial ``index`` of ``run_batch(..., seed)``."""
    uc, ud = _draws(seed, index + 1)
    traj, events = simulate(spec, policy, human, uc[index:], ud[index:])
    return _outcomes(traj, events, spec)[0]


def wilson_interval(k: int, n: int, z: float = 1.959963984540054) -> tuple[float, float]:
    if n <= 0:
        raise ValueError("n must be positive")
    p = k / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return max(0.0, centre - half), min(1.0, centre + half)


@dataclass
class BatchReport:
    spec: CorridorSpec
    policy: SignalPolicy
    human: HumanModel
    n: int
    seed: int
    conflicts: int
    causes: dict[str, int]
    outcomes: list[TrialOutcome] = field(default_factory=list, repr=False)
    trajectories: Trajectories | None = field(default=None, repr=False)

    @property
    def rate(self) -> float:
        return self.conflicts / self.n

    @property
    def ci95(self) -> tuple[float, float]:
        return wilson_interval(self.conflicts, self.n)

    def to_dict(self) -> dict:
        return {
            "spec": asdict(self.spec),
            "policy": self.policy.kind,
            "n": self.n,
            "conflicts": self.conflicts,
            "rate": self.rate,
            "ci95": list(self.ci95),
            "causes": dict(self.causes),
            "human": asdict(self.human),
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def run_batch(
    spec: CorridorSpec,
    policy: SignalPolicy,
    human: HumanModel,
    n: int,
    seed: int = 0,
    *,
    keep_trajectories: bool = False,
) -> BatchReport:
    if n < 1:
        raise ValueError("n must be at least 1")
    uc, ud = _draws(seed, n)
    traj, events = simulate(spec, policy, human, uc, ud)
    outcomes = _outcomes(traj, events, spec)
    causes = {c: 0 for c in CAUSES}
    for o in outcomes:
        causes[o.cause] += 1
    return BatchReport(
        spec, policy, human, n, seed, n - causes[NO_CONFLICT], causes, outcomes, traj if keep_trajectories else None
    )
