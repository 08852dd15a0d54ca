"""Acceptance criteria, each checked at its stated tolerance and time budget.

Every test prints one ``ACCEPTANCE <n> ... PASS|FAIL`` line to the terminal.
"""

import math
import time

import numpy as np
import pytest

from compare import planner_cost
from conftest import apple_world
from homebot import hallway
from homebot.agent import Session
from homebot.grammar import default_grammar
from homebot.hfsm import BUNDLED, bundled, in_recovery, is_terminal, reachable_configurations, step, validate
from homebot.prism import (
    DegenerateConfiguration,
    compose_homography,
    decompose_to_pose,
    estimate_homography,
    map_pose,
    project,
    reprojection_rms,
    wrap_angle,
)
from homebot.scenario import bundled_scenarios, run_scenario
from oracle import dijkstra_cost, random_goal, random_world
from synthetic import K, PLACARD, random_view

APPLE = "bring me an apple from the kitchen"


@pytest.fixture
def report(capsys):
    def emit(n: int, name: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\nACCEPTANCE {n} {name}: {'PASS' if ok else 'FAIL'} ({detail})")
        assert ok, detail

    return emit


def test_1_grammar_round_trip(report):
    g = default_grammar()
    t0 = time.perf_counter()
    bad = 0
    for seed in range(10_000):
        text, frame = g.generate(seed)
        bad += g.parse(text) != frame
    dt = time.perf_counter() - t0
    report(1, "grammar round-trip", bad == 0 and dt < 10, f"{10_000 - bad}/10000 exact, {dt:.2f}s < 10s")


def test_2_planner_oracle(report):
    t0 = time.perf_counter()
    mismatches = []
    for seed in range(200):
        w = random_world(seed)
        targets, expected = random_goal(w, seed)
        got, want = planner_cost(w, targets, expected), dijkstra_cost(w, targets, expected)
        if not (got == want or abs(got - want) < 1e-9):
            mismatches.append(seed)
    dt = time.perf_counter() - t0
    report(2, "planner oracle equivalence", not mismatches and dt < 60, f"{200 - len(mismatches)}/200 equal, {dt:.2f}s < 60s")


def _apple_run(k):
    with Session(apple_world(k), seed=7) as s:
        r = s.command(APPLE)
        return r, s.log_lines()


def test_3_open_world_loop(report):
    problems = []
    for k in (1, 2, 3):
        (r, log), (_, log2) = _apple_run(k), _apple_run(k)
        res = r.result
        if not (r.status == "succeeded" and res.refutations == k - 1 and res.plans == k and log == log2):
            problems.append(f"k={k}: {r.status}, {res.refutations} refutations, {res.plans} plans")
    (r, log), (_, log2) = _apple_run(None), _apple_run(None)
    if not (r.status == "failed" and r.diagnosis is not None and r.diagnosis.conclusion == "invalid" and log == log2):
        problems.append(f"no apple: {r.status} {r.message}")
    report(3, "open-world loop", not problems, "; ".join(problems) or "k=1,2,3 give k-1 refutations and k plans; no apple gives invalid")


def test_4_homography_pose(report):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst_pose, worst_rms = 0.0, 0.0
    for _ in range(100):
        cam, centre, heading, plane = random_view(rng)
        x = project(compose_homography(plane, K), PLACARD)
        h, residual = estimate_homography(PLACARD, x)
        mx, my, mth, mz = map_pose(decompose_to_pose(h, K, PLACARD), cam)
        err = max(abs(mx - centre[0]), abs(my - centre[1]), abs(mz - centre[2]), abs(wrap_angle(mth - heading)))
        worst_pose = max(worst_pose, err)
        worst_rms = max(worst_rms, reprojection_rms(h, PLACARD, x), residual)
    collinear = np.array([[0.0, 0.0], [0.1, 0.0], [0.2, 0.0], [0.0, 0.1]])
    try:
        estimate_homography(collinear, collinear * 100 + 50)
        rejected = False
    except DegenerateConfiguration:
        rejected = True
    dt = time.perf_counter() - t0
    ok = worst_pose < 1e-6 and worst_rms < 1e-9 and rejected and dt < 5
    report(4, "homography/pose", ok, f"max pose error {worst_pose:.1e}, max RMS {worst_rms:.1e} px, collinear rejected={rejected}, {dt:.2f}s < 5s")


def test_5_hallway(report):
    spec = hallway.CorridorSpec()
    signal, demo = hallway.SignalPolicy(hallway.TURN_SIGNAL), hallway.SignalPolicy(hallway.PASSIVE_DEMO)
    t0 = time.perf_counter()
    r90 = hallway.run_batch(spec, signal, hallway.HumanModel(p_comply=0.10), 10_000, seed=0).rate
    r20 = hallway.run_batch(spec, demo, hallway.HumanModel(p_comply=0.80), 10_000, seed=0).rate
    grid = [0.0, 0.25, 0.5, 0.75, 1.0]
    rates = [hallway.run_batch(spec, signal, hallway.HumanModel(p_comply=p), 5_000, seed=1).rate for p in grid]
    monotone = all(a >= b for a, b in zip(rates, rates[1:]))
    # no motion after a full stop, over every logged tick of a mixed batch
    b = hallway.run_batch(spec, signal, hallway.HumanModel(p_comply=0.5, p_dodge=0.3), 200, seed=2, keep_trajectories=True)
    t = b.trajectories
    ticks = t.robot_x.size
    first = np.where(t.stopped.any(axis=1), t.stopped.argmax(axis=1), t.stopped.shape[1])
    moved = 0
    for i, k in enumerate(first):
        if k < t.stopped.shape[1]:
            moved += int(np.any(t.robot_x[i, k:] != t.robot_x[i, k]) or np.any(t.robot_y[i, k:] != t.robot_y[i, k]))
    dt = time.perf_counter() - t0
    ok = abs(r90 - 0.90) <= 0.01 and abs(r20 - 0.20) <= 0.01 and monotone and moved == 0 and ticks >= 50_000 and dt < 30
    detail = (
        f"rate(signal, 0.10)={r90:.4f}, rate(demo, 0.80)={r20:.4f}, grid {[round(r, 4) for r in rates]}, "
        f"{moved} post-stop moves over {ticks} ticks, {dt:.2f}s < 30s"
    )
    report(5, "hallway calibration", ok, detail)


def test_6_hfsm_safety(report):
    t0 = time.perf_counter()
    defects, failures, checked = [], [], 0
    for name in BUNDLED:
        m = bundled(name)
        defects += [f"{name}: {d}" for d in validate(m)]
        for cfg in reachable_configurations(m):
            if is_terminal(cfg):
                continue
            checked += 1
            nxt, _ = step(m, cfg, "error")
            if not in_recovery(m, nxt):
                failures.append(f"{name} {cfg} -> {nxt}")
    dt = time.perf_counter() - t0
    ok = not defects and not failures and dt < 5
    report(6, "HFSM safety", ok, f"{len(BUNDLED)} machines valid, {checked - len(failures)}/{checked} configurations recover in one step, {dt:.2f}s < 5s")


def test_7_determinism(report):
    differ = []
    paths = bundled_scenarios()
    for p in paths:
        a, b = run_scenario(p), run_scenario(p)
        if a.log.encode() != b.log.encode() or not a.log:
            differ.append(p.stem)
    report(7, "end-to-end determinism", not differ, f"{len(paths) - len(differ)}/{len(paths)} scenarios byte-identical")
