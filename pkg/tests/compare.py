"""Run the planner on an oracle world so the two can be compared."""

import math
from dataclasses import replace

from homebot.kb import Triple
from homebot.planner import Domain, NoPlan, search, state_from_kb
from homebot.world import load_world


def planner_problem(world: dict, targets, expected: dict):
    _, kb = load_world(world)
    s0 = replace(state_from_kb(kb), expected=frozenset(expected.items()))
    return s0, tuple(Triple(*t) for t in targets), Domain.from_kb(kb)


def planner_cost(world: dict, targets, expected: dict) -> float:
    s0, goal, domain = planner_problem(world, targets, expected)
    try:
        _, costs = search(s0, goal, domain)
    except NoPlan:
        return math.inf
    return sum(costs)
