import copy

import pytest
from hypothesis import given, settings, strategies as st

from conftest import demo_world_dict
from homebot.kb import Triple
from homebot.planner import ActionInstance
from homebot.world import MetricViolation, NotAtLocation, SchemaError, SimWorld, load_world

A = ActionInstance


def sim(world="demo_apartment.json"):
    spec, kb = load_world(world)
    return SimWorld(spec, kb), kb


def test_demo_world_contents():
    spec, kb = load_world("demo_apartment.json")
    assert len(spec.rooms) == 4
    assert len(spec.placement_locations()) == 8
    assert kb.query(Triple("?", "is-a", "apple")) == []
    assert next(o for o in spec.objects if o["id"] == "apple-1")["true_location"] == "cupboard"


def test_demo_building_loads():
    spec, _ = load_world("demo_building.json")
    assert spec.rooms


def test_metric_violation():
    w = {
        "rooms": ["r"],
        "locations": [{"id": a, "class": "table", "room": "r"} for a in "abc"],
        "distances": [["a", "b", 1], ["b", "c", 1], ["a", "c", 5]],
        "robot": {"location": "a"},
    }
    with pytest.raises(MetricViolation):
        load_world(w)


def test_asymmetric_distance():
    w = {
        "rooms": ["r"],
        "locations": [{"id": a, "class": "table", "room": "r"} for a in "ab"],
        "distances": [["a", "b", 1], ["b", "a", 2]],
        "robot": {"location": "a"},
    }
    with pytest.raises(MetricViolation):
        load_world(w)


def test_empty_rooms():
    w = demo_world_dict()
    w["rooms"] = []
    with pytest.raises(SchemaError):
        load_world(w)


def test_bad_object_location():
    w = demo_world_dict()
    w["objects"][0]["true_location"] = "attic"
    with pytest.raises(SchemaError):
        load_world(w)


def test_bad_probability():
    w = demo_world_dict()
    w["skill_model"] = {"pick": {"p_success": 1.5}}
    with pytest.raises(SchemaError):
        load_world(w)


def test_find_success_reveals():
    w, kb = sim()
    assert w.dispatch(A("navigate", ("cupboard",))).ok
    out = w.dispatch(A("find", ("apple", "cupboard")))
    assert out.ok and out.revealed == "apple-1"
    assert Triple("apple-1", "at", "cupboard") in kb


def test_find_absent():
    w, kb = sim()
    w.dispatch(A("navigate", ("counter",)))
    assert str(w.dispatch(A("find", ("apple", "counter")))) == "failed(not-found)"
    assert "apple-1" not in kb.entities


def test_find_elsewhere():
    w, _ = sim()
    with pytest.raises(NotAtLocation):
        w.dispatch(A("find", ("apple", "cupboard")))


def test_navigate_updates_location_and_clock():
    w, _ = sim()
    assert w.dispatch(A("navigate", ("counter",))).ok
    assert w.robot == "counter"
    assert w.clock == 400  # 4 m at 1 m/s in 10 ms ticks


def test_handover():
    w, _ = sim()
    w.dispatch(A("navigate", ("counter",)))
    assert w.dispatch(A("pick", ("coke-1",))).ok
    w.dispatch(A("navigate", ("entrance",)))
    assert w.dispatch(A("handover", ("coke-1", "operator"))).ok
    assert w.truth["coke-1"] == "person:operator"
    assert w.holding is None


def test_pick_with_full_hand():
    w, _ = sim()
    w.dispatch(A("navigate", ("kitchen-table",)))
    assert w.dispatch(A("pick", ("chips-1",))).ok
    assert str(w.dispatch(A("pick", ("pear-1",)))) == "failed(hand-occupied)"


def test_guide_jan_to_bedroom():
    # jan starts in the living room, so the guide leg has somewhere to go
    d = demo_world_dict()
    next(p for p in d["people"] if p["name"] == "jan")["waypoints"] = ["couch-table", "nightstand"]
    w, _ = sim(d)
    w.dispatch(A("navigate", ("couch-table",)))
    assert w.dispatch(A("guide", ("jan", "bedroom"))).ok
    assert w.spec.locations[w.people["jan"]]["room"] == "bedroom"
    assert w.robot == w.people["jan"]


def test_guide_non_compliant():
    d = demo_world_dict()
    next(p for p in d["people"] if p["name"] == "alex")["compliant"] = False
    w, _ = sim(d)
    w.dispatch(A("navigate", ("couch-table",)))
    assert str(w.dispatch(A("guide", ("alex", "kitchen")))) == "failed(person-not-following)"


def test_follow_operator_to_car():
    w, _ = sim()
    assert w.dispatch(A("follow", ("operator",))).ok
    assert w.robot == "car" and w.people["operator"] == "car"


def test_same_seed_same_rolls():
    d = demo_world_dict()
    d["skill_model"] = {"navigate": {"p_success": 0.5}}
    outcomes = []
    for _ in range(2):
        w, _ = sim(copy.deepcopy(d))
        seq = []
        for loc in ["counter", "cupboard", "kitchen-table", "counter", "bookshelf"] * 3:
            if loc != w.robot:
                seq.append(str(w.dispatch(A("navigate", (loc,)))))
        outcomes.append(seq)
    assert outcomes[0] == outcomes[1]
    assert "failed(failed)" in outcomes[0]


ACTIONS = [
    A("navigate", ("counter",)),
    A("navigate", ("kitchen-table",)),
    A("navigate", ("cupboard",)),
    A("navigate", ("entrance",)),
    A("pick", ("coke-1",)),
    A("pick", ("chips-1",)),
    A("pick", ("cereal-1",)),
    A("place", ("coke-1", "kitchen-table")),
    A("place", ("chips-1", "counter")),
    A("place", ("cereal-1", "counter")),
    A("handover", ("coke-1", "operator")),
    A("handover", ("chips-1", "operator")),
]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from(ACTIONS), max_size=25))
def test_conservation(script):
    w, _ = sim()
    ticks = []
    w.on_tick = lambda n: (w.check_conservation(), ticks.append(n))
    for a in script:
        if a.name == "navigate" and a.args[0] == w.robot:
            continue
        w.dispatch(a)
        w.check_conservation()


def test_hidden_facts_stay_out_of_kb():
    w, kb = sim()
    for loc in ["counter", "kitchen-table", "tv-stand"]:
        w.dispatch(A("navigate", (loc,)))
        w.dispatch(A("find", ("apple", loc)))
    assert "apple-1" not in kb.entities
    assert "juice-1" not in kb.entities
