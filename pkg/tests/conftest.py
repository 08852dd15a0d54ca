import copy
import json
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from homebot.world import data_path, load_world  # noqa: E402

# kitchen placement locations by travel cost from the entrance
KITCHEN_ORDER = ["counter", "kitchen-table", "cupboard"]


def demo_world_dict() -> dict:
    return json.loads(data_path("worlds", "demo_apartment.json").read_text())


def apple_world(k: int | None) -> dict:
    """Demo apartment with the apple at the k-th cheapest kitchen location, or nowhere."""
    w = copy.deepcopy(demo_world_dict())
    w["objects"] = [o for o in w["objects"] if o["id"] != "apple-1"]
    if k is not None:
        w["objects"].append({"id": "apple-1", "class": "apple", "true_location": KITCHEN_ORDER[k - 1], "known": False})
    return w


@pytest.fixture
def demo():
    return load_world("demo_apartment.json")


@pytest.fixture
def demo_kb(demo):
    return demo[1]
