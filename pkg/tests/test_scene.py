from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tidyscore import scene as sc
from tidyscore.errors import InvalidArgument, InvalidScene, NotFound, PlacementRejected
from tidyscore.scene import ObjectSpec, Placement

from .conftest import obj


def test_new_scene_stores_bounds():
    s = sc.new_scene(1.2, 0.8)
    assert (s.table_width, s.table_depth) == (1.2, 0.8)
    assert s.placements == ()


@pytest.mark.parametrize("w,d", [(0, 0.8), (1.2, 0), (-1, 1), (float("nan"), 1)])
def test_new_scene_rejects_bad_dimensions(w, d):
    with pytest.raises(InvalidArgument):
        sc.new_scene(w, d)


def test_place_one_object():
    s = sc.place(sc.new_scene(1.2, 0.8), obj(0), 0.3, 0.3)
    assert len(s.placements) == 1


@pytest.mark.parametrize(
    "a,b,expected",
    [
        (Placement(ObjectSpec("obj_0", "c", 0.1, 0.1), 0.5, 0.5), Placement(ObjectSpec("obj_1", "c", 0.1, 0.1), 0.5, 0.5), True),
        (Placement(ObjectSpec("obj_0", "c", 0.1, 0.1), 0.5, 0.5), Placement(ObjectSpec("obj_1", "c", 0.1, 0.1), 0.6, 0.5), False),
        (Placement(ObjectSpec("obj_0", "c", 0.2, 0.2), 0.5, 0.5), Placement(ObjectSpec("obj_1", "c", 0.1, 0.1), 0.55, 0.5), True),
    ],
)
def test_overlaps_examples(a, b, expected):
    assert sc.overlaps(a, b) is expected
    assert sc.overlaps(b, a) is expected


def test_collision_free_examples():
    empty = sc.new_scene(1.2, 0.8)
    assert sc.collision_free(empty, obj(0), 0.6, 0.4)
    assert not sc.collision_free(empty, obj(0), 0.02, 0.4)  # protrudes past x = 0
    blocked = sc.place(empty, obj(1), 0.6, 0.4)
    assert not sc.collision_free(blocked, obj(0), 0.6, 0.4)
    # an object's own placement never blocks it
    assert sc.collision_free(blocked, obj(1), 0.62, 0.4)


def test_place_moves_existing_object_and_keeps_input():
    s1 = sc.place(sc.new_scene(1.2, 0.8), obj(0), 0.3, 0.3)
    s2 = sc.place(s1, obj(0), 0.5, 0.5)
    assert len(s2.placements) == 1
    assert (s2.get("obj_0").x, s2.get("obj_0").y) == (0.5, 0.5)
    assert (s1.get("obj_0").x, s1.get("obj_0").y) == (0.3, 0.3)


def test_place_rejections_carry_reason():
    s = sc.place(sc.new_scene(1.2, 0.8), obj(0), 0.3, 0.3)
    with pytest.raises(PlacementRejected) as e:
        sc.place(s, obj(1), 0.3, 0.3)
    assert e.value.reason == "collision"
    with pytest.raises(PlacementRejected) as e:
        sc.place(s, obj(1), 1.19, 0.3)
    assert e.value.reason == "out-of-bounds"


def test_remove_examples():
    s = sc.place(sc.new_scene(1.2, 0.8), obj(0), 0.3, 0.3)
    assert sc.remove(s, "obj_0").placements == ()
    s3 = sc.build_scene(1.2, 0.8, [(obj(i), 0.1 + 0.2 * i, 0.3) for i in range(3)])
    assert list(sc.remove(s3, "obj_1").ids) == ["obj_0", "obj_2"]
    with pytest.raises(NotFound):
        sc.remove(s3, "obj_9")


def test_place_then_remove_restores_original(row_scene):
    new = ObjectSpec("obj_20", "cup", 0.08, 0.08)
    assert sc.remove(sc.place(row_scene, new, 0.9, 0.7), "obj_20") == row_scene


@pytest.mark.parametrize("bad", ["obj_", "obj_01", "OBJ_1", "obj_-1", "thing", ""])
def test_object_id_grammar(bad):
    with pytest.raises(InvalidArgument):
        ObjectSpec(bad, "can", 0.1, 0.1)


def test_object_larger_than_table_is_invalid():
    with pytest.raises((InvalidArgument, InvalidScene)):
        sc.build_scene(1.2, 0.8, [(ObjectSpec("obj_0", "rug", 1.3, 0.1), 0.6, 0.4)])


def test_json_round_trip(row_scene):
    again = sc.loads(sc.dumps(row_scene))
    assert again == row_scene


def test_schema_example_parses():
    text = '{"table":{"width":1.2,"depth":0.8},"objects":[{"id":"obj_0","category":"can","width":0.06,"depth":0.06,"x":0.10,"y":0.20}]}'
    s = sc.loads(text)
    assert s.get("obj_0").object.category == "can"


@pytest.mark.parametrize(
    "doc",
    [
        # overlapping objects
        {"table": {"width": 1.2, "depth": 0.8}, "objects": [
            {"id": "obj_0", "category": "a", "width": 0.1, "depth": 0.1, "x": 0.5, "y": 0.5},
            {"id": "obj_1", "category": "a", "width": 0.1, "depth": 0.1, "x": 0.52, "y": 0.5}]},
        # duplicate id
        {"table": {"width": 1.2, "depth": 0.8}, "objects": [
            {"id": "obj_0", "category": "a", "width": 0.1, "depth": 0.1, "x": 0.2, "y": 0.5},
            {"id": "obj_0", "category": "a", "width": 0.1, "depth": 0.1, "x": 0.6, "y": 0.5}]},
        # out of bounds
        {"table": {"width": 1.2, "depth": 0.8}, "objects": [
            {"id": "obj_0", "category": "a", "width": 0.1, "depth": 0.1, "x": 0.01, "y": 0.5}]},
        # missing field
        {"table": {"width": 1.2}, "objects": []},
        [],
    ],
)
def test_loader_rejects_invalid_documents(doc):
    with pytest.raises(InvalidScene):
        sc.loads(json.dumps(doc))


def test_loader_reports_line_of_syntax_error():
    with pytest.raises(InvalidScene, match="line 2"):
        sc.loads('{"table":\n{,}}')


# -- property tests ---------------------------------------------------------

placements = st.builds(
    lambda k, w, d, x, y: Placement(ObjectSpec(f"obj_{k}", "c", w, d), x, y),
    st.integers(0, 5),
    st.floats(0.01, 0.3),
    st.floats(0.01, 0.3),
    st.floats(0.0, 1.2),
    st.floats(0.0, 0.8),
)


@given(placements, placements)
def test_overlaps_is_symmetric(a, b):
    assert sc.overlaps(a, b) == sc.overlaps(b, a)


def _check_invariants(s: sc.SceneState) -> None:
    ids = [p.id for p in s.placements]
    assert len(set(ids)) == len(ids)
    for p in s.placements:
        assert sc.in_bounds(s, p)
    for i, a in enumerate(s.placements):
        for b in s.placements[i + 1 :]:
            assert not sc.overlaps(a, b)


def _mutation_run(seed: int, steps: int) -> None:
    rng = np.random.default_rng(seed)
    s = sc.new_scene(1.2, 0.8)
    specs = [ObjectSpec(f"obj_{k}", "c", *rng.uniform(0.02, 0.25, size=2)) for k in range(10)]
    for _ in range(steps):
        o = specs[int(rng.integers(len(specs)))]
        if rng.random() < 0.25 and s.find(o.id) is not None:
            s = sc.remove(s, o.id)
        else:
            x, y = rng.uniform(-0.05, 1.25), rng.uniform(-0.05, 0.85)
            ok = sc.collision_free(s, o, x, y)
            try:
                s = sc.place(s, o, x, y)
                assert ok, "place accepted a move collision_free rejects"
            except PlacementRejected:
                assert not ok, "place rejected a move collision_free accepts"
        _check_invariants(s)


def test_ten_thousand_mutation_sequences():
    """Scene invariants survive 10,000 random place/remove sequences."""
    for seed in range(10_000):
        _mutation_run(seed, 8)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_mutation_sequences_hypothesis(seed):
    _mutation_run(seed, 30)
