"""Deterministic 2D tabletop world.

Objects are axis-aligned rectangles identified by ``obj_<k>``.  A
:class:`SceneState` is an immutable value; every mutation returns a new
state.  Coordinates are footprint centers in table units, with the origin
at the table's lower-left corner.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Any, Iterable

from .errors import InvalidArgument, InvalidScene, NotFound, PlacementRejected

DEFAULT_TABLE_WIDTH = 1.2
DEFAULT_TABLE_DEPTH = 0.8

# Geometric slack for float comparisons; shared edges must not read as overlap.
EPS = 1e-9

_ID_RE = re.compile(r"^obj_(0|[1-9][0-9]*)$")


def object_index(object_id: str) -> int:
    """Return ``k`` for an id of the form ``obj_<k>``."""
    m = _ID_RE.match(object_id)
    if m is None:
        raise InvalidArgument(f"malformed object id {object_id!r}")
    return int(m.group(1))


def is_object_id(text: str) -> bool:
    return _ID_RE.match(text) is not None


@dataclass(frozen=True)
class ObjectSpec:
    id: str
    category: str
    width: float
    depth: float

    def __post_init__(self) -> None:
        object_index(self.id)
        if not self.category:
            raise InvalidArgument("category must be a non-empty string")
        if not (self.width > 0 and self.depth > 0):
            raise InvalidArgument(f"{self.id}: footprint must be positive, got {self.width}x{self.depth}")

    @property
    def max_extent(self) -> float:
        return max(self.width, self.depth)


@dataclass(frozen=True)
class Placement:
    object: ObjectSpec
    x: float
    y: float

    @property
    def id(self) -> str:
        return self.object.id

    @property
    def box(self) -> tuple[float, float, float, float]:
        """Footprint as ``(x0, y0, x1, y1)``."""
        hw = self.object.width / 2
        hd = self.object.depth / 2
        return (self.x - hw, self.y - hd, self.x + hw, self.y + hd)

    @property
    def area(self) -> float:
        return self.object.width * self.object.depth


@dataclass(frozen=True)
class SceneState:
    table_width: float
    table_depth: float
    placements: tuple[Placement, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.placements)

    @property
    def ids(self) -> list[str]:
        return [p.id for p in self.placements]

    def find(self, object_id: str) -> Placement | None:
        for p in self.placements:
            if p.id == object_id:
                return p
        return None

    def get(self, object_id: str) -> Placement:
        p = self.find(object_id)
        if p is None:
            raise NotFound(f"object {object_id!r} is not on the table")
        return p

    def canonical(self) -> SceneState:
        """Same scene with placements sorted by object index."""
        ordered = tuple(sorted(self.placements, key=lambda p: object_index(p.id)))
        return SceneState(self.table_width, self.table_depth, ordered)


def new_scene(table_width: float = DEFAULT_TABLE_WIDTH, table_depth: float = DEFAULT_TABLE_DEPTH) -> SceneState:
    if not (table_width > 0 and table_depth > 0):
        raise InvalidArgument(f"table dimensions must be positive, got {table_width}x{table_depth}")
    return SceneState(float(table_width), float(table_depth), ())


def overlaps(a: Placement, b: Placement) -> bool:
    """True iff the open interiors of the two footprints intersect."""
    ax0, ay0, ax1, ay1 = a.box
    bx0, by0, bx1, by1 = b.box
    return (min(ax1, bx1) - max(ax0, bx0) > EPS) and (min(ay1, by1) - max(ay0, by0) > EPS)


def in_bounds(scene: SceneState, p: Placement) -> bool:
    x0, y0, x1, y1 = p.box
    return x0 >= -EPS and y0 >= -EPS and x1 <= scene.table_width + EPS and y1 <= scene.table_depth + EPS


def _rejection(scene: SceneState, obj: ObjectSpec, x: float, y: float) -> tuple[str, str] | None:
    cand = Placement(obj, x, y)
    if not in_bounds(scene, cand):
        return ("out-of-bounds", f"{obj.id} at ({x:.4f}, {y:.4f}) leaves the table")
    for other in scene.placements:
        if other.id != obj.id and overlaps(cand, other):
            return ("collision", f"{obj.id} at ({x:.4f}, {y:.4f}) overlaps {other.id}")
    return None


def collision_free(scene: SceneState, obj: ObjectSpec, x: float, y: float) -> bool:
    """In bounds and clear of every other placement; ``obj``'s own placement is ignored."""
    return _rejection(scene, obj, x, y) is None


def place(scene: SceneState, obj: ObjectSpec, x: float, y: float) -> SceneState:
    """Place ``obj`` at ``(x, y)``, moving it if it is already on the table."""
    why = _rejection(scene, obj, x, y)
    if why is not None:
        raise PlacementRejected(*why)
    new = Placement(obj, float(x), float(y))
    items = list(scene.placements)
    for i, p in enumerate(items):
        if p.id == obj.id:
            items[i] = new
            break
    else:
        items.append(new)
    return SceneState(scene.table_width, scene.table_depth, tuple(items))


def remove(scene: SceneState, object_id: str) -> SceneState:
    kept = tuple(p for p in scene.placements if p.id != object_id)
    if len(kept) == len(scene.placements):
        raise NotFound(f"object {object_id!r} is not on the table")
    return SceneState(scene.table_width, scene.table_depth, kept)


def validate(scene: SceneState) -> None:
    """Raise :class:`InvalidScene` unless every SceneState invariant holds."""
    if not (scene.table_width > 0 and scene.table_depth > 0):
        raise InvalidScene("table dimensions must be positive")
    seen: set[str] = set()
    for p in scene.placements:
        if p.id in seen:
            raise InvalidScene(f"duplicate object id {p.id}")
        seen.add(p.id)
        if p.object.width > scene.table_width + EPS or p.object.depth > scene.table_depth + EPS:
            raise InvalidScene(f"{p.id} is larger than the table")
        if not in_bounds(scene, p):
            raise InvalidScene(f"{p.id} is out of bounds")
    ps = scene.placements
    for i in range(len(ps)):
        for j in range(i + 1, len(ps)):
            if overlaps(ps[i], ps[j]):
                raise InvalidScene(f"{ps[i].id} overlaps {ps[j].id}")


def build_scene(
    table_width: float,
    table_depth: float,
    items: Iterable[tuple[ObjectSpec, float, float]],
) -> SceneState:
    """Assemble a scene from ``(spec, x, y)`` triples and validate it."""
    scene = SceneState(
        float(table_width),
        float(table_depth),
        tuple(Placement(o, float(x), float(y)) for o, x, y in items),
    )
    validate(scene)
    return scene


def scene_to_dict(scene: SceneState) -> dict[str, Any]:
    return {
        "table": {"width": scene.table_width, "depth": scene.table_depth},
        "objects": [
            {
                "id": p.id,
                "category": p.object.category,
                "width": p.object.width,
                "depth": p.object.depth,
                "x": p.x,
                "y": p.y,
            }
            for p in scene.placements
        ],
    }


def scene_from_dict(doc: Any) -> SceneState:
    try:
        table = doc["table"]
        width = float(table["width"])
        depth = float(table["depth"])
        items = []
        for o in doc["objects"]:
            spec = ObjectSpec(str(o["id"]), str(o["category"]), float(o["width"]), float(o["depth"]))
            items.append((spec, float(o["x"]), float(o["y"])))
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidScene(f"malformed scene document: {exc}") from exc
    return build_scene(width, depth, items)


def dumps(scene: SceneState) -> str:
    return json.dumps(scene_to_dict(scene), separators=(",", ":"))


def loads(text: str) -> SceneState:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidScene(f"line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return scene_from_dict(doc)
