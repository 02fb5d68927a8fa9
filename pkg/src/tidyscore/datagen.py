"""Synthetic preference data from two-stage random walks.

A trajectory starts from a tidy template layout.  The global stage moves one
uniformly chosen object to a uniformly random collision-free spot per step,
so earlier states are labeled tidier than later ones.  The local stage takes
each pre-move state and nudges the object that is about to be moved by a
small random offset, giving contrastive pairs that differ by one object.
"""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptDataset, DanglingReference, InvalidArgument, LayoutInfeasible
from .scene import (
    DEFAULT_TABLE_DEPTH,
    DEFAULT_TABLE_WIDTH,
    ObjectSpec,
    Placement,
    SceneState,
    collision_free,
    place,
    scene_from_dict,
    scene_to_dict,
)

FORMAT_VERSION = 1
TEMPLATES = ("rows", "grid", "edges")

ROW_GAP = 0.02
ROW_STACK_GAP = 0.06
BLOCK_GAP = 0.06
EDGE_MARGIN = 0.02
JITTER_RETRIES = 100

WALK_POSITION_TRIES = 100
WALK_REPICKS = 10
LOCAL_TRIES = 20
LOCAL_MIN_SHIFT = 0.02
LOCAL_MAX_SHIFT = 0.08

# category -> (width, depth); members of one category share a footprint
CATALOG: dict[str, tuple[float, float]] = {
    "can": (0.06, 0.06),
    "cup": (0.08, 0.08),
    "fork": (0.03, 0.14),
    "knife": (0.03, 0.16),
    "book": (0.12, 0.08),
    "plate": (0.12, 0.12),
    "snack": (0.10, 0.06),
    "fruit": (0.07, 0.07),
}

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def split_seed(master_seed: int, index: int) -> int:
    """The ``index + 1``-th output of a SplitMix64 stream seeded with ``master_seed``."""
    return _mix64((master_seed + (index + 1) * _GOLDEN) & _MASK64)


# ---------------------------------------------------------------------------
# rosters and tidy templates


def sample_roster(
    rng: np.random.Generator,
    n_objects: tuple[int, int] = (8, 12),
    n_categories: tuple[int, int] = (2, 3),
) -> list[ObjectSpec]:
    """Random object roster; ids are shuffled across categories."""
    n = int(rng.integers(n_objects[0], n_objects[1] + 1))
    k = int(rng.integers(n_categories[0], n_categories[1] + 1))
    names = sorted(CATALOG)
    cats = [names[i] for i in rng.choice(len(names), size=k, replace=False)]
    counts = [n // k + (1 if i < n % k else 0) for i in range(k)]
    members = [c for c, m in zip(cats, counts) for _ in range(m)]
    order = rng.permutation(n)
    roster = []
    for slot, idx in enumerate(order):
        cat = members[idx]
        w, d = CATALOG[cat]
        roster.append(ObjectSpec(f"obj_{slot}", cat, w, d))
    return roster


def _by_category(roster: list[ObjectSpec]) -> list[list[ObjectSpec]]:
    out: dict[str, list[ObjectSpec]] = {}
    for o in roster:
        out.setdefault(o.category, []).append(o)
    return list(out.values())


def _strip(members: list[ObjectSpec], horizontal: bool) -> tuple[float, float]:
    """Length and thickness of a one-line strip with ROW_GAP spacing."""
    if horizontal:
        return sum(o.width for o in members) + ROW_GAP * (len(members) - 1), max(o.depth for o in members)
    return sum(o.depth for o in members) + ROW_GAP * (len(members) - 1), max(o.width for o in members)


def _rows_layout(cats, W, D, rng):
    dims = [_strip(m, True) for m in cats]
    total_h = sum(h for _, h in dims) + ROW_STACK_GAP * (len(cats) - 1)
    if max(l for l, _ in dims) > W or total_h > D:
        return None
    y = rng.uniform(0.0, D - total_h)
    items = []
    for members, (length, height) in zip(cats, dims):
        x = rng.uniform(0.0, W - length)
        for o in members:
            items.append((o, x + o.width / 2, y + height / 2))
            x += o.width + ROW_GAP
        y += height + ROW_STACK_GAP
    return items


def _grid_layout(cats, W, D, rng):
    blocks = []
    for members in cats:
        cols = math.ceil(math.sqrt(len(members)))
        rows = math.ceil(len(members) / cols)
        cw = max(o.width for o in members)
        cd = max(o.depth for o in members)
        blocks.append((cols, rows, cw, cd, cols * cw + (cols - 1) * ROW_GAP, rows * cd + (rows - 1) * ROW_GAP))
    total_w = sum(b[4] for b in blocks) + BLOCK_GAP * (len(blocks) - 1)
    if total_w > W or max(b[5] for b in blocks) > D:
        return None
    x = rng.uniform(0.0, W - total_w)
    items = []
    for members, (cols, rows, cw, cd, bw, bh) in zip(cats, blocks):
        y = rng.uniform(0.0, D - bh)
        for i, o in enumerate(members):
            r, c = divmod(i, cols)
            items.append((o, x + c * (cw + ROW_GAP) + cw / 2, y + r * (cd + ROW_GAP) + cd / 2))
        x += bw + BLOCK_GAP
    return items


def _edges_layout(cats, W, D, rng):
    items = []
    for i, members in enumerate(cats):
        edge = i % 4  # bottom, top, left, right
        horizontal = edge < 2
        length, thick = _strip(members, horizontal)
        span = W if horizontal else D
        if length > span - 2 * EDGE_MARGIN:
            return None
        pos = rng.uniform(EDGE_MARGIN, span - EDGE_MARGIN - length)
        if edge == 0:
            fixed = EDGE_MARGIN + thick / 2
        elif edge == 1:
            fixed = D - EDGE_MARGIN - thick / 2
        elif edge == 2:
            fixed = EDGE_MARGIN + thick / 2
        else:
            fixed = W - EDGE_MARGIN - thick / 2
        for o in members:
            if horizontal:
                items.append((o, pos + o.width / 2, fixed))
                pos += o.width + ROW_GAP
            else:
                items.append((o, fixed, pos + o.depth / 2))
                pos += o.depth + ROW_GAP
    return items


_LAYOUTS = {"rows": _rows_layout, "grid": _grid_layout, "edges": _edges_layout}


def make_tidy_scene(
    template_id: str,
    roster: list[ObjectSpec],
    rng: np.random.Generator,
    table_width: float = DEFAULT_TABLE_WIDTH,
    table_depth: float = DEFAULT_TABLE_DEPTH,
) -> SceneState:
    """Lay the roster out in a tidy template, grouped by category.

    Raises :class:`LayoutInfeasible` if no jittered layout fits within
    ``JITTER_RETRIES`` attempts.
    """
    if template_id not in _LAYOUTS:
        raise InvalidArgument(f"unknown template {template_id!r}; expected one of {TEMPLATES}")
    empty = SceneState(float(table_width), float(table_depth), ())
    if not roster:
        return empty
    cats = _by_category(roster)
    for _ in range(JITTER_RETRIES):
        items = _LAYOUTS[template_id](cats, table_width, table_depth, rng)
        if items is None:
            continue
        scene = empty
        for o, x, y in items:
            if not collision_free(scene, o, x, y):
                break
            scene = place(scene, o, x, y)
        else:
            # keep roster order so ids read naturally
            order = {o.id: i for i, o in enumerate(roster)}
            return SceneState(
                scene.table_width,
                scene.table_depth,
                tuple(sorted(scene.placements, key=lambda p: order[p.id])),
            )
    raise LayoutInfeasible(f"{template_id} layout of {len(roster)} objects does not fit after {JITTER_RETRIES} tries")


# ---------------------------------------------------------------------------
# random walks


@dataclass
class Trajectory:
    states: list[SceneState]
    moved_ids: list[str] = field(default_factory=list)
    # step t >= 1 -> variants of states[t - 1] with moved_ids[t - 1] nudged
    local_variants: dict[int, list[SceneState]] = field(default_factory=dict)
    index: int = 0
    template: str = ""

    def __len__(self) -> int:
        return len(self.states)


def _uniform_spot(scene: SceneState, obj: ObjectSpec, rng: np.random.Generator) -> tuple[float, float] | None:
    for _ in range(WALK_POSITION_TRIES):
        x = rng.uniform(obj.width / 2, scene.table_width - obj.width / 2)
        y = rng.uniform(obj.depth / 2, scene.table_depth - obj.depth / 2)
        if collision_free(scene, obj, x, y):
            return float(x), float(y)
    return None


def relocate(scene: SceneState, rng: np.random.Generator) -> tuple[SceneState, str] | None:
    """Move one uniformly chosen object to a uniform collision-free spot."""
    for _ in range(1 + WALK_REPICKS):
        p = scene.placements[int(rng.integers(len(scene.placements)))]
        spot = _uniform_spot(scene, p.object, rng)
        if spot is not None:
            return place(scene, p.object, *spot), p.id
    return None


def global_walk(tidy_scene: SceneState, steps: int, rng: np.random.Generator, index: int = 0) -> Trajectory:
    if steps < 0:
        raise InvalidArgument("steps must be non-negative")
    traj = Trajectory([tidy_scene], index=index)
    if not tidy_scene.placements:
        return traj
    scene = tidy_scene
    for _ in range(steps):
        moved = relocate(scene, rng)
        if moved is None:
            break
        scene, oid = moved
        traj.states.append(scene)
        traj.moved_ids.append(oid)
    return traj


def local_disturb(trajectory: Trajectory, variants: int, rng: np.random.Generator) -> Trajectory:
    """Fill ``trajectory.local_variants`` in place and return it."""
    trajectory.local_variants = {}
    for t in range(1, len(trajectory.states)):
        base = trajectory.states[t - 1]
        p = base.get(trajectory.moved_ids[t - 1])
        out = []
        for _ in range(variants):
            for _ in range(LOCAL_TRIES):
                theta = rng.uniform(0.0, 2.0 * math.pi)
                r = rng.uniform(LOCAL_MIN_SHIFT, LOCAL_MAX_SHIFT)
                x = p.x + r * math.cos(theta)
                y = p.y + r * math.sin(theta)
                if collision_free(base, p.object, x, y):
                    out.append(place(base, p.object, x, y))
                    break
        trajectory.local_variants[t] = out
    return trajectory


def scatter(scene: SceneState, fraction: float, rng: np.random.Generator) -> SceneState:
    """Move ``round(fraction * n)`` distinct objects to uniform random spots."""
    n = len(scene.placements)
    count = int(round(fraction * n))
    chosen = rng.choice(n, size=count, replace=False) if count else []
    for i in sorted(int(c) for c in chosen):
        obj = scene.placements[i].object
        spot = _uniform_spot(scene, obj, rng)
        if spot is not None:
            scene = place(scene, obj, *spot)
    return scene


# ---------------------------------------------------------------------------
# pair selection


@dataclass(frozen=True)
class PreferencePair:
    tidier: str
    messier: str
    provenance: str
    trajectory: int
    t_tidier: int
    t_messier: int

    @property
    def gap(self) -> int:
        return self.t_messier - self.t_tidier

    def to_dict(self) -> dict:
        return {
            "tidier": self.tidier,
            "messier": self.messier,
            "provenance": self.provenance,
            "trajectory": self.trajectory,
            "t_tidier": self.t_tidier,
            "t_messier": self.t_messier,
        }

    @classmethod
    def from_dict(cls, d: dict) -> PreferencePair:
        prov = d["provenance"]
        if prov not in ("global", "local"):
            raise ValueError(f"unknown provenance {prov!r}")
        return cls(
            str(d["tidier"]),
            str(d["messier"]),
            prov,
            int(d["trajectory"]),
            int(d["t_tidier"]),
            int(d["t_messier"]),
        )


def state_id(trajectory: int, t: int) -> str:
    return f"t{trajectory}_s{t}"


def variant_id(trajectory: int, t: int, j: int) -> str:
    return f"t{trajectory}_v{t}_{j}"


def schedule_gaps(t: int) -> tuple[int, int, int]:
    g = max(1, t // 3)
    return (g, 2 * g, 4 * g)


def select_pairs(trajectory: Trajectory) -> list[PreferencePair]:
    """Dense comparisons early in the walk, sparser later, plus local pairs."""
    i = trajectory.index
    last = len(trajectory.states) - 1
    pairs = []
    for t in range(last + 1):
        for gap in schedule_gaps(t):
            if t + gap <= last:
                pairs.append(PreferencePair(state_id(i, t), state_id(i, t + gap), "global", i, t, t + gap))
    for t in sorted(trajectory.local_variants):
        for j in range(len(trajectory.local_variants[t])):
            pairs.append(PreferencePair(state_id(i, t - 1), variant_id(i, t, j), "local", i, t - 1, t))
    return pairs


# ---------------------------------------------------------------------------
# dataset


@dataclass(frozen=True)
class DatasetMeta:
    master_seed: int
    trajectory_count: int
    walk_steps: int = 12
    variants_per_step: int = 4
    templates: tuple[str, ...] = ("rows", "grid")
    objects: tuple[int, int] = (8, 12)
    categories: tuple[int, int] = (2, 3)
    format_version: int = FORMAT_VERSION

    def __post_init__(self) -> None:
        if not (0 <= self.master_seed <= _MASK64):
            raise InvalidArgument("master_seed must be an unsigned 64-bit integer")
        if self.trajectory_count < 0 or self.walk_steps < 1 or self.variants_per_step < 0:
            raise InvalidArgument("trajectory_count >= 0, walk_steps >= 1, variants_per_step >= 0 required")
        if not self.templates or any(t not in TEMPLATES for t in self.templates):
            raise InvalidArgument(f"templates must be a non-empty subset of {TEMPLATES}")
        if not (1 <= self.objects[0] <= self.objects[1]) or not (1 <= self.categories[0] <= self.categories[1]):
            raise InvalidArgument("object and category ranges must be positive and ordered")
        if self.format_version != FORMAT_VERSION:
            raise InvalidArgument(f"unsupported dataset format version {self.format_version}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["templates"] = list(self.templates)
        d["objects"] = list(self.objects)
        d["categories"] = list(self.categories)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> DatasetMeta:
        return cls(
            master_seed=int(d["master_seed"]),
            trajectory_count=int(d["trajectory_count"]),
            walk_steps=int(d["walk_steps"]),
            variants_per_step=int(d["variants_per_step"]),
            templates=tuple(d["templates"]),
            objects=tuple(d.get("objects", (8, 12))),
            categories=tuple(d.get("categories", (2, 3))),
            format_version=int(d["format_version"]),
        )


def build_trajectory(meta: DatasetMeta, index: int) -> Trajectory:
    rng = np.random.default_rng(split_seed(meta.master_seed, index))
    roster = sample_roster(rng, meta.objects, meta.categories)
    template = meta.templates[int(rng.integers(len(meta.templates)))]
    tidy = make_tidy_scene(template, roster, rng)
    traj = global_walk(tidy, meta.walk_steps, rng, index=index)
    traj.template = template
    return local_disturb(traj, meta.variants_per_step, rng)


def _scene_line(scene_id: str, scene: SceneState) -> str:
    return json.dumps({"scene_id": scene_id, "scene": scene_to_dict(scene)}, separators=(",", ":"))


def _trajectory_lines(args: tuple[DatasetMeta, int]) -> tuple[list[str], list[str]]:
    meta, index = args
    traj = build_trajectory(meta, index)
    scenes = [_scene_line(state_id(index, t), s) for t, s in enumerate(traj.states)]
    for t in sorted(traj.local_variants):
        scenes += [_scene_line(variant_id(index, t, j), v) for j, v in enumerate(traj.local_variants[t])]
    pairs = [json.dumps(p.to_dict(), separators=(",", ":")) for p in select_pairs(traj)]
    return scenes, pairs


def generate_dataset(meta: DatasetMeta, out_dir: str | os.PathLike, workers: int = 1) -> Path:
    """Write ``meta.json``, ``scenes.jsonl`` and ``pairs.jsonl`` under ``out_dir``.

    Output is byte-identical for any ``workers`` value; trajectories are
    merged in ascending index order.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "meta.json").write_text(json.dumps(meta.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    jobs = [(meta, i) for i in range(meta.trajectory_count)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_trajectory_lines, jobs, chunksize=8))
    else:
        results = [_trajectory_lines(j) for j in jobs]
    seen: set[str] = set()
    with open(out / "scenes.jsonl", "w", encoding="utf-8", newline="\n") as fs, open(
        out / "pairs.jsonl", "w", encoding="utf-8", newline="\n"
    ) as fp:
        for scene_lines, pair_lines in results:
            for line in scene_lines:
                sid = line[len('{"scene_id":"') : line.index('"', len('{"scene_id":"'))]
                if sid in seen:
                    continue
                seen.add(sid)
                fs.write(line + "\n")
            for line in pair_lines:
                fp.write(line + "\n")
    return out


@dataclass
class Dataset:
    meta: DatasetMeta
    scenes: dict[str, SceneState]
    pairs: list[PreferencePair]

    @property
    def trajectories(self) -> list[int]:
        return sorted({p.trajectory for p in self.pairs})

    def scene(self, scene_id: str) -> SceneState:
        try:
            return self.scenes[scene_id]
        except KeyError:
            raise DanglingReference(f"pair references unknown scene {scene_id!r}") from None


def load_dataset(path: str | os.PathLike) -> Dataset:
    root = Path(path)
    try:
        meta = DatasetMeta.from_dict(json.loads((root / "meta.json").read_text(encoding="utf-8")))
    except FileNotFoundError:
        raise
    except (ValueError, KeyError, TypeError, InvalidArgument) as exc:
        raise CorruptDataset(f"{root / 'meta.json'}: {exc}") from exc
    scenes: dict[str, SceneState] = {}
    pairs: list[PreferencePair] = []
    for name, sink in (("scenes.jsonl", "scenes"), ("pairs.jsonl", "pairs")):
        f = root / name
        if not f.exists():
            if meta.trajectory_count == 0:
                continue
            raise CorruptDataset(f"{f} is missing")
        with open(f, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    doc = json.loads(line)
                    if sink == "scenes":
                        scenes[str(doc["scene_id"])] = scene_from_dict(doc["scene"])
                    else:
                        pairs.append(PreferencePair.from_dict(doc))
                except Exception as exc:
                    raise CorruptDataset(f"{f}:{lineno}: {exc}") from exc
    for p in pairs:
        for sid in (p.tidier, p.messier):
            if sid not in scenes:
                raise DanglingReference(f"pair references unknown scene {sid!r}")
    return Dataset(meta, scenes, pairs)
