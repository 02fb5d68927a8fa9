"""Analytic disorder metric used as an independent yardstick in tests and evaluation.

It is never used for training.  All terms depend on relative positions only,
so the report is invariant to translating the whole scene and to the order of
the placement list.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .scene import Placement, SceneState

ALIGNMENT_WEIGHT = 1.0
SPREAD_WEIGHT = 0.5
OVERLAP_WEIGHT = 2.0


@dataclass(frozen=True)
class DisorderReport:
    alignment: float
    spread_excess: float
    intergroup_overlap: float

    @property
    def total(self) -> float:
        return (
            ALIGNMENT_WEIGHT * self.alignment
            + SPREAD_WEIGHT * self.spread_excess
            + OVERLAP_WEIGHT * self.intergroup_overlap
        )

    def as_dict(self) -> dict[str, float]:
        return {
            "alignment": self.alignment,
            "spread_excess": self.spread_excess,
            "intergroup_overlap": self.intergroup_overlap,
            "total": self.total,
        }


def groups(scene: SceneState) -> dict[str, list[Placement]]:
    """Placements by category, members sorted by id, categories sorted by name."""
    out: dict[str, list[Placement]] = {}
    for p in sorted(scene.placements, key=lambda p: p.id):
        out.setdefault(p.object.category, []).append(p)
    return dict(sorted(out.items()))


def _group_box(members: list[Placement]) -> tuple[float, float, float, float]:
    """Bounding box of member centers; zero-area for singletons and perfect rows."""
    xy = np.array([(m.x, m.y) for m in members])
    return (xy[:, 0].min(), xy[:, 1].min(), xy[:, 0].max(), xy[:, 1].max())


def _box_area(b) -> float:
    return max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])


def disorder(scene: SceneState) -> DisorderReport:
    grouped = groups(scene)
    alignment = 0.0
    spread_excess = 0.0
    for members in grouped.values():
        if len(members) < 2:
            continue
        xy = np.array([(m.x, m.y) for m in members])
        alignment += float(min(xy[:, 0].var(), xy[:, 1].var()))
        diffs = xy[:, None, :] - xy[None, :, :]
        dist = np.sqrt((diffs**2).sum(axis=-1))
        n = len(members)
        spread = float(dist[np.triu_indices(n, k=1)].mean())
        ideal = (n - 1) * float(np.mean([m.object.max_extent for m in members]))
        spread_excess += max(0.0, spread - ideal)

    overlap = 0.0
    boxes = [_group_box(m) for m in grouped.values()]
    for a, b in itertools.combinations(boxes, 2):
        area_a, area_b = _box_area(a), _box_area(b)
        smaller = min(area_a, area_b)
        if smaller <= 0.0:
            continue
        inter = (
            max(0.0, min(a[2], b[2]) - max(a[0], b[0])),
            max(0.0, min(a[3], b[3]) - max(a[1], b[1])),
        )
        overlap += inter[0] * inter[1] / smaller
    return DisorderReport(alignment, spread_excess, float(overlap))
