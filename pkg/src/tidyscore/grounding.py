"""Turning object-centric actions into exact collision-free placements.

For ``score`` grounding, candidates are drawn around the action's anchor,
each candidate scene is rendered and scored, and the highest-scoring one
wins.  Under a Bradley-Terry head this is the same choice as minimizing the
probability that the current image is tidier than the candidate image.
``collision-only`` grounding takes the first feasible candidate.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import GroundingInfeasible, InvalidArgument, MissingAnchor, PlacementRejected
from .planner import ActionProposal, At, Group, Near, PlanProposal
from .raster import rasterize
from .scene import SceneState, collision_free, place
from .scorer import ScorerModel, score_images

log = logging.getLogger(__name__)

STRATEGIES = ("score", "collision-only")
SIGMA_GROWTH_EVERY = 8


@dataclass(frozen=True)
class GroundedAction:
    object_id: str
    x: float
    y: float
    z: float = 0.0

    def to_dict(self) -> dict:
        return {"object": self.object_id, "x": self.x, "y": self.y, "z": self.z}


@dataclass(frozen=True)
class GroundingConfig:
    strategy: str = "score"
    samples: int = 64
    sigma_initial_factor: float = 1.5
    sigma_growth: float = 1.5
    max_attempts: int = 512
    seed: int = 0

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise InvalidArgument(f"strategy must be one of {STRATEGIES}")
        if self.samples < 1 or self.max_attempts < 1:
            raise InvalidArgument("samples and max_attempts must be >= 1")
        if self.sigma_initial_factor <= 0 or self.sigma_growth <= 1:
            raise InvalidArgument("sigma_initial_factor must be > 0 and sigma_growth > 1")


@dataclass
class GroundingResult:
    action: GroundedAction
    candidates: list[tuple[float, float]]
    scores: list[float] | None
    chosen: int
    current_score: float | None = None


def _quadrant_center(scene: SceneState, ignore: str) -> tuple[float, float]:
    """Center of the least-occupied quadrant; ties go to the lowest index.

    Quadrants are numbered row-major from the origin: (low x, low y),
    (high x, low y), (low x, high y), (high x, high y).
    """
    hw, hd = scene.table_width / 2, scene.table_depth / 2
    quads = [(0.0, 0.0), (hw, 0.0), (0.0, hd), (hw, hd)]
    occ = []
    for qx, qy in quads:
        area = 0.0
        for p in scene.placements:
            if p.id == ignore:
                continue
            x0, y0, x1, y1 = p.box
            area += max(0.0, min(x1, qx + hw) - max(x0, qx)) * max(0.0, min(y1, qy + hd) - max(y0, qy))
        occ.append(area)
    best = int(np.argmin(occ))
    return quads[best][0] + hw / 2, quads[best][1] + hd / 2


def anchor_of(
    scene: SceneState, action: ActionProposal, group_registry: dict[str, list[str]] | None = None
) -> tuple[float, float]:
    t = action.target
    if isinstance(t, Near):
        p = scene.find(t.anchor)
        if p is None:
            raise MissingAnchor(f"anchor {t.anchor} is not on the table")
        return (p.x, p.y)
    if isinstance(t, Group):
        members = [
            scene.get(m)
            for m in (group_registry or {}).get(t.name, [])
            if m != action.object_id and scene.find(m) is not None
        ]
        if members:
            return (float(np.mean([m.x for m in members])), float(np.mean([m.y for m in members])))
        return _quadrant_center(scene, action.object_id)
    return (t.x, t.y)


def _sigma(scene: SceneState, action: ActionProposal, config: GroundingConfig) -> float:
    obj = scene.get(action.object_id).object
    extent = obj.max_extent / 2
    if isinstance(action.target, Near):
        anchor = scene.find(action.target.anchor)
        if anchor is not None:
            extent += anchor.object.max_extent / 2
    return config.sigma_initial_factor * extent


def sample_candidates(
    scene: SceneState,
    object_id: str,
    anchor: tuple[float, float],
    config: GroundingConfig,
    rng: np.random.Generator,
    sigma: float | None = None,
    limit: int | None = None,
) -> list[tuple[float, float]]:
    """Gaussian draws around ``anchor`` whose spread widens after repeated rejections."""
    obj = scene.get(object_id).object
    if sigma is None:
        sigma = config.sigma_initial_factor * obj.max_extent / 2
    want = config.samples if limit is None else min(limit, config.samples)
    out: list[tuple[float, float]] = []
    misses = 0
    for _ in range(config.max_attempts):
        dx, dy = rng.normal(0.0, sigma, size=2)
        x, y = float(anchor[0] + dx), float(anchor[1] + dy)
        if collision_free(scene, obj, x, y):
            out.append((x, y))
            misses = 0
            if len(out) >= want:
                break
        else:
            misses += 1
            if misses % SIGMA_GROWTH_EVERY == 0:
                sigma *= config.sigma_growth
    if not out:
        raise GroundingInfeasible(f"no collision-free spot for {object_id} after {config.max_attempts} attempts")
    return out


def ground_with_trace(
    model: ScorerModel | None,
    scene: SceneState,
    action: ActionProposal,
    config: GroundingConfig,
    rng: np.random.Generator,
    group_registry: dict[str, list[str]] | None = None,
) -> GroundingResult:
    anchor = anchor_of(scene, action, group_registry)
    obj = scene.get(action.object_id).object
    sigma = _sigma(scene, action, config)
    if config.strategy == "collision-only":
        cands = sample_candidates(scene, action.object_id, anchor, config, rng, sigma, limit=1)
        x, y = cands[0]
        return GroundingResult(GroundedAction(action.object_id, x, y), cands, None, 0)
    if model is None:
        raise InvalidArgument("score grounding needs a scorer model")
    cands = sample_candidates(scene, action.object_id, anchor, config, rng, sigma)
    images = [rasterize(scene)] + [rasterize(place(scene, obj, x, y)) for x, y in cands]
    s = score_images(model, images)
    current, scores = float(s[0]), s[1:]
    best = int(np.argmax(scores))  # first maximum on ties
    x, y = cands[best]
    return GroundingResult(GroundedAction(action.object_id, x, y), cands, scores.tolist(), best, current)


def ground(
    model: ScorerModel | None,
    scene: SceneState,
    action: ActionProposal,
    config: GroundingConfig,
    rng: np.random.Generator,
    group_registry: dict[str, list[str]] | None = None,
) -> GroundedAction:
    return ground_with_trace(model, scene, action, config, rng, group_registry).action


@dataclass
class EpisodeResult:
    actions: list[GroundedAction]
    final_scene: SceneState
    trace: list[dict] = field(default_factory=list)
    skipped: list[dict] = field(default_factory=list)

    def plan_json(self) -> dict:
        return {"actions": [a.to_dict() for a in self.actions], "skipped": self.skipped}

    def trace_jsonl(self) -> str:
        return "".join(json.dumps(r, separators=(",", ":")) + "\n" for r in self.trace)


def tidy_episode(
    scene: SceneState,
    plan: PlanProposal,
    model: ScorerModel | None,
    config: GroundingConfig,
) -> EpisodeResult:
    """Ground and apply the plan's actions in order; failures are skipped and logged."""
    rng = np.random.default_rng(config.seed)
    registry: dict[str, list[str]] = {}
    result = EpisodeResult([], scene)
    for i, action in enumerate(plan.actions):
        record: dict = {"index": i, "object": action.object_id, "action": action.to_text()}
        current = result.final_scene
        try:
            placement = current.find(action.object_id)
            if placement is None:
                raise MissingAnchor(f"{action.object_id} is not on the table")
            if isinstance(action.target, At):
                x, y = action.target.x, action.target.y
                if not collision_free(current, placement.object, x, y):
                    raise PlacementRejected("infeasible-coordinates", f"({x}, {y}) collides or leaves the table")
                grounded = GroundedAction(action.object_id, float(x), float(y))
                record.update(candidates=[[x, y]], scores=None, chosen=0)
            else:
                g = ground_with_trace(model, current, action, config, rng, registry)
                grounded = g.action
                record.update(
                    candidates=[list(c) for c in g.candidates],
                    scores=g.scores,
                    chosen=g.chosen,
                    current_score=g.current_score,
                    chosen_score=None if g.scores is None else g.scores[g.chosen],
                )
            result.final_scene = place(current, placement.object, grounded.x, grounded.y)
            result.actions.append(grounded)
            if isinstance(action.target, Group):
                registry.setdefault(action.target.name, []).append(action.object_id)
            record.update(status="applied", x=grounded.x, y=grounded.y)
        except (GroundingInfeasible, MissingAnchor, PlacementRejected) as exc:
            reason = getattr(exc, "reason", None) or _reason(exc)
            log.info("action %d (%s) skipped: %s", i, action.to_text(), exc)
            result.skipped.append({"object": action.object_id, "reason": reason})
            record.update(status="skipped", reason=reason, detail=str(exc))
        result.trace.append(record)
    return result


def _reason(exc: Exception) -> str:
    if isinstance(exc, GroundingInfeasible):
        return "grounding-infeasible"
    if isinstance(exc, MissingAnchor):
        return "missing-anchor"
    return "rejected"


def preference_choice(current_score: float, candidate_scores: list[float]) -> int:
    """Index minimizing P[current tidier than candidate]; first minimum on ties.

    Ranks by the log-probability, which stays strictly monotone long after
    the probability itself has rounded to 1.0.
    """
    log_p = nn.log_sigmoid(current_score - np.asarray(candidate_scores, dtype=np.float64))
    return int(np.argmin(np.atleast_1d(log_p)))
