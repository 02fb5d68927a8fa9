"""Semantic policy generation: scene text, prompts, the LLM client, plan parsing
and an offline rule-based planner.

Plans use a fixed line grammar (keywords case-insensitive, ``#`` starts a
comment)::

    RULES:
    - <free text>
    ACTIONS:
    1. PICK obj_3 PLACE NEAR obj_1
    2. PICK obj_1 PLACE GROUP cutlery
    3. PICK obj_2 PLACE AT 0.40 0.25
"""
from __future__ import annotations

import json
import logging
import math
import os
import re
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

from .errors import ConfigError, InvalidArgument, LlmError, LlmUnavailable, ParseFailure
from .scene import SceneState, is_object_id, object_index

log = logging.getLogger(__name__)

MODES = ("object-centric", "direct-coordinates")


@dataclass(frozen=True)
class Near:
    anchor: str


@dataclass(frozen=True)
class Group:
    name: str


@dataclass(frozen=True)
class At:
    x: float
    y: float


Target = Union[Near, Group, At]


@dataclass(frozen=True)
class ActionProposal:
    object_id: str
    target: Target

    def __post_init__(self) -> None:
        if not is_object_id(self.object_id):
            raise InvalidArgument(f"malformed object id {self.object_id!r}")
        if isinstance(self.target, Near):
            if not is_object_id(self.target.anchor):
                raise InvalidArgument(f"malformed anchor id {self.target.anchor!r}")
            if self.target.anchor == self.object_id:
                raise InvalidArgument(f"{self.object_id} cannot be placed near itself")
        elif isinstance(self.target, At):
            if not (math.isfinite(self.target.x) and math.isfinite(self.target.y)):
                raise InvalidArgument("AT coordinates must be finite")
        elif isinstance(self.target, Group):
            if not re.fullmatch(r"[^\s#]+", self.target.name):
                raise InvalidArgument(f"bad group name {self.target.name!r}")
        else:
            raise InvalidArgument(f"unknown target {self.target!r}")

    def to_text(self) -> str:
        t = self.target
        if isinstance(t, Near):
            where = f"NEAR {t.anchor}"
        elif isinstance(t, Group):
            where = f"GROUP {t.name}"
        else:
            where = f"AT {t.x!r} {t.y!r}"
        return f"PICK {self.object_id} PLACE {where}"


@dataclass(frozen=True)
class PlanProposal:
    rules: tuple[str, ...]
    actions: tuple[ActionProposal, ...]
    skipped: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self) -> None:
        if not self.rules or not self.actions:
            raise InvalidArgument("a plan needs at least one rule and one action")


def serialize_plan(plan: PlanProposal) -> str:
    lines = ["RULES:"]
    lines += [f"- {r}" for r in plan.rules]
    lines.append("ACTIONS:")
    lines += [f"{i}. {a.to_text()}" for i, a in enumerate(plan.actions, 1)]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# scene description and prompts


def describe_scene(scene: SceneState) -> str:
    lines = [f"Table: width={scene.table_width:.3f}, depth={scene.table_depth:.3f}"]
    for p in sorted(scene.placements, key=lambda p: object_index(p.id)):
        o = p.object
        lines.append(f"{p.id}: category={o.category}, size={o.width:.3f}x{o.depth:.3f}, at=({p.x:.3f},{p.y:.3f})")
    return "\n".join(lines)


SYSTEM_ROLE = (
    "You are a household robot planner. You rearrange objects on a table so the "
    "result is tidy, and you always answer in the exact output format requested."
)

_GRAMMAR = {
    "object-centric": (
        "Each action moves one object next to related objects. Allowed action lines:\n"
        "<n>. PICK obj_<k> PLACE NEAR obj_<m>   (put obj_<k> next to obj_<m>)\n"
        "<n>. PICK obj_<k> PLACE GROUP <name>   (start or extend the group called <name>)\n"
        "Do not give coordinates; a separate module chooses exact positions."
    ),
    "direct-coordinates": (
        "Each action moves one object to an exact position on the table. Allowed action lines:\n"
        "<n>. PICK obj_<k> PLACE AT <x> <y>   (center of the object, in table units)\n"
        "Positions must keep every object fully on the table and must not overlap other objects."
    ),
}


def build_prompt(
    description: str,
    mode: str = "object-centric",
    sample_solutions: Sequence[str] = (),
    table_width: float = 1.2,
    table_depth: float = 0.8,
) -> str:
    if mode not in MODES:
        raise InvalidArgument(f"mode must be one of {MODES}")
    if len(sample_solutions) > 2:
        raise InvalidArgument("at most two sample solutions are supported")
    parts = [
        "## Task",
        "Tidy up the table. Group objects by their type and function so that related "
        "objects end up together, and leave the table looking orderly.",
        f"The table is a rectangle from (0, 0) to ({table_width:.3f}, {table_depth:.3f}); "
        "x grows to the right and y grows away from the viewer.",
        "",
        "## Action format",
        _GRAMMAR[mode],
        "",
        "## Output format",
        "First list the high-level organization rules you will follow, then the actions:",
        "RULES:",
        "- <one rule per line>",
        "ACTIONS:",
        "1. <action line>",
        "Write nothing else.",
        "",
        "## Scene",
        description,
    ]
    if sample_solutions:
        parts += ["", "## Examples of preferred solutions"]
        for i, s in enumerate(sample_solutions, 1):
            parts += [f"### Example {i}", s.strip()]
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# LLM client


@dataclass(frozen=True)
class LlmConfig:
    base_url: str
    model_name: str = "gpt-4"
    api_key_env: str = "TIDY_LLM_API_KEY"
    timeout_seconds: float = 60.0
    max_retries: int = 2
    temperature: float = 0.0
    backoff_seconds: float = 1.0

    def __post_init__(self) -> None:
        if self.max_retries < 0 or self.timeout_seconds <= 0:
            raise InvalidArgument("max_retries must be >= 0 and timeout_seconds > 0")


class LlmClient:
    """Blocking client for an OpenAI-compatible chat-completion endpoint."""

    def __init__(self, config: LlmConfig, sleep: Callable[[float], None] = time.sleep):
        self.config = config
        self.sleep = sleep
        self.retries = 0

    def _url(self) -> str:
        base = self.config.base_url.rstrip("/")
        return base if base.endswith("/chat/completions") else base + "/chat/completions"

    def complete(self, prompt: str) -> str:
        cfg = self.config
        key = os.environ.get(cfg.api_key_env)
        if not key:
            raise ConfigError(f"environment variable {cfg.api_key_env} is not set")
        body = json.dumps(
            {
                "model": cfg.model_name,
                "temperature": cfg.temperature,
                "messages": [
                    {"role": "system", "content": SYSTEM_ROLE},
                    {"role": "user", "content": prompt},
                ],
            }
        ).encode("utf-8")
        self.retries = 0
        while True:
            req = urllib.request.Request(
                self._url(),
                data=body,
                method="POST",
                headers={"Content-Type": "application/json", "Authorization": f"Bearer {key}"},
            )
            try:
                with urllib.request.urlopen(req, timeout=cfg.timeout_seconds) as resp:
                    payload = json.loads(resp.read().decode("utf-8"))
                try:
                    return str(payload["choices"][0]["message"]["content"])
                except (KeyError, IndexError, TypeError) as exc:
                    raise LlmError(200, f"unexpected response shape: {exc}") from exc
            except urllib.error.HTTPError as exc:
                detail = exc.read().decode("utf-8", "replace")
                if exc.code < 500 or self.retries >= cfg.max_retries:
                    raise LlmError(exc.code, detail) from exc
                log.warning("LLM endpoint returned %d, retrying", exc.code)
            except (urllib.error.URLError, TimeoutError, ConnectionError, OSError) as exc:
                if self.retries >= cfg.max_retries:
                    raise LlmUnavailable(f"{self._url()}: {exc}") from exc
                log.warning("LLM transport error %s, retrying", exc)
            self.sleep(cfg.backoff_seconds * 2**self.retries)
            self.retries += 1


def llm_complete(config: LlmConfig, prompt: str) -> str:
    return LlmClient(config).complete(prompt)


# ---------------------------------------------------------------------------
# parsing

_NUM = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"
_ACTION_RE = re.compile(
    r"^\s*\d+\s*[.)]\s*PICK\s+(?P<obj>\S+)\s+PLACE\s+"
    r"(?:NEAR\s+(?P<near>\S+)|GROUP\s+(?P<group>\S+)|AT\s+(?P<x>" + _NUM + r")\s*,?\s+(?P<y>" + _NUM + r"))\s*$",
    re.IGNORECASE,
)
_RULES_RE = re.compile(r"^\s*RULES\s*:\s*$", re.IGNORECASE)
_ACTIONS_RE = re.compile(r"^\s*ACTIONS\s*:\s*$", re.IGNORECASE)
_RULE_LINE_RE = re.compile(r"^\s*[-*]\s*(.*?)\s*$")


def _parse_action(line: str) -> ActionProposal:
    m = _ACTION_RE.match(line)
    if m is None:
        raise InvalidArgument("does not match the action grammar")
    obj = m.group("obj").lower()
    if m.group("near") is not None:
        target: Target = Near(m.group("near").lower())
    elif m.group("group") is not None:
        target = Group(m.group("group"))
    else:
        target = At(float(m.group("x")), float(m.group("y")))
    return ActionProposal(obj, target)


def parse_plan(text: str | bytes) -> PlanProposal:
    """Parse LLM output; malformed action lines are skipped and reported."""
    if isinstance(text, (bytes, bytearray)):
        text = bytes(text).decode("utf-8", "replace")
    section = None
    rules: list[str] = []
    actions: list[ActionProposal] = []
    notes: list[str] = []
    seen_rules = seen_actions = False
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if _RULES_RE.match(line):
            if seen_actions:
                notes.append(f"line {lineno}: RULES section after ACTIONS ignored")
                section = None
            else:
                section, seen_rules = "rules", True
            continue
        if _ACTIONS_RE.match(line):
            if not seen_rules:
                raise ParseFailure("ACTIONS section before RULES section", [f"line {lineno}: {line}"])
            section, seen_actions = "actions", True
            continue
        if section == "rules":
            m = _RULE_LINE_RE.match(line)
            if m and m.group(1):
                rules.append(m.group(1))
            else:
                notes.append(f"line {lineno}: not a rule line: {line!r}")
        elif section == "actions":
            try:
                actions.append(_parse_action(line))
            except (InvalidArgument, ValueError) as exc:
                notes.append(f"line {lineno}: skipped ({exc}): {line!r}")
    if not seen_rules or not seen_actions:
        raise ParseFailure("missing RULES or ACTIONS section", notes)
    if not rules:
        raise ParseFailure("no organization rules found", notes)
    if not actions:
        raise ParseFailure("no valid actions found", notes)
    for n in notes:
        log.info("plan parser: %s", n)
    return PlanProposal(tuple(rules), tuple(actions), tuple(notes))


# ---------------------------------------------------------------------------
# offline planner


def fallback_plan(scene: SceneState) -> PlanProposal:
    """Group by exact category: largest group first, anchor = lowest id."""
    if not scene.placements:
        raise InvalidArgument("cannot plan for an empty scene")
    groups: dict[str, list[str]] = {}
    for p in scene.placements:
        groups.setdefault(p.object.category, []).append(p.id)
    actions = []
    for cat, ids in sorted(groups.items(), key=lambda kv: (-len(kv[1]), kv[0])):
        ids = sorted(ids, key=object_index)
        anchor = ids[0]
        actions.append(ActionProposal(anchor, Group(re.sub(r"[\s#]+", "_", cat))))
        actions += [ActionProposal(o, Near(anchor)) for o in ids[1:]]
    return PlanProposal(("group objects by category",), tuple(actions))
