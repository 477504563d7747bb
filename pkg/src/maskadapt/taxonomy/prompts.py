"""Reference, training and editing prompt construction.

Every builder returns a plain list of tags formed by concatenating cluster
slices in a fixed order; tags inside a slice keep their input order.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field

from .clusters import SemanticClusters
from .table import PromptConstants, Taxonomy

logger = logging.getLogger(__name__)

REFERENCE_KINDS = ("orig", "full", "upper", "portrait")
EDIT_TASKS = ("body_motion", "posture_view", "expression", "scene", "pose_cond")

# reference image each editing task is evaluated against
TASK_REFERENCE = {
    "body_motion": "orig",
    "posture_view": "full",
    "expression": "portrait",
    "scene": "full",
    "pose_cond": "full",
}


class MissingClusterError(ValueError):
    pass


class EmptyPoolError(ValueError):
    pass


def render(tags: list[str]) -> str:
    return ", ".join(tags)


def _require(clusters: SemanticClusters, *names: str) -> None:
    for name in names:
        if not getattr(clusters, name):
            raise MissingClusterError(f"required cluster {name.upper() if name[0] == 'c' else name} is empty")


def build_reference_prompt(clusters: SemanticClusters, kind: str, constants: PromptConstants) -> list[str]:
    if kind not in REFERENCE_KINDS:
        raise ValueError(f"unknown reference kind {kind!r}")
    _require(clusters, "c0", "char_name")
    head = clusters.c0 + clusters.char_name
    if kind == "orig":
        body = ([clusters.rating] + clusters.c1 + clusters.c2 + clusters.c3 + clusters.c4)
    elif kind in ("full", "upper"):
        body = [constants.framing[kind]] + constants.neutral_view + clusters.c2
    else:
        body = [constants.framing["portrait"]] + clusters.c2
    return head + body + constants.quality


def build_training_prompt(clusters: SemanticClusters) -> list[str]:
    out = clusters.c1 + clusters.c2 + clusters.c3 + clusters.c4 + clusters.c5
    # a character tag can leak into general tags on raw metadata
    banned = set(clusters.char_name) | {clusters.rating}
    return [t for t in out if t not in banned]


def substitute_motion_tags(c4: list[str], rng_seed: int, taxonomy: Taxonomy,
                           sub_group: dict | None = None) -> list[str]:
    """Replace every motion-kind tag with another motion tag from its sub-group.

    Replacements come first (in the order of the tags they replace), followed
    by the untouched attribute tags. A motion tag whose sub-group has no other
    motion tag is kept as is.
    """
    rng = random.Random(rng_seed)
    replaced, kept = [], []
    for tag in c4:
        group = (sub_group or {}).get(tag)
        if group is None:
            entry = taxonomy.entries.get(tag)
            group = entry.sub_group if entry else None
        if group is None or group.kind != "motion":
            kept.append(tag)
            continue
        pool = [t for t in taxonomy.sub_group_members(group) if t != tag]
        if not pool:
            logger.warning("no alternative motion tag for %r in %s; kept unchanged", tag, group)
            replaced.append(tag)
            continue
        replaced.append(rng.choice(pool))
    return replaced + kept


@dataclass
class EditPrompt:
    task: str
    reference: str
    tags: list[str]
    needs_pose: bool = False

    def to_dict(self) -> dict:
        return {"reference": self.reference, "prompt": list(self.tags), "needs_pose": self.needs_pose}

    @classmethod
    def from_dict(cls, task: str, d: dict) -> "EditPrompt":
        return cls(task, d["reference"], list(d["prompt"]), bool(d.get("needs_pose", False)))


def _pick(pool: list[str], rng: random.Random, what: str) -> str:
    if not pool:
        raise EmptyPoolError(f"no {what} candidates available")
    return rng.choice(pool)


def build_edit_prompt(clusters: SemanticClusters, task: str, rng_seed: int, taxonomy: Taxonomy,
                      constants: PromptConstants, *, framing: str = "full", new_pose: str | None = None,
                      new_expression: str | None = None, scene: str | None = None) -> EditPrompt:
    if task not in EDIT_TASKS:
        raise ValueError(f"unknown edit task {task!r}")
    _require(clusters, "c0")
    rng = random.Random(f"{rng_seed}:{task}")
    q = constants.quality
    if task == "body_motion":
        tags = clusters.c0 + substitute_motion_tags(clusters.c4, rng.randrange(2**32), taxonomy,
                                                    clusters.sub_group) + q
        return EditPrompt(task, "orig", tags)
    if task in ("posture_view", "pose_cond"):
        if framing not in ("full", "upper"):
            raise ValueError("framing must be 'full' or 'upper'")
        if task == "pose_cond":
            framing = "full"
        if new_pose is None:
            pool = [t for t in taxonomy.tags_in(3) if t not in clusters.c3]
            new_pose = _pick(pool, rng, "new_pose")
        tags = clusters.c0 + [constants.framing[framing]] + clusters.c1 + [new_pose] + q
        return EditPrompt(task, framing, tags, needs_pose=task == "pose_cond")
    if task == "expression":
        if new_expression is None:
            pool = [t for t in taxonomy.motion_tags(constants.expression_regions) if t not in clusters.c4]
            new_expression = _pick(pool, rng, "new_expression")
        tags = clusters.c0 + [constants.framing["portrait"]] + [new_expression] + q
        return EditPrompt(task, "portrait", tags)
    if scene is None:
        scene = _pick(constants.scene_pool, rng, "scene_description")
    return EditPrompt(task, "full", clusters.c0 + [scene])


@dataclass
class PromptBundle:
    ref_orig: list[str]
    ref_full: list[str]
    ref_upper: list[str]
    ref_portrait: list[str]
    training: list[str]
    edits: dict[str, EditPrompt] = field(default_factory=dict)

    def references(self) -> dict[str, list[str]]:
        return {"orig": self.ref_orig, "full": self.ref_full, "upper": self.ref_upper,
                "portrait": self.ref_portrait}


def build_prompt_bundle(clusters: SemanticClusters, taxonomy: Taxonomy, constants: PromptConstants,
                        rng_seed: int, tasks=EDIT_TASKS) -> PromptBundle:
    refs = {k: build_reference_prompt(clusters, k, constants) for k in REFERENCE_KINDS}
    edits = {t: build_edit_prompt(clusters, t, rng_seed, taxonomy, constants) for t in tasks}
    return PromptBundle(refs["orig"], refs["full"], refs["upper"], refs["portrait"],
                        build_training_prompt(clusters), edits)
