"""Dataset assembly: metadata -> filtered, annotated manifest -> training / eval inputs.

Each accepted record gets an image, a subject mask (from the segmenter),
a pose skeleton (from the pose extractor) and its prompt bundle. Paths in
the manifest are relative to the manifest's directory.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .backends import (
    PoseSkeleton,
    SegmenterRequest,
    load_image_png,
    load_mask_png,
    save_image_png,
    save_mask_png,
)
from .encoder import EncoderSpec
from .evaluation import EvalCase
from .generate import from_unit
from .injection import pixel_mask_to_token_mask
from .taxonomy import (
    EDIT_TASKS,
    ManifestEntry,
    PromptConstants,
    TagRecord,
    Taxonomy,
    build_prompt_bundle,
    emit_manifest,
    extract_clusters,
    filter_entry,
    render,
)
from .taxonomy.prompts import EmptyPoolError
from .toydata import toy_entry_image
from .trainer import TrainingSample

log = logging.getLogger(__name__)

SEGMENT_PROMPT = "character"

# (record, clusters) -> image in [0, 1], HWC
ImageSource = Callable[[TagRecord, object], np.ndarray]


class DatasetError(ValueError):
    pass


def toy_image_source(size: int = 32, seed: int = 0) -> ImageSource:
    def source(record: TagRecord, clusters) -> np.ndarray:
        return toy_entry_image(record.id, clusters.c4, size, seed)[0]
    return source


def file_image_source(root: str | Path) -> ImageSource:
    """Reads ``extra['image_path']`` from each metadata record."""
    root = Path(root)

    def source(record: TagRecord, clusters) -> np.ndarray:
        rel = record.extra.get("image_path")
        if not rel:
            raise DatasetError(f"record {record.id} has no image_path")
        try:
            return load_image_png(root / rel)
        except OSError as exc:
            raise DatasetError(f"record {record.id}: cannot read {rel}: {exc}") from None
    return source


@dataclass
class BuildStats:
    seen: int = 0
    accepted: int = 0
    rejected: Counter = field(default_factory=Counter)

    def to_dict(self) -> dict:
        return {"seen": self.seen, "accepted": self.accepted, "rejected": dict(self.rejected)}


def build_dataset(records: Iterable[TagRecord], out_dir: str | Path, taxonomy: Taxonomy, constants: PromptConstants,
                  image_source: ImageSource, segmenter, pose_extractor, prompt_seed: int = 0,
                  min_pose_joints: int = 1, tasks=EDIT_TASKS) -> tuple[list[ManifestEntry], BuildStats]:
    out = Path(out_dir)
    for sub in ("images", "masks", "poses"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    entries, stats = [], BuildStats()
    for record in records:
        stats.seen += 1
        verdict = filter_entry(record, taxonomy, constants)
        if not verdict.accepted:
            stats.rejected[verdict.reason] += 1
            continue
        clusters = extract_clusters(record, taxonomy)
        try:
            bundle = build_prompt_bundle(clusters, taxonomy, constants, prompt_seed, tasks)
        except EmptyPoolError as exc:
            stats.rejected[f"prompt: {exc}"] += 1
            continue
        image = image_source(record, clusters)
        mask = np.asarray(segmenter.segment(SegmenterRequest(image, SEGMENT_PROMPT, record.id)), dtype=bool)
        if not mask.any():
            stats.rejected["empty mask"] += 1
            continue
        skeleton = pose_extractor.extract_pose(image)
        if skeleton.num_detected < min_pose_joints:
            stats.rejected["no pose"] += 1
            continue
        stem = record.id.replace("/", "_")
        save_image_png(image, out / "images" / f"{stem}.png")
        save_mask_png(mask, out / "masks" / f"{stem}.png")
        skeleton.save(out / "poses" / f"{stem}.txt")
        prompts = dict(bundle.references())
        prompts["training"] = bundle.training
        entries.append(ManifestEntry(record.id, f"images/{stem}.png", f"masks/{stem}.png", f"poses/{stem}.txt",
                                     clusters, prompts, bundle.edits))
        stats.accepted += 1
    emit_manifest(entries, out / "manifest.jsonl")
    return entries, stats


@dataclass
class LoadedEntry:
    entry: ManifestEntry
    image: np.ndarray
    mask: np.ndarray
    skeleton: PoseSkeleton


def load_entry(entry: ManifestEntry, root: str | Path) -> LoadedEntry:
    root = Path(root)
    try:
        image = load_image_png(root / entry.image_path)
        mask = load_mask_png(root / entry.mask_path)
        skeleton = PoseSkeleton.load(root / entry.pose_path)
    except (OSError, ValueError) as exc:
        raise DatasetError(f"entry {entry.id}: {exc}") from None
    if mask.shape != image.shape[:2]:
        raise DatasetError(f"entry {entry.id}: mask {mask.shape} vs image {image.shape[:2]}")
    return LoadedEntry(entry, image, mask, skeleton)


def training_samples(entries: Iterable[ManifestEntry], root: str | Path, spec: EncoderSpec,
                     mask_threshold: float = 0.5, cls_foreground: bool = True) -> list[TrainingSample]:
    out = []
    for e in entries:
        le = load_entry(e, root)
        if le.image.shape[:2] != (spec.height, spec.width):
            raise DatasetError(f"entry {e.id}: image {le.image.shape[:2]} but encoder expects "
                               f"{(spec.height, spec.width)}")
        tm = pixel_mask_to_token_mask(le.mask, spec, mask_threshold, cls_foreground, origin=e.mask_path)
        out.append(TrainingSample(from_unit(le.image), render(e.prompts["training"]), tm, le.skeleton, e.id))
    return out


def eval_cases(entries: Iterable[ManifestEntry], root: str | Path, tasks=EDIT_TASKS,
               max_per_task: int = 0) -> list[EvalCase]:
    """One case per (entry, task) that has an edit prompt for the task."""
    cases = []
    loaded = {}
    for task in tasks:
        if task not in EDIT_TASKS:
            raise DatasetError(f"unknown task {task!r}")
        count = 0
        for e in entries:
            if task not in e.edits or (max_per_task and count >= max_per_task):
                continue
            if e.id not in loaded:
                loaded[e.id] = load_entry(e, root)
            le = loaded[e.id]
            edit = e.edits[task]
            cases.append(EvalCase(f"{e.id}:{task}", task, le.image, le.mask, render(edit.tags),
                                  le.skeleton if edit.needs_pose else None))
            count += 1
    return cases
