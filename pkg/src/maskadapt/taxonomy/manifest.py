"""Line-delimited dataset manifest."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .clusters import SemanticClusters
from .prompts import EditPrompt

FIELDS = ("id", "image_path", "mask_path", "pose_path", "clusters", "prompts", "edits")


class ManifestError(ValueError):
    pass


@dataclass
class ManifestEntry:
    id: str
    image_path: str
    mask_path: str
    pose_path: str
    clusters: SemanticClusters
    prompts: dict[str, list[str]]
    edits: dict[str, EditPrompt] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "image_path": self.image_path,
            "mask_path": self.mask_path,
            "pose_path": self.pose_path,
            "clusters": self.clusters.to_dict(),
            "prompts": {k: list(v) for k, v in self.prompts.items()},
            "edits": {k: v.to_dict() for k, v in self.edits.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestEntry":
        missing = [f for f in FIELDS if f not in d]
        if missing:
            raise ManifestError(f"manifest record missing fields {missing}")
        return cls(
            id=str(d["id"]),
            image_path=d["image_path"],
            mask_path=d["mask_path"],
            pose_path=d["pose_path"],
            clusters=SemanticClusters.from_dict(d["clusters"]),
            prompts={k: list(v) for k, v in d["prompts"].items()},
            edits={k: EditPrompt.from_dict(k, v) for k, v in d["edits"].items()},
        )


def dumps_entry(entry: ManifestEntry) -> str:
    return json.dumps(entry.to_dict(), ensure_ascii=False)


def emit_manifest(entries: list[ManifestEntry], out_path: str | Path) -> Path:
    seen = set()
    for e in entries:
        if e.id in seen:
            raise ManifestError(f"duplicate entry id {e.id!r}")
        seen.add(e.id)
    out_path = Path(out_path)
    with open(out_path, "w", encoding="utf-8") as f:
        for e in entries:
            f.write(dumps_entry(e) + "\n")
    return out_path


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    entries = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                entries.append(ManifestEntry.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
    return entries
