"""Tag taxonomy table and prompt constants.

The taxonomy is a tab-separated file with columns ``tag, cluster, region,
kind``. ``region``/``kind`` are only filled for cluster 4 rows (local
body-part tags), where ``kind`` is ``attribute`` or ``motion``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from enum import IntEnum
from importlib import resources
from pathlib import Path
from typing import NamedTuple


class Cluster(IntEnum):
    UNKNOWN = -1
    C0 = 0  # identity and count
    C1 = 1  # view and framing
    C2 = 2  # style and aesthetics
    C3 = 3  # global posture
    C4 = 4  # local body-part attributes / motions
    C5 = 5  # visual patterns


KINDS = ("attribute", "motion")


class SubGroup(NamedTuple):
    region: str
    kind: str


class Classification(NamedTuple):
    cluster: Cluster
    sub_group: SubGroup | None = None


@dataclass(frozen=True)
class TaxonomyEntry:
    tag: str
    cluster: Cluster
    sub_group: SubGroup | None = None


class TaxonomyError(ValueError):
    pass


@dataclass
class Taxonomy:
    """In-memory tag table. Row order is preserved and used for sampling pools."""

    entries: dict[str, TaxonomyEntry]
    version: str = "unversioned"

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, tag: str) -> bool:
        return tag in self.entries

    def tags_in(self, cluster: Cluster) -> list[str]:
        return [t for t, e in self.entries.items() if e.cluster == cluster]

    def sub_group_members(self, sub_group: SubGroup) -> list[str]:
        return [t for t, e in self.entries.items() if e.sub_group == sub_group]

    def motion_tags(self, regions: list[str] | None = None) -> list[str]:
        out = []
        for t, e in self.entries.items():
            if e.sub_group is None or e.sub_group.kind != "motion":
                continue
            if regions is None or e.sub_group.region in regions:
                out.append(t)
        return out


def classify_tag(tag: str, taxonomy: Taxonomy) -> Classification:
    entry = taxonomy.entries.get(tag.strip().lower())
    if entry is None:
        return Classification(Cluster.UNKNOWN)
    return Classification(entry.cluster, entry.sub_group)


def _parse_rows(lines, source: str) -> Taxonomy:
    version = "unversioned"
    body = []
    for line in lines:
        if line.startswith("#"):
            if not body and "v" in line:
                version = line.lstrip("# ").strip()
            continue
        if line.strip():
            body.append(line)
    reader = csv.DictReader(body, delimiter="\t")
    if reader.fieldnames is None or [f.strip() for f in reader.fieldnames][:2] != ["tag", "cluster"]:
        raise TaxonomyError(f"{source}: expected header 'tag<TAB>cluster<TAB>region<TAB>kind'")
    entries: dict[str, TaxonomyEntry] = {}
    for lineno, row in enumerate(reader, start=2):
        tag = (row.get("tag") or "").strip().lower()
        if not tag:
            raise TaxonomyError(f"{source}:{lineno}: empty tag")
        try:
            cluster = Cluster(int(row["cluster"]))
        except (TypeError, ValueError):
            raise TaxonomyError(f"{source}:{lineno}: bad cluster {row.get('cluster')!r}") from None
        if cluster == Cluster.UNKNOWN:
            raise TaxonomyError(f"{source}:{lineno}: cluster must be 0-5")
        region = (row.get("region") or "").strip()
        kind = (row.get("kind") or "").strip()
        sub_group = None
        if cluster == Cluster.C4:
            if not region or kind not in KINDS:
                raise TaxonomyError(f"{source}:{lineno}: cluster 4 tag {tag!r} needs region and kind")
            sub_group = SubGroup(region, kind)
        if tag in entries:
            raise TaxonomyError(f"{source}:{lineno}: duplicate tag {tag!r}")
        entries[tag] = TaxonomyEntry(tag, cluster, sub_group)
    return Taxonomy(entries, version)


def load_taxonomy(path: str | Path | None = None) -> Taxonomy:
    """Load a taxonomy table; ``None`` loads the bundled demonstrative table."""
    if path is None:
        text = resources.files("maskadapt.taxonomy").joinpath("data/taxonomy.tsv").read_text("utf-8")
        return _parse_rows(text.splitlines(), "taxonomy.tsv")
    path = Path(path)
    return _parse_rows(path.read_text("utf-8").splitlines(), str(path))


def dump_taxonomy(taxonomy: Taxonomy, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(f"# {taxonomy.version}\n")
        f.write("tag\tcluster\tregion\tkind\n")
        for e in taxonomy.entries.values():
            region, kind = e.sub_group if e.sub_group else ("", "")
            f.write(f"{e.tag}\t{int(e.cluster)}\t{region}\t{kind}\n")


@dataclass
class PromptConstants:
    quality: list[str]
    neutral_view: list[str]
    framing: dict[str, str]
    single_count: list[str]
    multi_count: list[str]
    expression_regions: list[str]
    framing_conflicts: dict[str, list[str]]
    scene_pool: list[str] = field(default_factory=list)


def load_constants(path: str | Path | None = None, scene_pool: str | Path | None = None) -> PromptConstants:
    pkg = resources.files("maskadapt.taxonomy")
    if path is None:
        raw = json.loads(pkg.joinpath("data/prompt_constants.json").read_text("utf-8"))
    else:
        raw = json.loads(Path(path).read_text("utf-8"))
    if scene_pool is None:
        scene_text = pkg.joinpath("data/scene_pool.txt").read_text("utf-8")
    else:
        scene_text = Path(scene_pool).read_text("utf-8")
    scenes = [s.strip() for s in scene_text.splitlines() if s.strip() and not s.startswith("#")]
    raw.pop("version", None)
    return PromptConstants(scene_pool=scenes, **raw)
