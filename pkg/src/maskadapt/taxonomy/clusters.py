"""Cluster extraction and entry filtering."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

from .records import TagRecord
from .table import Cluster, PromptConstants, SubGroup, Taxonomy, classify_tag


class EmptyIdentityError(ValueError):
    """Raised when a record has no cluster-0 tag."""


@dataclass
class SemanticClusters:
    c0: list[str] = field(default_factory=list)
    c1: list[str] = field(default_factory=list)
    c2: list[str] = field(default_factory=list)
    c3: list[str] = field(default_factory=list)
    c4: list[str] = field(default_factory=list)
    c5: list[str] = field(default_factory=list)
    char_name: list[str] = field(default_factory=list)
    rating: str = "general"
    artist: list[str] = field(default_factory=list)
    sub_group: dict[str, SubGroup] = field(default_factory=dict)

    def cluster(self, index: int) -> list[str]:
        return getattr(self, f"c{index}")

    def to_dict(self) -> dict:
        return {
            "c0": list(self.c0),
            "c1": list(self.c1),
            "c2": list(self.c2),
            "c3": list(self.c3),
            "c4": list(self.c4),
            "c5": list(self.c5),
            "char_name": list(self.char_name),
            "rating": self.rating,
            "artist": list(self.artist),
            "sub_group": {t: [g.region, g.kind] for t, g in self.sub_group.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SemanticClusters":
        return cls(
            **{k: list(d.get(k, [])) for k in ("c0", "c1", "c2", "c3", "c4", "c5", "char_name", "artist")},
            rating=d.get("rating", "general"),
            sub_group={t: SubGroup(*g) for t, g in d.get("sub_group", {}).items()},
        )


def extract_clusters(record: TagRecord, taxonomy: Taxonomy) -> SemanticClusters:
    """Partition a record's tags into clusters 0-5.

    Unknown general tags are dropped. Character tags form ``char_name`` and
    artist tags are routed to cluster 2 after the general style tags.
    """
    out = SemanticClusters(rating=record.rating)
    for tag in record.general_tags:
        if tag in record.character_tags:
            continue
        cls, sub = classify_tag(tag, taxonomy)
        if cls == Cluster.UNKNOWN:
            continue
        out.cluster(int(cls)).append(tag)
        if cls == Cluster.C4:
            out.sub_group[tag] = sub
    out.char_name = list(record.character_tags)
    for artist in record.artist_tags:
        if artist not in out.c2:
            out.c2.append(artist)
            out.artist.append(artist)
    if not out.c0:
        raise EmptyIdentityError(f"record {record.id!r}: no identity/count tag (C0 empty)")
    return out


class FilterResult(NamedTuple):
    accepted: bool
    reason: str | None = None


def framing_conflicts(clusters: SemanticClusters, constants: PromptConstants,
                      framings=("full-body", "upper-body")) -> list[tuple[str, str]]:
    """Return (framing token, C2 tag) pairs found in the deny list."""
    hits = []
    c2 = {t.lower() for t in clusters.c2}
    for framing in framings:
        for bad in constants.framing_conflicts.get(framing, []):
            if bad in c2:
                hits.append((framing, bad))
    return hits


def filter_entry(record: TagRecord, taxonomy: Taxonomy, constants: PromptConstants,
                 framings=("full-body", "upper-body")) -> FilterResult:
    if record.rating != "general":
        return FilterResult(False, "rating")
    if not record.character_tags:
        return FilterResult(False, "no character identity")
    try:
        clusters = extract_clusters(record, taxonomy)
    except EmptyIdentityError:
        return FilterResult(False, "empty C0")
    c0 = set(clusters.c0)
    if c0 & set(constants.multi_count):
        return FilterResult(False, "multiple characters")
    if not c0 & set(constants.single_count):
        return FilterResult(False, "no single-count token")
    conflicts = framing_conflicts(clusters, constants, framings)
    if conflicts:
        framing, tag = conflicts[0]
        return FilterResult(False, f"framing conflict: {framing} vs {tag}")
    return FilterResult(True)
