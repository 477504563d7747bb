"""Danbooru-style metadata records."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

RATINGS = ("general", "sensitive", "questionable", "explicit")
_RATING_ALIASES = {"g": "general", "s": "sensitive", "q": "questionable", "e": "explicit"}


class RecordError(ValueError):
    pass


def normalize_rating(value: str) -> str:
    v = str(value).strip().lower()
    v = _RATING_ALIASES.get(v, v)
    if v not in RATINGS:
        raise RecordError(f"unknown rating {value!r}")
    return v


def _dedupe(tags) -> list[str]:
    seen = set()
    out = []
    for t in tags:
        key = t.lower()
        if t and key not in seen:
            seen.add(key)
            out.append(t)
    return out


def split_tag_string(value, fmt: str = "comma") -> list[str]:
    """Split a tag field.

    ``fmt="comma"`` splits ``"1girl, solo"`` style strings; ``fmt="danbooru"``
    splits raw space-separated strings and turns underscores into spaces
    (``"1girl long_hair"``). Lists pass through.
    """
    if value is None:
        return []
    if isinstance(value, (list, tuple)):
        parts = [str(v) for v in value]
    elif fmt == "comma":
        parts = value.split(",")
    elif fmt == "danbooru":
        parts = [p.replace("_", " ") for p in value.split()]
    else:
        raise ValueError(f"unknown tag format {fmt!r}")
    return [" ".join(p.split()) for p in parts if p.strip()]


@dataclass
class TagRecord:
    general_tags: list[str]
    character_tags: list[str]
    artist_tags: list[str]
    rating: str
    id: str = ""
    extra: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.general_tags = _dedupe(t.lower() for t in self.general_tags)
        self.character_tags = _dedupe(t.lower() for t in self.character_tags)
        # artist names keep their casing; dedup is case-insensitive
        self.artist_tags = _dedupe(self.artist_tags)
        self.rating = normalize_rating(self.rating)

    @classmethod
    def from_metadata(cls, raw: dict, fallback_id: str = "", fmt: str = "auto") -> "TagRecord":
        """Build a record from a metadata dict.

        With ``fmt="auto"`` a record whose general tag string contains a comma
        is read as comma-separated, otherwise as raw Danbooru tag strings.
        """
        for key in ("tag_string_general", "rating"):
            if key not in raw:
                raise RecordError(f"metadata record missing {key!r}")
        if fmt == "auto":
            general = raw["tag_string_general"]
            fmt = "comma" if isinstance(general, (list, tuple)) or "," in general else "danbooru"
        known = {"tag_string_general", "tag_string_character", "tag_string_artist", "rating", "id"}
        return cls(
            general_tags=split_tag_string(raw.get("tag_string_general"), fmt),
            character_tags=split_tag_string(raw.get("tag_string_character"), fmt),
            artist_tags=split_tag_string(raw.get("tag_string_artist"), fmt),
            rating=raw["rating"],
            id=str(raw.get("id", fallback_id)),
            extra={k: v for k, v in raw.items() if k not in known},
        )


def read_metadata(path: str | Path, fmt: str = "auto") -> Iterator[TagRecord]:
    """Yield records from a line-delimited JSON metadata file."""
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordError(f"{path}:{lineno}: {exc.msg}") from None
            yield TagRecord.from_metadata(raw, fallback_id=f"{lineno:06d}", fmt=fmt)
