"""Small synthetic characters for desk-scale runs.

A toy character is a thick-limbed stick figure on a white page: the head
takes the hair colour, arms and torso the top colour, legs the bottom colour,
and every joint carries its palette marker so the stick-figure detector can
recover the pose. Colours are read from cluster-4 tags when present.
"""

from __future__ import annotations

import colorsys
import hashlib
import random

import numpy as np

from .backends import NUM_JOINTS, PoseSkeleton, draw_line, render_stick_figure

TEMPLATE = np.array([
    (0.50, 0.19), (0.50, 0.31), (0.37, 0.33), (0.30, 0.47), (0.25, 0.61), (0.63, 0.33), (0.70, 0.47),
    (0.75, 0.61), (0.43, 0.60), (0.41, 0.76), (0.39, 0.92), (0.57, 0.60), (0.59, 0.76), (0.61, 0.92),
    (0.45, 0.14), (0.55, 0.14), (0.40, 0.17), (0.60, 0.17),
])

_HUES = {
    "red": 0.0, "orange": 0.08, "blonde": 0.14, "yellow": 0.15, "green": 0.33, "aqua": 0.5,
    "blue": 0.6, "purple": 0.78, "pink": 0.9,
}
_NEUTRALS = {"black": (0.15, 0.15, 0.18), "white": (0.88, 0.88, 0.9), "grey": (0.55, 0.55, 0.58),
             "silver": (0.7, 0.7, 0.74), "brown": (0.45, 0.3, 0.2)}


def muted(hue: float) -> tuple[float, float, float]:
    # min channel 0.4 keeps every body colour away from the saturated joint markers
    return colorsys.hsv_to_rgb(hue, 0.5, 0.8)


def colour_for(tags: list[str], keyword: str, fallback_seed: int) -> tuple[float, float, float]:
    for tag in tags:
        if keyword not in tag:
            continue
        for word, hue in _HUES.items():
            if word in tag:
                return muted(hue)
        for word, rgb in _NEUTRALS.items():
            if word in tag:
                return rgb
    return muted(random.Random(fallback_seed).random())


def stable_seed(*parts) -> int:
    h = hashlib.sha256(":".join(map(str, parts)).encode()).digest()
    return int.from_bytes(h[:4], "little")


def toy_skeleton(seed: int, size: int = 32, jitter: float = 0.025) -> PoseSkeleton:
    """Template pose with seeded jitter; every joint lands on its own pixel."""
    rng = np.random.default_rng(seed)
    for _ in range(1000):
        shift = rng.uniform(-0.05, 0.05, size=2)
        xy = np.clip(TEMPLATE + shift + rng.uniform(-jitter, jitter, size=TEMPLATE.shape), 0.02, 0.98)
        pix = {(int(x * size), int(y * size)) for x, y in xy}
        if len(pix) == NUM_JOINTS:
            return PoseSkeleton(xy, np.ones(NUM_JOINTS), np.ones(NUM_JOINTS, bool))
    raise RuntimeError("could not place distinct joints; use a larger size")


def render_toy_character(skeleton: PoseSkeleton, size: int = 32, hair=(0.8, 0.7, 0.4),
                         top=(0.4, 0.5, 0.8), bottom=(0.6, 0.4, 0.7)) -> np.ndarray:
    img = np.ones((size, size, 3))
    px = [(min(int(y * size), size - 1), min(int(x * size), size - 1)) for x, y in skeleton.xy]
    limb_w = max(2, size // 12)
    for a, b in ((8, 9), (9, 10), (11, 12), (12, 13), (8, 11)):
        draw_line(img, px[a], px[b], bottom, limb_w)
    for a, b in ((1, 2), (2, 3), (3, 4), (1, 5), (5, 6), (6, 7), (2, 8), (5, 11), (1, 8), (1, 11)):
        draw_line(img, px[a], px[b], top, limb_w)
    yy, xx = np.mgrid[0:size, 0:size]
    cy, cx = px[0]
    r = max(2.0, size / 9)
    img[(yy - cy + 1) ** 2 + (xx - cx) ** 2 <= r * r] = hair
    return render_stick_figure(skeleton, size, image=img, limb_color=None)


def toy_entry_image(entry_id: str, c4: list[str] | None = None, size: int = 32, seed: int = 0):
    """Render the toy character for a dataset entry; returns (image, skeleton)."""
    s = stable_seed(seed, entry_id)
    tags = c4 or []
    skel = toy_skeleton(s, size)
    img = render_toy_character(
        skel, size,
        hair=colour_for(tags, "hair", s + 1),
        top=colour_for(tags, "shirt", s + 2),
        bottom=colour_for(tags, "skirt", s + 3),
    )
    return img, skel


def toy_metadata(n: int, seed: int = 0) -> list[dict]:
    """Synthetic Danbooru-style metadata rows for smoke runs."""
    rng = random.Random(seed)
    hair = ["blonde hair", "black hair", "pink hair", "blue hair", "red hair", "silver hair", "brown hair"]
    eyes = ["blue eyes", "red eyes", "green eyes", "purple eyes"]
    tops = ["white shirt", "blue shirt", "green shirt", "red shirt", "black shirt"]
    bottoms = ["purple skirt", "black skirt", "blue skirt", "red skirt"]
    extras = ["long hair", "short hair", "twintails", "gloves", "thighhighs", "hair ribbon", "vest"]
    motions = ["hair flip", "one eye closed", "smile", "v", "skirt hold", "crossed arms", "hand up"]
    views = ["from side", "from below", "cowboy shot", "looking back", "from above"]
    styles = ["simple background", "white background", "flat color", "sketch", "sunlight"]
    poses = ["standing", "sitting", "jumping", "running", "kneeling"]
    rows = []
    for i in range(n):
        tags = ["1girl", "solo", rng.choice(hair), rng.choice(eyes), rng.choice(tops), rng.choice(bottoms),
                rng.choice(views), rng.choice(styles), rng.choice(poses), rng.choice(motions),
                rng.choice(motions)] + rng.sample(extras, 2)
        rows.append({
            "id": f"toy{i:04d}",
            "tag_string_general": ", ".join(dict.fromkeys(tags)),
            "tag_string_character": f"character {i} (toy)",
            "tag_string_artist": "toy artist",
            "rating": "general",
        })
    return rows
