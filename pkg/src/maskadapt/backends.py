"""Subject segmentation and pose extraction contracts plus deterministic doubles.

Images are float arrays in ``[0, 1]`` with shape ``(H, W, 3)``. Masks are
boolean ``(H, W)`` arrays. Skeletons use the 18-joint OpenPose body layout
with coordinates normalised to ``[0, 1]``.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol

import numpy as np
from PIL import Image

from .errors import BackendError, BackendUnavailable, ShapeError

JOINT_NAMES = (
    "nose", "neck", "r_shoulder", "r_elbow", "r_wrist", "l_shoulder", "l_elbow", "l_wrist",
    "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle", "r_eye", "l_eye", "r_ear", "l_ear",
)
NUM_JOINTS = len(JOINT_NAMES)
LIMBS = (
    (1, 2), (1, 5), (2, 3), (3, 4), (5, 6), (6, 7), (1, 8), (8, 9), (9, 10),
    (1, 11), (11, 12), (12, 13), (1, 0), (0, 14), (14, 16), (0, 15), (15, 17),
)


@dataclass
class PoseSkeleton:
    xy: np.ndarray          # (18, 2) normalised (x, y)
    confidence: np.ndarray  # (18,)
    detected: np.ndarray    # (18,) bool

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=np.float64).reshape(NUM_JOINTS, 2)
        self.confidence = np.asarray(self.confidence, dtype=np.float64).reshape(NUM_JOINTS)
        self.detected = np.asarray(self.detected, dtype=bool).reshape(NUM_JOINTS)
        det = self.detected
        if np.any((self.xy[det] < 0) | (self.xy[det] > 1)):
            raise ValueError("detected joint coordinates must lie in [0, 1]")
        if np.any((self.confidence < 0) | (self.confidence > 1)):
            raise ValueError("joint confidence must lie in [0, 1]")

    @classmethod
    def empty(cls) -> "PoseSkeleton":
        return cls(np.zeros((NUM_JOINTS, 2)), np.zeros(NUM_JOINTS), np.zeros(NUM_JOINTS, bool))

    @property
    def num_detected(self) -> int:
        return int(self.detected.sum())

    def __eq__(self, other) -> bool:
        if not isinstance(other, PoseSkeleton):
            return NotImplemented
        return (np.array_equal(self.xy, other.xy) and np.array_equal(self.confidence, other.confidence)
                and np.array_equal(self.detected, other.detected))

    def to_text(self) -> str:
        lines = ["# joint x y confidence detected"]
        for j in range(NUM_JOINTS):
            x, y = self.xy[j]
            lines.append(f"{j} {float(x)!r} {float(y)!r} {float(self.confidence[j])!r} {int(self.detected[j])}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PoseSkeleton":
        xy = np.zeros((NUM_JOINTS, 2))
        conf = np.zeros(NUM_JOINTS)
        det = np.zeros(NUM_JOINTS, bool)
        seen = set()
        for line in text.splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 5:
                raise ValueError(f"bad skeleton line {line!r}")
            j = int(parts[0])
            if not 0 <= j < NUM_JOINTS or j in seen:
                raise ValueError(f"bad or repeated joint id {j}")
            seen.add(j)
            xy[j] = float(parts[1]), float(parts[2])
            conf[j] = float(parts[3])
            det[j] = bool(int(parts[4]))
        return cls(xy, conf, det)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "PoseSkeleton":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


@dataclass
class SegmenterRequest:
    image: np.ndarray
    prompt: str
    image_id: str | None = None

    def __post_init__(self):
        if not self.prompt or not self.prompt.strip():
            raise ValueError("segmentation prompt must be non-empty")


class Segmenter(Protocol):
    def segment(self, request: SegmenterRequest) -> np.ndarray: ...


class PoseExtractor(Protocol):
    def extract_pose(self, image: np.ndarray) -> PoseSkeleton: ...


class OracleSegmenter:
    """Returns stored ground-truth masks keyed by image id."""

    def __init__(self, masks: dict[str, np.ndarray]):
        self.masks = {k: np.asarray(v, dtype=bool) for k, v in masks.items()}

    def segment(self, request: SegmenterRequest) -> np.ndarray:
        if request.image_id not in self.masks:
            raise BackendError(f"oracle segmenter has no mask for image id {request.image_id!r}")
        return self.masks[request.image_id].copy()


def luminance(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    return image[..., :3] @ np.array([0.299, 0.587, 0.114])


class ThresholdSegmenter:
    """Pixelwise luminance threshold.

    ``foreground="above"`` marks bright pixels (white square on black);
    ``"below"`` marks anything darker than the threshold (a subject drawn on
    a white page).
    """

    def __init__(self, threshold: float = 0.5, foreground: str = "above"):
        if foreground not in ("above", "below"):
            raise ValueError("foreground must be 'above' or 'below'")
        self.threshold = threshold
        self.foreground = foreground

    def segment(self, request: SegmenterRequest) -> np.ndarray:
        lum = luminance(request.image)
        return lum > self.threshold if self.foreground == "above" else lum < self.threshold


def white_page_segmenter() -> ThresholdSegmenter:
    return ThresholdSegmenter(0.97, "below")


class CallableSegmenter:
    """Wraps any ``fn(image, prompt) -> mask`` (e.g. a SAM-family model)."""

    def __init__(self, fn: Callable[[np.ndarray, str], np.ndarray], name: str = "callable"):
        self.fn = fn
        self.name = name

    def segment(self, request: SegmenterRequest) -> np.ndarray:
        try:
            mask = np.asarray(self.fn(request.image, request.prompt))
        except Exception as exc:
            raise BackendError(f"segmenter {self.name} failed: {exc}") from exc
        if mask.shape != request.image.shape[:2]:
            raise ShapeError(f"segmenter returned mask {mask.shape} for image {request.image.shape[:2]}")
        return mask.astype(bool)


class UnavailableSegmenter:
    def __init__(self, name: str = "sam3"):
        self.name = name

    def segment(self, request: SegmenterRequest) -> np.ndarray:
        raise BackendUnavailable(f"segmentation backend {self.name!r} is not configured")


def resize_nearest(array: np.ndarray, height: int, width: int) -> np.ndarray:
    a = np.asarray(array)
    rows = (np.arange(height) * a.shape[0] // height)
    cols = (np.arange(width) * a.shape[1] // width)
    return a[rows][:, cols]


# --- pose --------------------------------------------------------------------

def joint_palette() -> np.ndarray:
    """18 fully saturated, evenly spaced hues; one marker colour per joint."""
    return np.array([colorsys.hsv_to_rgb(j / NUM_JOINTS, 1.0, 1.0) for j in range(NUM_JOINTS)])


def _pixel(xy: np.ndarray, height: int, width: int) -> tuple[int, int]:
    col = min(int(np.floor(xy[0] * width)), width - 1)
    row = min(int(np.floor(xy[1] * height)), height - 1)
    return row, col


def draw_line(image: np.ndarray, p0, p1, color, width: int = 1) -> None:
    h, w = image.shape[:2]
    (r0, c0), (r1, c1) = p0, p1
    n = int(max(abs(r1 - r0), abs(c1 - c0))) * 2 + 1
    half = width // 2
    for s in np.linspace(0.0, 1.0, n):
        r = int(round(r0 + (r1 - r0) * s))
        c = int(round(c0 + (c1 - c0) * s))
        image[max(r - half, 0):min(r - half + width, h), max(c - half, 0):min(c - half + width, w)] = color


def render_stick_figure(skeleton: PoseSkeleton, height: int, width: int | None = None,
                        background=(1.0, 1.0, 1.0), limb_color=(0.3, 0.3, 0.3), limb_width: int = 1,
                        image: np.ndarray | None = None) -> np.ndarray:
    """Draw limbs, then one palette-coloured marker per detected joint."""
    width = width or height
    if image is None:
        image = np.empty((height, width, 3))
        image[:] = background
    if limb_color is not None:
        for a, b in LIMBS:
            if skeleton.detected[a] and skeleton.detected[b]:
                draw_line(image, _pixel(skeleton.xy[a], height, width), _pixel(skeleton.xy[b], height, width),
                          limb_color, limb_width)
    palette = joint_palette()
    radius = max(0, min(height, width) // 64)
    for j in range(NUM_JOINTS):
        if not skeleton.detected[j]:
            continue
        r, c = _pixel(skeleton.xy[j], height, width)
        image[max(r - radius, 0):r + radius + 1, max(c - radius, 0):c + radius + 1] = palette[j]
    return image


class StickFigureDetector:
    """Finds joint markers by colour match and returns their pixel centroids."""

    def __init__(self, tolerance: float = 0.1):
        self.tolerance = tolerance
        self.palette = joint_palette()

    def extract_pose(self, image: np.ndarray) -> PoseSkeleton:
        image = np.asarray(image, dtype=np.float64)[..., :3]
        h, w = image.shape[:2]
        xy = np.zeros((NUM_JOINTS, 2))
        conf = np.zeros(NUM_JOINTS)
        det = np.zeros(NUM_JOINTS, bool)
        for j, color in enumerate(self.palette):
            dist = np.abs(image - color).max(axis=-1)
            hit = dist <= self.tolerance
            if not hit.any():
                continue
            rows, cols = np.nonzero(hit)
            xy[j] = (cols.mean() + 0.5) / w, (rows.mean() + 0.5) / h
            conf[j] = float(np.clip(1.0 - dist[hit].mean() / self.tolerance, 0.0, 1.0))
            det[j] = True
        return PoseSkeleton(xy, conf, det)


class OraclePoseExtractor:
    def __init__(self, skeletons: dict[str, PoseSkeleton]):
        self.skeletons = dict(skeletons)

    def extract_pose(self, image: np.ndarray, image_id: str | None = None) -> PoseSkeleton:
        if image_id not in self.skeletons:
            raise BackendError(f"oracle pose extractor has no skeleton for {image_id!r}")
        return self.skeletons[image_id]


class CallablePoseExtractor:
    """Wraps ``fn(image) -> PoseSkeleton`` (e.g. an OpenPose binding)."""

    def __init__(self, fn: Callable[[np.ndarray], PoseSkeleton], name: str = "callable"):
        self.fn = fn
        self.name = name

    def extract_pose(self, image: np.ndarray) -> PoseSkeleton:
        try:
            return self.fn(image)
        except Exception as exc:
            raise BackendError(f"pose extractor {self.name} failed: {exc}") from exc


# --- file formats --------------------------------------------------------------

def save_mask_png(mask: np.ndarray, path: str | Path) -> None:
    Image.fromarray(np.asarray(mask, dtype=bool)).convert("1").save(path)


def load_mask_png(path: str | Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("1"), dtype=bool)


def save_image_png(image: np.ndarray, path: str | Path) -> None:
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_image_png(path: str | Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
