"""Appearance, text, diversity and pose metrics plus the per-task eval driver.

Images here are float arrays in ``[0, 1]`` shaped ``(H, W, 3)``; masks are
boolean ``(H, W)``. Similarity backends are pluggable: the surrogate ones
below keep tests hermetic, real CLIP / LPIPS / Inception models can be
wrapped behind the same two small protocols.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
import scipy.linalg
import torch

from .backends import PoseSkeleton, SegmenterRequest
from .encoder import SurrogateViT
from .errors import BackendError
from .surrogate import SurrogateTextEncoder

log = logging.getLogger(__name__)

# report column order; FID comes last
TABLE_COLUMNS = ("clip_t", "clip_i_masked", "lpips", "lpips_div", "psnr", "akd", "mkr", "failure", "fid")
COLUMN_TITLES = {
    "clip_t": "CLIP-T", "clip_i_masked": "CLIP-I", "lpips": "LPIPS", "lpips_div": "LPIPS-div",
    "psnr": "PSNR", "akd": "AKD", "mkr": "MKR", "failure": "Failure", "fid": "FID",
}
SAMPLES_PER_CASE = 4
PSNR_CAP = 100.0


class ImageTextEncoder(Protocol):
    def embed_images(self, images: np.ndarray) -> np.ndarray: ...
    def embed_texts(self, prompts: Sequence[str]) -> np.ndarray: ...


Distance = Callable[[np.ndarray, np.ndarray], float]


def _batch_to_tensor(images) -> torch.Tensor:
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(arr).permute(0, 3, 1, 2) * 2 - 1


class SurrogateClip:
    """Image and text embeddings in one space from the frozen surrogates.

    Text embeddings are a fixed random projection of the mean tag vector, so
    CLIP-T values are well defined but carry no learned alignment.
    """

    def __init__(self, vit: SurrogateViT, text: SurrogateTextEncoder, seed: int = 0):
        self.vit = vit
        self.text = text
        g = torch.Generator().manual_seed(seed + 17)
        self.text_proj = torch.randn(text.context_dim, 2 * vit.embed_dim, generator=g) / math.sqrt(text.context_dim)

    def embed_images(self, images) -> np.ndarray:
        return self.vit.image_embedding(_batch_to_tensor(images)).double().numpy()

    def embed_texts(self, prompts: Sequence[str]) -> np.ndarray:
        rows = []
        for p in prompts:
            n = len([t for t in p.split(",") if t.strip()][: self.text.max_tokens])
            ctx = self.text.encode_one(p)
            rows.append(ctx[: n + 1].mean(0) @ self.text_proj)
        return torch.stack(rows).double().numpy()


class SurrogateLpips:
    """LPIPS-shaped distance on surrogate ViT features.

    Per layer: unit-normalise each token's feature vector, take the squared
    difference, average over tokens; the distance is the mean over layers.
    There are no learned channel weights.
    """

    def __init__(self, vit: SurrogateViT):
        self.vit = vit

    @torch.no_grad()
    def __call__(self, a: np.ndarray, b: np.ndarray) -> float:
        ha = self.vit.hidden_states(_batch_to_tensor(a))
        hb = self.vit.hidden_states(_batch_to_tensor(b))
        total = 0.0
        for x, y in zip(ha, hb):
            x = x / x.norm(dim=-1, keepdim=True).clamp_min(1e-10)
            y = y / y.norm(dim=-1, keepdim=True).clamp_min(1e-10)
            total += float(((x - y) ** 2).sum(-1).mean())
        return total / len(ha)


# --- metrics -------------------------------------------------------------------

def white_composite(image: np.ndarray, mask: np.ndarray, white: float = 1.0) -> np.ndarray:
    """Keep the masked foreground; every other pixel becomes ``white``."""
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != image.shape[:2]:
        raise ValueError(f"mask {mask.shape} does not match image {image.shape[:2]}")
    out = np.full_like(image, white)
    out[mask] = image[mask]
    return out


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def masked_clip_i(gen, ref, gen_mask, ref_mask, encoder: ImageTextEncoder) -> float:
    """Cosine of image embeddings after white-compositing both images."""
    if not np.any(gen_mask) or not np.any(ref_mask):
        warnings.warn("empty mask in masked CLIP-I: scoring an all-white image", stacklevel=2)
    emb = encoder.embed_images(np.stack([white_composite(gen, gen_mask), white_composite(ref, ref_mask)]))
    return cosine(emb[0], emb[1])


def diversity(samples: Sequence[np.ndarray], distance: Distance) -> float:
    """Mean pairwise distance over the 6 unordered pairs of 4 samples."""
    if len(samples) != SAMPLES_PER_CASE:
        raise ValueError(f"diversity needs exactly {SAMPLES_PER_CASE} samples, got {len(samples)}")
    pairs = list(itertools.combinations(range(len(samples)), 2))
    return sum(distance(samples[i], samples[j]) for i, j in pairs) / len(pairs)


def psnr(gen, ref, mask, peak: float = 1.0, cap: float = PSNR_CAP) -> float:
    """PSNR over foreground pixels only, capped at ``cap`` dB."""
    gen = np.asarray(gen, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if gen.shape != ref.shape:
        raise ValueError(f"image shapes differ: {gen.shape} vs {ref.shape}")
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("psnr needs a non-empty foreground")
    mse = float(((gen - ref)[mask] ** 2).mean())
    if mse == 0:
        return cap
    return min(cap, 10 * math.log10(peak ** 2 / mse))


def fid(feats_a: np.ndarray, feats_b: np.ndarray, jitter: float = 1e-6) -> float:
    """Frechet distance between Gaussians fitted to two feature sets."""
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    if len(a) < 2 or len(b) < 2:
        raise ValueError("fid needs at least 2 items per set")
    d = a.shape[1]
    sa = np.atleast_2d(np.cov(a, rowvar=False)) + jitter * np.eye(d)
    sb = np.atleast_2d(np.cov(b, rowvar=False)) + jitter * np.eye(d)
    covmean = scipy.linalg.sqrtm(sa @ sb)
    covmean = np.real(covmean)
    diff = a.mean(0) - b.mean(0)
    return max(0.0, float(diff @ diff + np.trace(sa + sb - 2 * covmean)))


def clip_t(gen, prompt: str, encoder: ImageTextEncoder) -> float:
    if not prompt or not prompt.strip():
        raise ValueError("clip_t needs a non-empty prompt")
    return cosine(encoder.embed_images(np.asarray(gen)[None])[0], encoder.embed_texts([prompt])[0])


def akd_mkr(gen: PoseSkeleton, cond: PoseSkeleton, pixel_size: tuple[int, int] | None = None):
    """``(akd, mkr)``; ``None`` when the condition has no detected joints.

    AKD is the mean distance over joints detected in both skeletons (``nan``
    if there are none), in normalised units unless ``pixel_size=(w, h)``.
    """
    if cond.num_detected == 0:
        return None
    both = gen.detected & cond.detected
    mkr = float((cond.detected & ~gen.detected).sum() / cond.num_detected)
    if not both.any():
        return float("nan"), mkr
    diff = gen.xy[both] - cond.xy[both]
    if pixel_size is not None:
        diff = diff * np.asarray(pixel_size, dtype=np.float64)
    return float(np.linalg.norm(diff, axis=1).mean()), mkr


def is_failure(skeleton: PoseSkeleton, min_joints: int = 4) -> bool:
    return skeleton.num_detected < min_joints


def failure_rate(skeletons: Sequence[PoseSkeleton], min_joints: int = 4) -> float:
    if not skeletons:
        return 0.0
    return sum(is_failure(s, min_joints) for s in skeletons) / len(skeletons)


# --- cases and reports -----------------------------------------------------------

@dataclass
class EvalCase:
    case_id: str
    task: str
    reference: np.ndarray
    ref_mask: np.ndarray
    prompt: str
    pose: PoseSkeleton | None = None
    samples: list[np.ndarray] = field(default_factory=list)


class CaseGenerator(Protocol):
    def generate(self, case: EvalCase) -> list[np.ndarray]: ...


class IdentityGenerator:
    """Returns the reference four times."""

    def generate(self, case: EvalCase) -> list[np.ndarray]:
        return [np.array(case.reference) for _ in range(SAMPLES_PER_CASE)]


class StubGenerator:
    """Serves precomputed samples keyed by case id."""

    def __init__(self, outputs: dict[str, list[np.ndarray]]):
        self.outputs = outputs

    def generate(self, case: EvalCase) -> list[np.ndarray]:
        if case.case_id not in self.outputs:
            raise BackendError(f"no stub output for case {case.case_id!r}")
        return [np.asarray(x) for x in self.outputs[case.case_id]]


@dataclass
class EvalBackends:
    encoder: ImageTextEncoder
    distance: Distance
    segmenter: object
    pose_extractor: object
    min_joints: int = 4
    akd_pixels: bool = False


@dataclass
class CaseResult:
    case_id: str
    task: str
    metrics: dict[str, float]
    samples: int
    gen_features: np.ndarray | None = None
    ref_features: np.ndarray | None = None


def _segment(backends: EvalBackends, image: np.ndarray, case_id: str) -> np.ndarray:
    return np.asarray(backends.segmenter.segment(SegmenterRequest(image, "character", case_id)), dtype=bool)


def score_case(case: EvalCase, samples: Sequence[np.ndarray], backends: EvalBackends) -> CaseResult:
    if len(samples) != SAMPLES_PER_CASE:
        raise ValueError(f"case {case.case_id}: expected {SAMPLES_PER_CASE} samples, got {len(samples)}")
    ref = np.asarray(case.reference, dtype=np.float64)
    masks = [_segment(backends, s, case.case_id) for s in samples]
    ref_fg = white_composite(ref, case.ref_mask)
    m: dict[str, float] = {}
    m["clip_t"] = float(np.mean([clip_t(s, case.prompt, backends.encoder) for s in samples]))
    m["clip_i_masked"] = float(np.mean([masked_clip_i(s, ref, gm, case.ref_mask, backends.encoder)
                                        for s, gm in zip(samples, masks)]))
    m["lpips"] = float(np.mean([backends.distance(white_composite(s, gm), ref_fg) for s, gm in zip(samples, masks)]))
    m["lpips_div"] = diversity(list(samples), backends.distance)
    if case.ref_mask.any():
        m["psnr"] = float(np.mean([psnr(s, ref, case.ref_mask) for s in samples]))
    if case.pose is not None:
        size = (ref.shape[1], ref.shape[0]) if backends.akd_pixels else None
        skels = [backends.pose_extractor.extract_pose(np.asarray(s)) for s in samples]
        pairs = [akd_mkr(sk, case.pose, size) for sk in skels]
        pairs = [p for p in pairs if p is not None]
        akds = [a for a, _ in pairs if not math.isnan(a)]
        if akds:
            m["akd"] = float(np.mean(akds))
        if pairs:
            m["mkr"] = float(np.mean([k for _, k in pairs]))
        m["failure"] = failure_rate(skels, backends.min_joints)
    gen_feats = backends.encoder.embed_images(np.stack([white_composite(s, gm) for s, gm in zip(samples, masks)]))
    ref_feats = backends.encoder.embed_images(ref_fg[None])
    return CaseResult(case.case_id, case.task, m, len(samples), gen_feats, ref_feats)


@dataclass
class MetricsReport:
    per_task: dict[str, dict[str, float]] = field(default_factory=dict)
    counts: dict[str, dict[str, int]] = field(default_factory=dict)
    aggregate: dict[str, float] = field(default_factory=dict)
    min_joints: int = 4
    errors: list[str] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not self.per_task

    def to_dict(self) -> dict:
        return {"columns": list(TABLE_COLUMNS), "failure_min_joints": self.min_joints, "per_task": self.per_task,
                "aggregate": self.aggregate, "counts": self.counts, "errors": self.errors}

    def to_text(self) -> str:
        lines = [f"# failure threshold: fewer than {self.min_joints} detected joints"]
        head = ["task"] + [COLUMN_TITLES[c] for c in TABLE_COLUMNS]
        lines.append("\t".join(head))
        rows = list(self.per_task.items())
        if self.aggregate:
            rows.append(("all", self.aggregate))
        for task, vals in rows:
            cells = [task] + [f"{vals[c]:.4f}" if c in vals else "-" for c in TABLE_COLUMNS]
            lines.append("\t".join(cells))
        return "\n".join(lines) + "\n"


def _mean_metrics(results: Sequence[CaseResult]) -> dict[str, float]:
    out = {}
    for col in TABLE_COLUMNS:
        vals = [r.metrics[col] for r in results if col in r.metrics]
        if vals:
            out[col] = float(np.mean(vals))
    return out


def _set_fid(results: Sequence[CaseResult]) -> float | None:
    gen = [r.gen_features for r in results if r.gen_features is not None]
    ref = [r.ref_features for r in results if r.ref_features is not None]
    if not gen or not ref:
        return None
    gen, ref = np.concatenate(gen), np.concatenate(ref)
    if len(gen) < 2 or len(ref) < 2:
        return None
    return fid(gen, ref)


def build_report(results: Sequence[CaseResult], min_joints: int = 4, skipped: dict[str, int] | None = None,
                 errors: list[str] | None = None) -> MetricsReport:
    report = MetricsReport(min_joints=min_joints, errors=list(errors or []))
    tasks = list(dict.fromkeys(r.task for r in results)) + [t for t in (skipped or {}) if t not in
                                                           {r.task for r in results}]
    for task in tasks:
        rs = [r for r in results if r.task == task]
        vals = _mean_metrics(rs)
        f = _set_fid(rs)
        if f is not None:
            vals["fid"] = f
        report.per_task[task] = vals
        report.counts[task] = {"cases": len(rs), "samples": sum(r.samples for r in rs),
                               "skipped": (skipped or {}).get(task, 0)}
    if results:
        report.aggregate = _mean_metrics(results)
        f = _set_fid(results)
        if f is not None:
            report.aggregate["fid"] = f
    return report


def run_eval(cases: Sequence[EvalCase], generator: CaseGenerator, backends: EvalBackends,
             out_dir: str | Path | None = None) -> MetricsReport:
    """Generate four samples per case, score them and write the report."""
    results, errors = [], []
    skipped: dict[str, int] = {}
    for case in cases:
        try:
            samples = generator.generate(case)
            results.append(score_case(case, samples, backends))
        except (BackendError, ValueError) as exc:
            skipped[case.task] = skipped.get(case.task, 0) + 1
            errors.append(f"{case.case_id}: {exc}")
            log.warning("case %s skipped: %s", case.case_id, exc)
    report = build_report(results, backends.min_joints, skipped, errors)
    if out_dir is not None:
        write_report(report, results, out_dir)
    return report


def write_report(report: MetricsReport, results: Sequence[CaseResult], out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "cases.jsonl", "w", encoding="utf-8") as f:
        for r in results:
            for name in TABLE_COLUMNS:
                if name in r.metrics:
                    f.write(json.dumps({"case_id": r.case_id, "task": r.task, "metric": name,
                                        "value": r.metrics[name]}) + "\n")
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2), encoding="utf-8")
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
