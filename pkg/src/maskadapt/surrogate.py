"""Frozen desk-scale stand-ins for the text encoder, U-Net and pose controllers.

The surrogate U-Net works directly on ``p x p`` pixel patches of a small
image: one latent token per patch, a stack of cross-attention sites tagged
down / mid / up, and a clean-image head whose output is converted into a
noise prediction through the schedule. All weights are drawn from a seed
and never trained; only adapter parameters attached from outside learn.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backends import NUM_JOINTS, PoseSkeleton
from .diffusion import NoiseSchedule
from .encoder import SurrogateViT, images_to_patches, patches_to_images
from .injection import (
    CrossAttentionSite,
    ImageProjections,
    InjectionConfig,
    Reference,
    masked_multi_reference_attention,
)

CONTROLLER_KINDS = ("t2i_adapter", "controlnet", "none")


def _seeded_(module: nn.Module, seed: int) -> None:
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in module.named_parameters():
            if p.ndim >= 2:
                p.copy_(torch.randn(p.shape, generator=g) / math.sqrt(p.shape[0]))
            else:
                p.zero_()


def _tag_vector(tag: str, dim: int) -> torch.Tensor:
    seed = int.from_bytes(hashlib.sha256(tag.encode("utf-8")).digest()[:8], "little")
    g = torch.Generator().manual_seed(seed)
    return torch.randn(dim, generator=g)


class SurrogateTextEncoder(nn.Module):
    """Hashes each comma-separated tag to a fixed random vector.

    Output has a fixed length: a start token, up to ``max_tokens`` tag
    vectors, then padding vectors, like CLIP's padded context.
    """

    def __init__(self, context_dim: int = 192, max_tokens: int = 16, seed: int = 0, scale: float = 0.5):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.context_dim = context_dim
        self.max_tokens = max_tokens
        self.scale = scale
        self.register_buffer("bos", torch.randn(context_dim, generator=g))
        self.register_buffer("pad", torch.randn(context_dim, generator=g))
        self._cache: dict[str, torch.Tensor] = {}

    def encode_one(self, prompt: str) -> torch.Tensor:
        if prompt not in self._cache:
            tags = [t.strip() for t in prompt.split(",") if t.strip()][: self.max_tokens]
            rows = [self.bos] + [_tag_vector(t, self.context_dim) for t in tags]
            rows += [self.pad] * (self.max_tokens + 1 - len(rows))
            self._cache[prompt] = self.scale * torch.stack(rows)
        return self._cache[prompt]

    def forward(self, prompts: Sequence[str]) -> torch.Tensor:
        return torch.stack([self.encode_one(p) for p in prompts])


def skeleton_features(skeletons: Sequence[PoseSkeleton | None], grid: int) -> torch.Tensor:
    """Per-patch joint occupancy, ``(B, grid*grid, 18)``; ``None`` gives zeros."""
    out = torch.zeros(len(skeletons), grid * grid, NUM_JOINTS)
    for b, sk in enumerate(skeletons):
        if sk is None:
            continue
        for j in np.nonzero(sk.detected)[0]:
            col = min(int(sk.xy[j, 0] * grid), grid - 1)
            row = min(int(sk.xy[j, 1] * grid), grid - 1)
            out[b, row * grid + col, j] += float(sk.confidence[j])
    return out


class PoseController(nn.Module):
    """Frozen pose controller producing per-site residuals.

    ``t2i_adapter`` feeds the down sites, ``controlnet`` the mid and up sites,
    mirroring where those modules inject into a real U-Net.
    """

    def __init__(self, kind: str, sites: Sequence[CrossAttentionSite], grid: int, model_dim: int,
                 seed: int = 0, strength: float = 0.5):
        super().__init__()
        if kind not in CONTROLLER_KINDS:
            raise ValueError(f"controller kind must be one of {CONTROLLER_KINDS}")
        self.kind = kind
        self.grid = grid
        self.strength = strength
        stages = {"t2i_adapter": ("down",), "controlnet": ("mid", "up"), "none": ()}[kind]
        self.targets = [s.site_id for s in sites if s.stage in stages]
        self.encode = nn.Sequential(nn.Linear(NUM_JOINTS, model_dim), nn.Tanh())
        self.heads = nn.ModuleDict({t.replace(".", "__"): nn.Linear(model_dim, model_dim, bias=False)
                                    for t in self.targets})
        _seeded_(self, seed + 7)
        self.requires_grad_(False)
        self.calls = 0

    def forward(self, skeletons: Sequence[PoseSkeleton | None]) -> dict[str, torch.Tensor]:
        if self.kind == "none":
            return {}
        self.calls += 1
        feats = self.encode(skeleton_features(skeletons, self.grid))
        return {t: self.strength * self.heads[t.replace(".", "__")](feats) for t in self.targets}


class _Site(nn.Module):
    def __init__(self, model_dim: int, context_dim: int, inner_dim: int, mlp_scale: float):
        super().__init__()
        self.to_q = nn.Linear(model_dim, inner_dim, bias=False)
        self.to_k = nn.Linear(context_dim, inner_dim, bias=False)
        self.to_v = nn.Linear(context_dim, inner_dim, bias=False)
        self.to_out = nn.Linear(inner_dim, model_dim, bias=False)
        self.fc1 = nn.Linear(model_dim, model_dim)
        self.fc2 = nn.Linear(model_dim, model_dim)
        self.mlp_scale = mlp_scale


class SurrogateUNet(nn.Module):
    """Patch-token denoiser with named cross-attention sites.

    The network predicts a clean image ``x0_hat`` and returns
    ``eps_hat = (x_t - sqrt(abar_t) x0_hat) / sqrt(1 - abar_t)``.
    """

    def __init__(self, schedule: NoiseSchedule, image_size: int = 32, patch: int = 8, channels: int = 3,
                 model_dim: int = 192, context_dim: int = 192, inner_dim: int = 192,
                 layout: tuple[int, int, int] = (2, 1, 2), x_scale: float = 0.1, time_scale: float = 0.1,
                 mlp_scale: float = 0.1, seed: int = 0):
        super().__init__()
        self.schedule = schedule
        self.image_size = image_size
        self.patch = patch
        self.channels = channels
        self.grid = image_size // patch
        self.x_scale = x_scale
        self.time_scale = time_scale
        n_tokens = self.grid ** 2
        patch_dim = channels * patch * patch
        self.sites: list[CrossAttentionSite] = []
        for stage, count in zip(("down", "mid", "up"), layout):
            for i in range(count):
                self.sites.append(CrossAttentionSite(f"{stage}.{i}", stage, inner_dim, context_dim))
        self.blocks = nn.ModuleDict({s.site_id.replace(".", "__"): _Site(model_dim, context_dim, inner_dim, mlp_scale)
                                     for s in self.sites})
        self.pos = nn.Parameter(torch.zeros(n_tokens, model_dim))
        self.x_in = nn.Linear(patch_dim, model_dim, bias=False)
        self.t_in = nn.Linear(16, model_dim, bias=False)
        self.head = nn.Linear(model_dim, patch_dim)
        _seeded_(self, seed + 3)
        with torch.no_grad():
            self.pos.copy_(torch.randn(self.pos.shape, generator=torch.Generator().manual_seed(seed + 5)))
        self.requires_grad_(False)

    def text_projections(self) -> dict[str, tuple[torch.Tensor, torch.Tensor]]:
        """Text ``(W_K, W_V)`` per site, laid out as ``context_dim x inner_dim``."""
        return {s.site_id: (self.blocks[s.site_id.replace(".", "__")].to_k.weight.T,
                            self.blocks[s.site_id.replace(".", "__")].to_v.weight.T) for s in self.sites}

    def _time_features(self, t: torch.Tensor) -> torch.Tensor:
        freqs = torch.exp(torch.arange(8, dtype=torch.float32) * -math.log(100.0) / 8)
        ang = t.float().unsqueeze(-1) * freqs
        return torch.cat([ang.sin(), ang.cos()], dim=-1)

    def predict_clean(self, x_t: torch.Tensor, t: torch.Tensor, context: torch.Tensor,
                      refs: Sequence[Reference] = (), projections: ImageProjections | None = None,
                      cfg: InjectionConfig | None = None, control: dict[str, torch.Tensor] | None = None):
        cfg = cfg or InjectionConfig()
        patches = images_to_patches(x_t, self.patch)
        h = self.pos + self.x_scale * self.x_in(patches)
        h = h + self.time_scale * self.t_in(self._time_features(t)).unsqueeze(1)
        for site in self.sites:
            blk = self.blocks[site.site_id.replace(".", "__")]
            hn = F.layer_norm(h, h.shape[-1:])
            q, k, v = blk.to_q(hn), blk.to_k(context), blk.to_v(context)
            if refs and projections is not None and projections.has(site.site_id):
                w_k, w_v = projections.pair(site.site_id)
                z = masked_multi_reference_attention(q, k, v, refs, w_k, w_v, cfg.mode, cfg.neg_bias,
                                                     cfg.renormalize)
            else:
                z = masked_multi_reference_attention(q, k, v, (), None, None, cfg.mode)
            h = h + blk.to_out(z)
            if control and site.site_id in control:
                h = h + control[site.site_id]
            h = h + blk.mlp_scale * blk.fc2(F.gelu(blk.fc1(F.layer_norm(h, h.shape[-1:]))))
        return patches_to_images(self.head(h), self.patch, self.image_size, self.image_size, self.channels)

    def forward(self, x_t, t, context, refs=(), projections=None, cfg=None, control=None) -> torch.Tensor:
        t = torch.as_tensor(t).reshape(-1).expand(x_t.shape[0])
        x0_hat = self.predict_clean(x_t, t, context, refs, projections, cfg, control)
        ab = self.schedule.alpha_bar(t, x_t)
        return (x_t - ab.sqrt() * x0_hat) / (1 - ab).sqrt()


@dataclass
class SurrogateStack:
    """Everything frozen that the trainer and sampler need."""

    unet: SurrogateUNet
    text_encoder: SurrogateTextEncoder
    vision: SurrogateViT
    controller: PoseController
    schedule: NoiseSchedule

    @property
    def unet_context_dim(self) -> int:
        return self.text_encoder.context_dim

    @property
    def image_size(self) -> int:
        return self.unet.image_size


def build_surrogate_stack(controller: str = "t2i_adapter", seed: int = 0, image_size: int = 32, patch: int = 8,
                          timesteps: int = 10, dim: int = 192) -> SurrogateStack:
    schedule = NoiseSchedule.geometric(timesteps)
    unet = SurrogateUNet(schedule, image_size, patch, model_dim=dim, context_dim=dim, inner_dim=dim, seed=seed)
    text = SurrogateTextEncoder(dim, seed=seed + 11)
    vision = SurrogateViT(image_size, patch, hidden_dim=dim, seed=seed + 13)
    ctrl = PoseController(controller, unet.sites, unet.grid, dim, seed=seed)
    return SurrogateStack(unet, text, vision, ctrl, schedule)
