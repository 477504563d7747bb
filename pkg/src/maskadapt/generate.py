"""Inference: encode references once, then run a deterministic DDIM chain.

Reference images pass through the vision encoder and aggregator a single
time per request; every denoiser call reuses those tokens through
inference-mode (multiplicative, unnormalised) masked injection.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch

from .backends import PoseSkeleton
from .diffusion import cfg_combine, ddim_step
from .encoder import LayerAggregator, encode_layers
from .injection import ImageProjections, InjectionConfig, Reference, TokenMask, pixel_mask_to_token_mask
from .surrogate import SurrogateStack
from .toydata import stable_seed


@dataclass
class ReferenceInput:
    image: torch.Tensor                     # (C, H, W) in [-1, 1]
    mask: TokenMask | None = None
    scale: float = 1.0
    ref_id: str = ""


@dataclass
class GenerationRequest:
    prompt: str
    references: list[ReferenceInput] = field(default_factory=list)
    skeleton: PoseSkeleton | None = None
    n_samples: int = 4
    seed: int = 0
    gamma: float = 1.0
    guidance: float = 1.0
    steps: int | None = None

    def provenance(self) -> dict:
        return {
            "prompt": self.prompt, "seed": self.seed, "n_samples": self.n_samples, "gamma": self.gamma,
            "guidance": self.guidance, "steps": self.steps, "pose": self.skeleton is not None,
            "references": [{"id": r.ref_id, "scale": r.scale,
                            "mask_tokens_on": None if r.mask is None else int(r.mask.values.sum())}
                           for r in self.references],
        }


def ddim_timesteps(T: int, steps: int | None) -> list[int]:
    """Descending 1-based timesteps; ``steps=None`` walks every step."""
    if steps is None or steps >= T:
        return list(range(T, 0, -1))
    if steps < 1:
        raise ValueError("steps must be positive")
    idx = torch.linspace(T, 1, steps).round().long().tolist()
    return list(dict.fromkeys(idx))


class Sampler:
    """Wraps a frozen stack with optional trained adapter parameters.

    Without an aggregator and projections the sampler is the plain base model.
    """

    def __init__(self, stack: SurrogateStack, aggregator: LayerAggregator | None = None,
                 projections: ImageProjections | None = None, neg_bias: float = 1e4, renormalize: bool = False):
        if (aggregator is None) != (projections is None):
            raise ValueError("aggregator and projections come together")
        self.stack = stack
        self.aggregator = aggregator
        self.projections = projections
        self.neg_bias = neg_bias
        self.renormalize = renormalize
        self.encode_calls = 0

    @property
    def has_adapter(self) -> bool:
        return self.aggregator is not None

    @torch.no_grad()
    def encode_references(self, refs: Sequence[ReferenceInput]) -> list[torch.Tensor]:
        """All references in one encoder pass; returns ``(N, D')`` tokens per reference."""
        if not refs:
            return []
        if not self.has_adapter:
            raise ValueError("references given but no adapter is loaded")
        self.encode_calls += 1
        stack = encode_layers(torch.stack([r.image for r in refs]), self.stack.vision, self.aggregator.k)
        return list(self.aggregator(stack.z))

    @torch.no_grad()
    def sample(self, request: GenerationRequest) -> torch.Tensor:
        st = self.stack
        n = request.n_samples
        tokens = self.encode_references(request.references)
        scope = self.projections.scope if self.projections is not None else "full_blocks"
        icfg = InjectionConfig(gamma=request.gamma, neg_bias=self.neg_bias, mode="infer_multiplicative",
                               scope=scope, renormalize=self.renormalize)
        refs_c = [Reference(tok.expand(n, *tok.shape), r.mask, request.gamma * r.scale)
                  for tok, r in zip(tokens, request.references)]
        refs_u = [Reference(torch.zeros_like(rc.tokens), rc.mask, rc.scale) for rc in refs_c]
        ctx_c = st.text_encoder([request.prompt] * n)
        ctx_u = st.text_encoder([""] * n)
        # the pose condition stays on in both guidance branches
        control = st.controller([request.skeleton] * n) if request.skeleton is not None else None
        g = torch.Generator().manual_seed(request.seed)
        x = torch.randn((n, st.unet.channels, st.image_size, st.image_size), generator=g)
        ts = ddim_timesteps(st.schedule.T, request.steps)
        for i, t in enumerate(ts):
            t_prev = ts[i + 1] if i + 1 < len(ts) else 0
            tt = torch.full((n,), t)
            eps_c = st.unet(x, tt, ctx_c, refs_c, self.projections, icfg, control)
            if request.guidance != 1.0:
                eps_u = st.unet(x, tt, ctx_u, refs_u, self.projections, icfg, control)
                eps = cfg_combine(eps_c, eps_u, request.guidance)
            else:
                eps = eps_c
            x = ddim_step(x, eps, t, t_prev, st.schedule)
        return x.clamp(-1, 1)


def to_unit(images: torch.Tensor) -> torch.Tensor:
    """``[-1, 1]`` CHW batch to ``[0, 1]`` HWC batch."""
    return ((images + 1) / 2).clamp(0, 1).permute(0, 2, 3, 1)


def from_unit(image) -> torch.Tensor:
    """``[0, 1]`` HWC array to ``[-1, 1]`` CHW tensor."""
    return torch.as_tensor(image, dtype=torch.float32).permute(2, 0, 1) * 2 - 1


class SamplerCaseGenerator:
    """Evaluation generator: four samples per case from a reference, its mask and the edit prompt."""

    def __init__(self, sampler: Sampler, spec, n_samples: int = 4, gamma: float = 1.0, guidance: float = 1.0,
                 steps: int | None = None, mask_threshold: float = 0.5, seed: int = 0):
        self.sampler = sampler
        self.spec = spec
        self.n_samples = n_samples
        self.gamma = gamma
        self.guidance = guidance
        self.steps = steps
        self.mask_threshold = mask_threshold
        self.seed = seed

    def generate(self, case) -> list:
        refs = []
        if self.sampler.has_adapter:
            mask = pixel_mask_to_token_mask(case.ref_mask, self.spec, self.mask_threshold, origin=case.case_id)
            refs = [ReferenceInput(from_unit(case.reference), mask, 1.0, case.case_id)]
        req = GenerationRequest(case.prompt, refs, case.pose, self.n_samples, stable_seed(self.seed, case.case_id),
                                self.gamma, self.guidance, self.steps)
        return list(to_unit(self.sampler.sample(req)).double().numpy())
