"""Decoupled cross-attention with token-level reference masks.

Each cross-attention site computes the usual text attention and adds one
image branch per reference image::

    Z = Attn(Q, K, V) + sum_i scale_i * Attn_i(Q, I_i W_K', I_i W_V')

Two masking mechanisms gate which reference tokens an image branch may use:

* ``train_bias``: background tokens get ``-neg_bias`` added to their logits
  before the softmax.
* ``infer_multiplicative``: the softmax weights are multiplied by the mask
  afterwards and are not renormalised.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn as nn

from .encoder import EncoderSpec
from .errors import ShapeError

MODES = ("train_bias", "infer_multiplicative")
SCOPES = ("full_blocks", "up_blocks")
STAGES = ("down", "mid", "up")


@dataclass
class InjectionConfig:
    gamma: float = 1.0
    ref_scales: tuple[float, ...] = ()
    neg_bias: float = 1e4
    mode: str = "train_bias"
    scope: str = "full_blocks"
    renormalize: bool = False

    def __post_init__(self):
        if self.gamma < 0 or any(s < 0 for s in self.ref_scales):
            raise ValueError("injection scales must be non-negative")
        if self.neg_bias <= 0:
            raise ValueError("neg_bias must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.scope not in SCOPES:
            raise ValueError(f"scope must be one of {SCOPES}")


@dataclass
class TokenMask:
    """Binary gate over the ``N`` reference tokens (1 = usable foreground)."""

    values: torch.Tensor
    origin: str = ""

    def __post_init__(self):
        self.values = torch.as_tensor(self.values)
        if not torch.all((self.values == 0) | (self.values == 1)):
            raise ValueError("token mask entries must be 0 or 1")

    def __len__(self) -> int:
        return self.values.shape[-1]

    @classmethod
    def ones(cls, n: int, origin: str = "all-ones") -> "TokenMask":
        return cls(torch.ones(n), origin)


def attention_weights(q: torch.Tensor, k: torch.Tensor, logit_bias: torch.Tensor | None = None) -> torch.Tensor:
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    logits = (q @ k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
    if logit_bias is not None:
        logits = logits + logit_bias.unsqueeze(-2)
    return torch.softmax(logits, dim=-1)


def attention(q, k, v, logit_bias=None, weight_mask=None, renormalize=False):
    """Scaled dot-product attention with optional pre-softmax bias and post-softmax gate."""
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    w = attention_weights(q, k, logit_bias)
    if weight_mask is not None:
        w = w * weight_mask.unsqueeze(-2).to(w.dtype)
        if renormalize:
            w = w / w.sum(-1, keepdim=True).clamp_min(torch.finfo(w.dtype).tiny)
    return w @ v


def _check_tokens(tokens: torch.Tensor, w_k: torch.Tensor, w_v: torch.Tensor) -> None:
    if tokens.shape[-1] != w_k.shape[0] or tokens.shape[-1] != w_v.shape[0]:
        raise ShapeError(f"image tokens of width {tokens.shape[-1]} do not match projections "
                         f"{tuple(w_k.shape)} / {tuple(w_v.shape)}")


def decoupled_attention(q, k, v, image_tokens, w_k, w_v, gamma: float):
    """Text attention plus ``gamma`` times attention over projected image tokens."""
    _check_tokens(image_tokens, w_k, w_v)
    base = attention(q, k, v)
    return base + gamma * attention(q, image_tokens @ w_k, image_tokens @ w_v)


class Reference(NamedTuple):
    tokens: torch.Tensor  # (..., N, D')
    mask: torch.Tensor | TokenMask | None
    scale: float


def _mask_values(mask, n: int) -> torch.Tensor | None:
    if mask is None:
        return None
    values = mask.values if isinstance(mask, TokenMask) else torch.as_tensor(mask)
    if values.shape[-1] != n:
        raise ShapeError(f"mask of length {values.shape[-1]} for {n} reference tokens")
    return values


def masked_image_branch(q, tokens, mask, w_k, w_v, mode: str, neg_bias: float = 1e4,
                        renormalize: bool = False) -> torch.Tensor:
    _check_tokens(tokens, w_k, w_v)
    m = _mask_values(mask, tokens.shape[-2])
    keys, values = tokens @ w_k, tokens @ w_v
    if m is None:
        return attention(q, keys, values)
    m = m.to(q.dtype)
    if mode == "train_bias":
        if not torch.all(m.sum(-1) > 0):
            warnings.warn("all-zero token mask in train_bias mode: attention falls back to the unmasked pattern",
                          stacklevel=3)
        return attention(q, keys, values, logit_bias=(m - 1.0) * neg_bias)
    if mode == "infer_multiplicative":
        return attention(q, keys, values, weight_mask=m, renormalize=renormalize)
    raise ValueError(f"unknown mask mode {mode!r}")


def masked_multi_reference_attention(q, k, v, refs: Sequence[Reference], w_k, w_v, mode: str,
                                     neg_bias: float = 1e4, renormalize: bool = False) -> torch.Tensor:
    """Text attention plus one masked, scaled image branch per reference."""
    out = attention(q, k, v)
    if not refs:
        return out
    extra = 0.0
    for tokens, mask, scale in refs:
        extra = extra + scale * masked_image_branch(q, tokens, mask, w_k, w_v, mode, neg_bias, renormalize)
    return out + extra


def pixel_mask_to_token_mask(mask, spec: EncoderSpec, threshold: float = 0.5, cls_foreground: bool = True,
                             origin: str = "") -> TokenMask:
    """Downsample a binary ``H x W`` mask to one entry per patch token.

    A patch counts as foreground when its fraction of foreground pixels is at
    least ``threshold``. The class token entry comes first.
    """
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != (spec.height, spec.width):
        raise ShapeError(f"mask shape {m.shape} != encoder input {(spec.height, spec.width)}")
    gh, gw = spec.grid
    p = spec.patch
    frac = (m > 0).reshape(gh, p, gw, p).mean(axis=(1, 3)).reshape(-1)
    values = np.concatenate([[1.0 if cls_foreground else 0.0], (frac >= threshold).astype(np.float64)])
    return TokenMask(torch.from_numpy(values), origin)


@dataclass(frozen=True)
class CrossAttentionSite:
    site_id: str
    stage: str
    query_dim: int
    context_dim: int

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")


def select_sites(sites: Sequence[CrossAttentionSite], scope: str) -> list[CrossAttentionSite]:
    if scope == "full_blocks":
        return list(sites)
    if scope == "up_blocks":
        return [s for s in sites if s.stage == "up"]
    raise ValueError(f"unknown injection scope {scope!r}")


class AlreadyAttachedError(RuntimeError):
    pass


class ImageProjections(nn.Module):
    """Per-site learnable image key/value projections ``W_K'``, ``W_V'``."""

    def __init__(self, seed: int = 0):
        super().__init__()
        self.w_k = nn.ParameterDict()
        self.w_v = nn.ParameterDict()
        self.scope: str | None = None
        self.stages: dict[str, str] = {}
        self._seed = seed

    @staticmethod
    def _key(site_id: str) -> str:
        return site_id.replace(".", "__")

    def attach(self, sites: Sequence[CrossAttentionSite], scope: str, image_dim: int | None = None,
               init_from: dict[str, tuple[torch.Tensor, torch.Tensor]] | None = None) -> list[str]:
        """Create a fresh projection pair for every site in ``scope``.

        ``init_from`` maps site ids to text ``(W_K, W_V)`` used as the initial
        values when shapes allow, as IP-Adapter does.
        """
        if self.scope is not None:
            raise AlreadyAttachedError(f"projections already attached with scope {self.scope!r}")
        chosen = select_sites(sites, scope)
        g = torch.Generator().manual_seed(self._seed)
        for site in chosen:
            d_in = image_dim or site.context_dim
            init = (init_from or {}).get(site.site_id)
            if init is not None and tuple(init[0].shape) == (d_in, site.query_dim):
                wk, wv = init[0].detach().clone(), init[1].detach().clone()
            else:
                wk = torch.randn(d_in, site.query_dim, generator=g) / math.sqrt(d_in)
                wv = torch.randn(d_in, site.query_dim, generator=g) / math.sqrt(d_in)
            self.w_k[self._key(site.site_id)] = nn.Parameter(wk.float())
            self.w_v[self._key(site.site_id)] = nn.Parameter(wv.float())
            self.stages[site.site_id] = site.stage
        self.scope = scope
        return [s.site_id for s in chosen]

    @classmethod
    def from_tensors(cls, scope: str, pairs: dict[str, tuple[torch.Tensor, torch.Tensor]]) -> "ImageProjections":
        """Rebuild attached projections (e.g. from a checkpoint); site ids look like ``up.0``."""
        if scope not in SCOPES:
            raise ValueError(f"unknown injection scope {scope!r}")
        proj = cls()
        for site_id, (wk, wv) in pairs.items():
            stage = site_id.split(".")[0]
            if stage not in STAGES:
                raise ValueError(f"site id {site_id!r} has no stage prefix")
            proj.w_k[cls._key(site_id)] = nn.Parameter(torch.as_tensor(wk).float().clone())
            proj.w_v[cls._key(site_id)] = nn.Parameter(torch.as_tensor(wv).float().clone())
            proj.stages[site_id] = stage
        proj.scope = scope
        return proj

    def site_ids(self) -> list[str]:
        return list(self.stages)

    def has(self, site_id: str) -> bool:
        return self._key(site_id) in self.w_k

    def pair(self, site_id: str) -> tuple[torch.Tensor, torch.Tensor]:
        key = self._key(site_id)
        return self.w_k[key], self.w_v[key]


def attach(projections: ImageProjections, sites: Sequence[CrossAttentionSite], scope: str, **kwargs) -> list[str]:
    return projections.attach(sites, scope, **kwargs)
