"""Reference image encoding and multi-layer token aggregation.

A vision backend returns one ``N x D`` token matrix per transformer layer
(class token in row 0). :class:`LayerAggregator` projects the last ``k``
layers into the U-Net cross-attention width and mixes them with learnable
per-layer scales, followed by a per-token LayerNorm::

    tokens = LN(sum_i alpha_i * z[L - i] @ W_i)

Nothing here couples tokens, so row ``j`` of the output only depends on
row ``j`` of each input layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import BackendError, BackendUnavailable, ShapeError


@dataclass(frozen=True)
class EncoderSpec:
    height: int
    width: int
    patch: int
    hidden_dim: int
    num_layers: int
    k: int = 4
    target_dim: int = 768

    def __post_init__(self):
        if self.patch <= 0 or self.height % self.patch or self.width % self.patch:
            raise ShapeError(f"image {self.height}x{self.width} not divisible by patch size {self.patch}")
        if not 1 <= self.k <= self.num_layers:
            raise ValueError(f"k must be in [1, {self.num_layers}], got {self.k}")

    @property
    def num_tokens(self) -> int:
        return patch_token_count(self)

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.patch, self.width // self.patch


def patch_token_count(spec: EncoderSpec) -> int:
    """Number of tokens including the class token: ``1 + H*W / p**2``."""
    if spec.height % spec.patch or spec.width % spec.patch:
        raise ShapeError(f"image {spec.height}x{spec.width} not divisible by patch size {spec.patch}")
    return 1 + (spec.height // spec.patch) * (spec.width // spec.patch)


@dataclass
class LayerStack:
    """Tail layers ordered ``z_L, z_{L-1}, ..., z_{L-k+1}``; shape ``(..., k, N, D)``."""

    z: torch.Tensor

    def __post_init__(self):
        if self.z.ndim < 3:
            raise ShapeError("layer stack needs shape (..., k, N, D)")
        if not torch.isfinite(self.z).all():
            raise ValueError("layer stack contains non-finite values")

    @property
    def k(self) -> int:
        return self.z.shape[-3]

    @property
    def num_tokens(self) -> int:
        return self.z.shape[-2]

    @property
    def hidden_dim(self) -> int:
        return self.z.shape[-1]

    def layers(self) -> list[torch.Tensor]:
        return list(self.z.unbind(-3))


@dataclass
class ReferenceTokens:
    tokens: torch.Tensor  # (..., N, D')
    source_id: str = ""
    mask: object | None = None  # TokenMask, kept untyped to avoid an import cycle

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[-2]


class VisionBackend(Protocol):
    num_layers: int
    hidden_dim: int

    def hidden_states(self, images: torch.Tensor) -> list[torch.Tensor]:
        """Return ``num_layers`` tensors of shape ``(B, N, D)``, first layer first."""


def encode_layers(images: torch.Tensor, backend: VisionBackend, k: int) -> LayerStack:
    """Run the frozen backend and keep the last ``k`` layer outputs, newest first."""
    if not 1 <= k <= backend.num_layers:
        raise ValueError(f"k must be in [1, {backend.num_layers}], got {k}")
    try:
        with torch.no_grad():
            states = backend.hidden_states(images)
    except BackendError:
        raise
    except Exception as exc:
        raise BackendError(f"vision backend {type(backend).__name__} failed: {exc}") from exc
    if len(states) != backend.num_layers:
        raise BackendError(f"backend returned {len(states)} layers, expected {backend.num_layers}")
    tail = states[::-1][:k]
    return LayerStack(torch.stack(tail, dim=-3))


def _isometric_init(d_in: int, d_out: int, generator: torch.Generator) -> torch.Tensor:
    a = torch.randn(max(d_in, d_out), min(d_in, d_out), generator=generator, dtype=torch.float64)
    q, r = torch.linalg.qr(a)
    q = q * torch.sign(torch.diagonal(r))
    return q if d_in >= d_out else q.T


class LayerAggregator(nn.Module):
    """Learnable layer-scale aggregation of the last ``k`` encoder layers."""

    def __init__(self, k: int, hidden_dim: int, target_dim: int, seed: int = 0, eps: float = 1e-5):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.k = k
        self.alphas = nn.Parameter(torch.full((k,), 1.0 / k))
        self.projections = nn.Parameter(
            torch.stack([_isometric_init(hidden_dim, target_dim, g) for _ in range(k)]).float()
        )
        self.norm = nn.LayerNorm(target_dim, eps=eps, elementwise_affine=True)
        # test hook: skip the LayerNorm to expose the linear pre-norm sum
        self.bypass_norm = False

    @property
    def hidden_dim(self) -> int:
        return self.projections.shape[1]

    @property
    def target_dim(self) -> int:
        return self.projections.shape[2]

    def pre_norm(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-3] != self.k or z.shape[-1] != self.hidden_dim:
            raise ShapeError(
                f"stack shape {tuple(z.shape)} incompatible with k={self.k}, D={self.hidden_dim}"
            )
        projected = torch.einsum("...knd,kde->...kne", z, self.projections)
        return torch.einsum("k,...kne->...ne", self.alphas, projected)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        out = self.pre_norm(z)
        return out if self.bypass_norm else self.norm(out)


def aggregate(stack: LayerStack, params: LayerAggregator, source_id: str = "") -> ReferenceTokens:
    return ReferenceTokens(params(stack.z), source_id=source_id)


def images_to_patches(images: torch.Tensor, patch: int) -> torch.Tensor:
    """``(B, C, H, W)`` -> ``(B, H*W/p^2, C*p*p)`` in row-major patch order."""
    b, c, h, w = images.shape
    x = images.reshape(b, c, h // patch, patch, w // patch, patch)
    return x.permute(0, 2, 4, 1, 3, 5).reshape(b, (h // patch) * (w // patch), c * patch * patch)


def patches_to_images(patches: torch.Tensor, patch: int, height: int, width: int, channels: int = 3) -> torch.Tensor:
    b = patches.shape[0]
    gh, gw = height // patch, width // patch
    x = patches.reshape(b, gh, gw, channels, patch, patch)
    return x.permute(0, 3, 1, 4, 2, 5).reshape(b, channels, height, width)


class _Block(nn.Module):
    def __init__(self, dim: int, mix: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim, bias=False)
        self.proj = nn.Linear(dim, dim, bias=False)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, 2 * dim)
        self.fc2 = nn.Linear(2 * dim, dim)
        self.mix = mix

    def forward(self, x):
        q, k, v = self.qkv(self.norm1(x)).chunk(3, dim=-1)
        a = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)
        x = x + self.mix * self.proj(a @ v)
        return x + self.mix * self.fc2(F.gelu(self.fc1(self.norm2(x))))


class SurrogateViT(nn.Module):
    """Seeded random-weight ViT standing in for a CLIP image tower.

    Weights are fixed by ``seed`` and never trained. Residual branches are
    scaled by ``mix`` so tokens keep most of their own patch content, which
    mimics the spatial locality of late CLIP layers.
    """

    def __init__(self, image_size: int = 32, patch: int = 8, hidden_dim: int = 192, num_layers: int = 6,
                 embed_dim: int = 64, mix: float = 0.25, seed: int = 0, channels: int = 3):
        super().__init__()
        if image_size % patch:
            raise ShapeError("image_size must be divisible by patch")
        self.image_size = image_size
        self.patch = patch
        self.num_layers = num_layers
        self.hidden_dim = hidden_dim
        self.embed_dim = embed_dim
        g = torch.Generator().manual_seed(seed)
        n_patches = (image_size // patch) ** 2
        patch_dim = channels * patch * patch
        self.patch_embed = nn.Linear(patch_dim, hidden_dim)
        self.cls = nn.Parameter(torch.zeros(hidden_dim))
        self.pos = nn.Parameter(torch.zeros(n_patches + 1, hidden_dim))
        self.blocks = nn.ModuleList(_Block(hidden_dim, mix) for _ in range(num_layers))
        self.head_norm = nn.LayerNorm(hidden_dim)
        self.head = nn.Linear(hidden_dim, embed_dim, bias=False)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("norm1.weight") or name.endswith("norm2.weight") or name == "head_norm.weight":
                    p.fill_(1.0)
                elif "norm" in name:
                    p.zero_()
                elif p.ndim == 2:
                    p.copy_(torch.randn(p.shape, generator=g) / math.sqrt(p.shape[-1]))
                else:
                    p.copy_(0.02 * torch.randn(p.shape, generator=g))
            self.pos.copy_(0.5 * torch.randn(self.pos.shape, generator=g))
            self.cls.copy_(torch.randn(hidden_dim, generator=g))
        self.requires_grad_(False)
        self.eval()

    def spec(self, k: int = 4, target_dim: int | None = None) -> EncoderSpec:
        return EncoderSpec(self.image_size, self.image_size, self.patch, self.hidden_dim, self.num_layers,
                           k, target_dim or self.hidden_dim)

    def _embed(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim == 3:
            images = images.unsqueeze(0)
        if images.shape[-1] != self.image_size or images.shape[-2] != self.image_size:
            raise ShapeError(f"expected {self.image_size}x{self.image_size} images, got {tuple(images.shape)}")
        x = self.patch_embed(images_to_patches(images.to(self.pos.dtype), self.patch))
        cls = self.cls.expand(x.shape[0], 1, -1)
        return torch.cat([cls, x], dim=1) + self.pos

    def hidden_states(self, images: torch.Tensor) -> list[torch.Tensor]:
        x = self._embed(images)
        out = []
        for block in self.blocks:
            x = block(x)
            out.append(x)
        return out

    def image_embedding(self, images: torch.Tensor) -> torch.Tensor:
        """Global embedding used for CLIP-style image similarity."""
        with torch.no_grad():
            last = self.head_norm(self.hidden_states(images)[-1])
            return torch.cat([self.head(last[:, 0]), self.head(last[:, 1:].mean(dim=1))], dim=-1)


class ClipVisionBackend:
    """Adapter for a Hugging Face CLIP vision tower (optional dependency)."""

    MEAN = (0.48145466, 0.4578275, 0.40821073)
    STD = (0.26862954, 0.26130258, 0.27577711)

    def __init__(self, model_name: str = "openai/clip-vit-large-patch14", device: str = "cpu", cache_dir=None):
        try:
            from transformers import CLIPVisionModel
        except ImportError as exc:
            raise BackendUnavailable("transformers is required for the CLIP vision backend") from exc
        try:
            self.model = CLIPVisionModel.from_pretrained(model_name, cache_dir=cache_dir).to(device).eval()
        except Exception as exc:
            raise BackendUnavailable(f"could not load {model_name}: {exc}") from exc
        self.model.requires_grad_(False)
        cfg = self.model.config
        self.num_layers = cfg.num_hidden_layers
        self.hidden_dim = cfg.hidden_size
        self.image_size = cfg.image_size
        self.patch = cfg.patch_size
        self.device = device

    def spec(self, k: int = 4, target_dim: int = 768) -> EncoderSpec:
        return EncoderSpec(self.image_size, self.image_size, self.patch, self.hidden_dim, self.num_layers,
                           k, target_dim)

    def preprocess(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim == 3:
            images = images.unsqueeze(0)
        # backends take [-1, 1]; CLIP normalisation expects [0, 1]
        x = F.interpolate((images.float() + 1) / 2, size=(self.image_size, self.image_size), mode="bicubic",
                          align_corners=False)
        mean = torch.tensor(self.MEAN).view(1, 3, 1, 1)
        std = torch.tensor(self.STD).view(1, 3, 1, 1)
        return ((x - mean) / std).to(self.device)

    def hidden_states(self, images: torch.Tensor) -> list[torch.Tensor]:
        out = self.model(pixel_values=self.preprocess(images), output_hidden_states=True)
        # hidden_states[0] is the embedding output, not a transformer layer
        return [h.cpu() for h in out.hidden_states[1:]]
