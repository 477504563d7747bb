"""Adapter training: image reconstruction with a frozen base and pose controller.

Only the layer aggregator and the per-site image projections receive
gradients. Each step draws a condition-dropout decision per sample, noises
the image at a uniform timestep, feeds the skeleton to the frozen controller
(never dropped) and runs the denoiser with train-mode masked injection.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .backends import PoseSkeleton
from .diffusion import forward_diffuse, training_loss
from .encoder import LayerAggregator, encode_layers
from .injection import ImageProjections, InjectionConfig, Reference, TokenMask
from .surrogate import SurrogateStack

log = logging.getLogger(__name__)

DROPOUT_MODES = ("reinterpreted", "literal")
IMAGE_ONLY_BELOW = 0.15
TEXT_ONLY_BELOW = 0.20
BOTH_BELOW = 0.25


@dataclass(frozen=True)
class DropoutDecision:
    c: float
    drop_image: bool
    drop_text: bool

    @property
    def category(self) -> str:
        if self.drop_image and self.drop_text:
            return "both"
        if self.drop_image:
            return "image"
        if self.drop_text:
            return "text"
        return "none"


def sample_dropout(c: float, mode: str = "reinterpreted") -> DropoutDecision:
    """Map a uniform draw to which conditions are dropped this step.

    In ``reinterpreted`` mode ``c`` lives in ``[0, 1)`` so 75% of draws keep
    both conditions; ``literal`` mode draws from ``[0, 0.25)`` and always
    drops something. The pose condition is not part of the decision.
    """
    if mode not in DROPOUT_MODES:
        raise ValueError(f"dropout mode must be one of {DROPOUT_MODES}")
    upper = 1.0 if mode == "reinterpreted" else BOTH_BELOW
    if not 0.0 <= c < upper:
        raise ValueError(f"c={c} outside [0, {upper}) for {mode} mode")
    if c < IMAGE_ONLY_BELOW:
        return DropoutDecision(c, True, False)
    if c < TEXT_ONLY_BELOW:
        return DropoutDecision(c, False, True)
    if c < BOTH_BELOW:
        return DropoutDecision(c, True, True)
    return DropoutDecision(c, False, False)


def draw_c(mode: str, generator: torch.Generator) -> float:
    u = torch.rand((), generator=generator, dtype=torch.float64).item()
    return u if mode == "reinterpreted" else u * BOTH_BELOW


@dataclass
class TrainingSample:
    image: torch.Tensor          # (C, H, W) in [-1, 1]
    prompt: str
    mask: TokenMask
    skeleton: PoseSkeleton
    entry_id: str

    def __post_init__(self):
        if self.image.ndim != 3:
            raise ValueError("training image must be (C, H, W)")


@dataclass(frozen=True)
class ControllerHandle:
    kind: str
    frozen: bool = True


@dataclass
class TrainConfig:
    k: int = 4
    gamma: float = 1.0
    neg_bias: float = 1e4
    scope: str = "full_blocks"
    controller: str = "t2i_adapter"
    dropout_mode: str = "reinterpreted"
    lr: float = 1e-4
    lr_schedule: str = "constant"
    weight_decay: float = 1e-2
    batch_size: int = 16
    grad_accum: int = 1
    steps: int = 1000
    checkpoint_every: int = 1000
    log_every: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.dropout_mode not in DROPOUT_MODES:
            raise ValueError(f"dropout_mode must be one of {DROPOUT_MODES}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")
        if self.batch_size < 1 or self.grad_accum < 1 or self.steps < 0:
            raise ValueError("batch_size and grad_accum must be positive, steps non-negative")

    @property
    def effective_batch(self) -> int:
        return self.batch_size * self.grad_accum


class TrainingDivergedError(RuntimeError):
    pass


class FreezeViolation(RuntimeError):
    pass


def module_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class FreezeReport:
    before: dict[str, str]
    after: dict[str, str]

    @property
    def mutated(self) -> list[str]:
        return [k for k in self.before if self.before[k] != self.after.get(k)]

    @property
    def ok(self) -> bool:
        return not self.mutated


class Trainer:
    """Owns the trainable adapter parameters and the optimizer."""

    def __init__(self, stack: SurrogateStack, cfg: TrainConfig):
        if stack.controller.kind != cfg.controller:
            raise ValueError(f"stack controller {stack.controller.kind!r} != config {cfg.controller!r}")
        self.stack = stack
        self.cfg = cfg
        self.handle = ControllerHandle(cfg.controller)
        self.aggregator = LayerAggregator(cfg.k, stack.vision.hidden_dim, stack.unet_context_dim, seed=cfg.seed)
        self.projections = ImageProjections(seed=cfg.seed)
        self.projections.attach(stack.unet.sites, cfg.scope, image_dim=self.aggregator.target_dim,
                                init_from=stack.unet.text_projections())
        self.optimizer = torch.optim.AdamW(self.trainable_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
        self.scheduler = None
        if cfg.lr_schedule == "cosine":
            self.scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(self.optimizer, max(cfg.steps, 1))
        self.generator = torch.Generator().manual_seed(cfg.seed)
        self.step_count = 0
        self.history: list[float] = []
        self._stack_cache: dict[str, torch.Tensor] = {}
        self.baseline = self.freeze_snapshot()

    def trainable_parameters(self) -> list[torch.nn.Parameter]:
        return list(self.aggregator.parameters()) + list(self.projections.parameters())

    def frozen_modules(self) -> dict[str, torch.nn.Module]:
        return {"denoiser": self.stack.unet, "text_encoder": self.stack.text_encoder,
                "vision_encoder": self.stack.vision, "controller": self.stack.controller}

    def freeze_snapshot(self) -> dict[str, str]:
        return {name: module_hash(m) for name, m in self.frozen_modules().items()}

    def layer_stack(self, samples: Sequence[TrainingSample]) -> torch.Tensor:
        # the vision encoder is frozen, so per-entry layer stacks are cached
        missing = [s for s in samples if s.entry_id not in self._stack_cache]
        if missing:
            z = encode_layers(torch.stack([s.image for s in missing]), self.stack.vision, self.cfg.k).z
            for s, zi in zip(missing, z):
                self._stack_cache[s.entry_id] = zi
        return torch.stack([self._stack_cache[s.entry_id] for s in samples])

    def sample_loss(self, samples: Sequence[TrainingSample], generator: torch.Generator | None = None,
                    dropout: bool = True, t: torch.Tensor | None = None, eps: torch.Tensor | None = None,
                    gamma: float | None = None) -> torch.Tensor:
        g = generator or self.generator
        b = len(samples)
        decisions = [sample_dropout(draw_c(self.cfg.dropout_mode, g), self.cfg.dropout_mode) if dropout
                     else DropoutDecision(1.0, False, False) for _ in range(b)]
        x0 = torch.stack([s.image for s in samples])
        T = self.stack.schedule.T
        if t is None:
            t = torch.randint(1, T + 1, (b,), generator=g)
        if eps is None:
            eps = torch.randn(x0.shape, generator=g)
        x_t = forward_diffuse(x0, t, self.stack.schedule, eps=eps)
        prompts = ["" if d.drop_text else s.prompt for d, s in zip(decisions, samples)]
        context = self.stack.text_encoder(prompts)
        keep = torch.tensor([0.0 if d.drop_image else 1.0 for d in decisions]).view(b, 1, 1)
        tokens = self.aggregator(self.layer_stack(samples)) * keep
        masks = torch.stack([s.mask.values.float() for s in samples])
        control = self.stack.controller([s.skeleton for s in samples])
        icfg = InjectionConfig(gamma=self.cfg.gamma if gamma is None else gamma, neg_bias=self.cfg.neg_bias,
                               mode="train_bias", scope=self.cfg.scope)
        refs = [Reference(tokens, masks, icfg.gamma)]
        eps_hat = self.stack.unet(x_t, t, context, refs, self.projections, icfg, control)
        return training_loss(eps, eps_hat)

    def train_step(self, batch: Sequence[TrainingSample]) -> float:
        """One optimizer update; ``batch`` is split into ``grad_accum`` chunks."""
        self.optimizer.zero_grad(set_to_none=True)
        chunks = np.array_split(np.arange(len(batch)), self.cfg.grad_accum)
        total = 0.0
        for idx in chunks:
            if len(idx) == 0:
                continue
            loss = self.sample_loss([batch[i] for i in idx]) * (len(idx) / len(batch))
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at step {self.step_count}: {loss.item()}; "
                    f"alphas={self.aggregator.alphas.detach().tolist()}"
                )
            loss.backward()
            total += loss.item()
        self.optimizer.step()
        if self.scheduler is not None:
            self.scheduler.step()
        self.step_count += 1
        self.history.append(total)
        if self.cfg.log_every and self.step_count % self.cfg.log_every == 0:
            log.info("step %d loss %.6f", self.step_count, total)
        return total

    @torch.no_grad()
    def probe_loss(self, samples: Sequence[TrainingSample], seed: int = 1234, gamma: float | None = None) -> float:
        """Conditioned reconstruction loss on a fixed probe: every timestep, fixed noise, no dropout."""
        T = self.stack.schedule.T
        rep = [s for s in samples for _ in range(T)]
        t = torch.arange(1, T + 1).repeat(len(samples))
        eps = torch.randn((len(rep),) + tuple(samples[0].image.shape), generator=torch.Generator().manual_seed(seed))
        return self.sample_loss(rep, dropout=False, t=t, eps=eps, gamma=gamma).item()

    def audit(self) -> FreezeReport:
        return FreezeReport(self.baseline, self.freeze_snapshot())


def freeze_audit(trainer: Trainer, strict: bool = True) -> FreezeReport:
    """Compare frozen-module hashes with those taken when the trainer was built."""
    report = trainer.audit()
    if strict and not report.ok:
        raise FreezeViolation(f"frozen parameters changed: {', '.join(report.mutated)}")
    return report


def moving_average(values: Sequence[float], window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return np.empty(0)
    c = np.cumsum(np.concatenate([[0.0], v]))
    return (c[window:] - c[:-window]) / window


def iterate_batches(samples: Sequence[TrainingSample], batch_size: int, generator: torch.Generator):
    """Endless shuffled batches (with a fresh permutation each epoch)."""
    n = len(samples)
    while True:
        perm = torch.randperm(n, generator=generator).tolist()
        for i in range(0, n, batch_size):
            chunk = perm[i:i + batch_size]
            if len(chunk) < min(batch_size, n):
                chunk = chunk + perm[: min(batch_size, n) - len(chunk)]
            yield [samples[j] for j in chunk]


def run_training(trainer: Trainer, samples: Sequence[TrainingSample], steps: int | None = None,
                 on_checkpoint=None) -> list[float]:
    steps = trainer.cfg.steps if steps is None else steps
    batches = iterate_batches(samples, trainer.cfg.effective_batch, torch.Generator().manual_seed(trainer.cfg.seed + 1))
    for _ in range(steps):
        trainer.train_step(next(batches))
        if on_checkpoint and trainer.cfg.checkpoint_every and trainer.step_count % trainer.cfg.checkpoint_every == 0:
            on_checkpoint(trainer)
    return trainer.history


def gradient_norms(trainer: Trainer) -> dict[str, float]:
    out = {}
    for name, p in list(trainer.aggregator.named_parameters()) + list(trainer.projections.named_parameters()):
        out[name] = 0.0 if p.grad is None else float(p.grad.norm())
    return out

