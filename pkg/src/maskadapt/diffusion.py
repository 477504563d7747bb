"""Forward noising, DDPM/DDIM reverse steps, the noise-prediction loss and CFG.

Timesteps are 1-based: ``t`` runs over ``1..T`` and ``alpha_bar[0]`` of the
schedule arrays belongs to ``t = 1``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ShapeError


@dataclass(frozen=True)
class NoiseSchedule:
    alphas: torch.Tensor      # (T,) float64
    alpha_bars: torch.Tensor  # (T,)
    sigmas: torch.Tensor      # (T,), sigmas[0] == 0
    variance: str = "beta"

    @property
    def T(self) -> int:
        return self.alphas.shape[0]

    @property
    def betas(self) -> torch.Tensor:
        return 1.0 - self.alphas

    @classmethod
    def from_betas(cls, betas, variance: str = "beta", validate: bool = True) -> "NoiseSchedule":
        betas = torch.as_tensor(np.asarray(betas, dtype=np.float64))
        alphas = 1.0 - betas
        return cls._build(alphas, torch.cumprod(alphas, 0), variance, validate)

    @classmethod
    def from_alpha_bars(cls, alpha_bars, variance: str = "beta", validate: bool = True) -> "NoiseSchedule":
        """Build from cumulative products directly (tests use degenerate values here)."""
        ab = torch.as_tensor(np.asarray(alpha_bars, dtype=np.float64))
        prev = torch.cat([torch.ones(1, dtype=ab.dtype), ab[:-1]])
        alphas = torch.where(prev > 0, ab / prev.clamp_min(1e-300), torch.zeros_like(ab))
        return cls._build(alphas, ab, variance, validate)

    @classmethod
    def _build(cls, alphas, alpha_bars, variance, validate):
        if variance not in ("beta", "posterior"):
            raise ValueError("variance must be 'beta' or 'posterior'")
        if validate:
            if not torch.all((alphas > 0) & (alphas < 1)):
                raise ValueError("alphas must lie in (0, 1)")
            if not torch.all(alpha_bars[1:] < alpha_bars[:-1]):
                raise ValueError("alpha_bar must be strictly decreasing")
        betas = 1.0 - alphas
        if variance == "beta":
            var = betas.clone()
        else:
            prev = torch.cat([torch.ones(1, dtype=alpha_bars.dtype), alpha_bars[:-1]])
            var = betas * (1 - prev) / (1 - alpha_bars).clamp_min(1e-300)
        sigmas = var.clamp_min(0).sqrt()
        sigmas[0] = 0.0  # the last reverse step is deterministic
        return cls(alphas, alpha_bars, sigmas, variance)

    @classmethod
    def linear(cls, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2,
               variance: str = "beta") -> "NoiseSchedule":
        return cls.from_betas(np.linspace(beta_start, beta_end, T), variance)

    @classmethod
    def geometric(cls, T: int = 10, beta_start: float = 0.02, beta_end: float = 0.6,
                  variance: str = "beta") -> "NoiseSchedule":
        """Geometrically spaced betas; the short chain used by surrogate runs."""
        return cls.from_betas(np.geomspace(beta_start, beta_end, T), variance)

    def _at(self, arr: torch.Tensor, t, like: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t)
        if torch.any(t < 1) or torch.any(t > self.T):
            raise ValueError(f"timestep out of range 1..{self.T}: {t.tolist()}")
        vals = arr[t.long() - 1].to(like.dtype)
        return vals.reshape(vals.shape + (1,) * (like.ndim - vals.ndim))

    def alpha_bar(self, t, like):
        return self._at(self.alpha_bars, t, like)

    def to_text(self) -> str:
        lines = ["# t\talpha\talpha_bar\tsigma"]
        for i in range(self.T):
            lines.append(f"{i + 1}\t{self.alphas[i].item():.17g}\t{self.alpha_bars[i].item():.17g}"
                         f"\t{self.sigmas[i].item():.17g}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def from_text(cls, text: str) -> "NoiseSchedule":
        rows = [list(map(float, ln.split("\t")[1:])) for ln in text.splitlines() if ln and not ln.startswith("#")]
        a = torch.tensor(rows, dtype=torch.float64)
        return cls(a[:, 0].clone(), a[:, 1].clone(), a[:, 2].clone())


def forward_diffuse(x0: torch.Tensor, t, schedule: NoiseSchedule, eps: torch.Tensor | None = None,
                    generator: torch.Generator | None = None) -> torch.Tensor:
    """``x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``."""
    if eps is None:
        eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    elif eps.shape != x0.shape:
        raise ShapeError("eps must match x0")
    ab = schedule.alpha_bar(t, x0)
    return ab.sqrt() * x0 + (1 - ab).sqrt() * eps


def predict_x0(x_t: torch.Tensor, eps_hat: torch.Tensor, t, schedule: NoiseSchedule) -> torch.Tensor:
    ab = schedule.alpha_bar(t, x_t)
    return (x_t - (1 - ab).sqrt() * eps_hat) / ab.sqrt()


def ddpm_step(x_t: torch.Tensor, eps_hat: torch.Tensor, t, schedule: NoiseSchedule,
              z: torch.Tensor | None = None, generator: torch.Generator | None = None) -> torch.Tensor:
    """One ancestral step ``x_{t-1} = mu(x_t, eps_hat) + sigma_t z``."""
    if eps_hat.shape != x_t.shape:
        raise ShapeError("eps_hat must match x_t")
    a = schedule._at(schedule.alphas, t, x_t)
    ab = schedule._at(schedule.alpha_bars, t, x_t)
    sigma = schedule._at(schedule.sigmas, t, x_t)
    mean = (x_t - (1 - a) / (1 - ab).sqrt() * eps_hat) / a.sqrt()
    if z is None:
        z = torch.randn(x_t.shape, generator=generator, dtype=x_t.dtype)
    return mean + sigma * z


def ddim_step(x_t: torch.Tensor, eps_hat: torch.Tensor, t: int, t_prev: int, schedule: NoiseSchedule) -> torch.Tensor:
    """Deterministic DDIM update (eta = 0) from ``t`` to ``t_prev`` (0 means clean)."""
    x0_hat = predict_x0(x_t, eps_hat, t, schedule)
    if t_prev == 0:
        return x0_hat
    ab_prev = schedule.alpha_bar(t_prev, x_t)
    return ab_prev.sqrt() * x0_hat + (1 - ab_prev).sqrt() * eps_hat


def training_loss(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    if eps.shape != eps_hat.shape:
        raise ShapeError(f"loss inputs differ in shape: {tuple(eps.shape)} vs {tuple(eps_hat.shape)}")
    return ((eps - eps_hat) ** 2).mean()


def cfg_combine(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, w: float) -> torch.Tensor:
    """Guided prediction ``w * eps_cond + (1 - w) * eps_uncond``."""
    if eps_cond.shape != eps_uncond.shape:
        raise ShapeError("conditional and unconditional predictions differ in shape")
    return w * eps_cond + (1 - w) * eps_uncond
