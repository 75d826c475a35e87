"""Deterministic DDIM-style noise schedule.

A trajectory index i runs from 0 (clean latent) to `steps` (noisiest point);
`alphas_cumprod[i]` is the retained-signal fraction at that index, taken
from a scaled-linear beta schedule subsampled to the requested step count.
Both the inversion and the sampling direction use the same noise-free
update, so the two are exact inverses whenever the predicted noise at a
given index agrees.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

TRAIN_STEPS = 1000
BETA_START = 0.00085
BETA_END = 0.012


@dataclass(frozen=True)
class DiffusionSchedule:
    steps: int
    alphas_cumprod: torch.Tensor  # (steps + 1,), float64, index 0 == 1.0
    train_timesteps: tuple[int, ...]  # backbone timestep picked per index

    def __post_init__(self) -> None:
        ab = self.alphas_cumprod
        if ab.shape != (self.steps + 1,):
            raise ValueError("alphas_cumprod must have steps + 1 entries")
        if float(ab[0]) != 1.0:
            raise ValueError("index 0 must be the clean latent (alpha_bar = 1)")
        if not bool((ab[1:] < ab[:-1]).all()) or float(ab[-1]) <= 0.0:
            raise ValueError("alphas_cumprod must decrease strictly and stay positive")


def make_schedule(steps: int) -> DiffusionSchedule:
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if steps >= TRAIN_STEPS:
        raise ValueError(f"steps must be < {TRAIN_STEPS}, got {steps}")
    betas = (
        torch.linspace(BETA_START**0.5, BETA_END**0.5, TRAIN_STEPS, dtype=torch.float64)
        ** 2
    )
    ab_train = torch.cumprod(1.0 - betas, dim=0)
    picks = torch.round(
        torch.linspace(0, TRAIN_STEPS - 1, steps, dtype=torch.float64)
    ).to(torch.long)
    ab = torch.empty(steps + 1, dtype=torch.float64)
    ab[0] = 1.0
    ab[1:] = ab_train[picks]
    return DiffusionSchedule(
        steps=steps,
        alphas_cumprod=ab,
        train_timesteps=tuple(int(t) for t in picks.tolist()),
    )


def ddim_step(
    x: torch.Tensor, eps: torch.Tensor, ab_cur: float, ab_next: float
) -> torch.Tensor:
    """Move a latent between noise levels with the eta=0 update.

    Works in both directions: ab_next < ab_cur adds noise structure
    (inversion), ab_next > ab_cur removes it (sampling).
    """
    sc = ab_cur**0.5
    sn = ab_next**0.5
    x0 = (x - (1.0 - ab_cur) ** 0.5 * eps) / sc
    return sn * x0 + (1.0 - ab_next) ** 0.5 * eps
