"""Training objectives: adversarial terms with gradient penalties,
reconstruction, cycle consistency, and their weighted totals.

Sign conventions are chosen so that everything reported here is
*minimized*: critics minimize ``mean(D(fake)) - mean(D(real)) + GP``,
generators minimize ``-mean(D(fake))`` plus the weighted reconstruction
and cycle terms.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields
from typing import Callable, Optional, Sequence

import torch
from torch import nn

from .backend import grad_of_scalar, rmse
from .generation import NoisePlan, uncond_chain, uncond_step
from .pyramid import ScaleSchedule, resize


@dataclass(frozen=True)
class LossWeights:
    lambda_recon: float = 1.0
    lambda_cycle: float = 10.0
    lambda_gp: float = 0.1

    def __post_init__(self):
        if min(self.lambda_recon, self.lambda_cycle, self.lambda_gp) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossReport:
    """Per-iteration scalar breakdown.

    ``adv_*1`` are the critic Wasserstein estimates against each domain's
    unconditional sample, ``adv_*2`` against the sample translated from
    the other domain (both as minimized by the critic, penalties listed
    separately in ``gp_*``). Totals are the minimized generator and
    critic objectives.
    """

    adv_A1: float = 0.0
    adv_B1: float = 0.0
    adv_A2: float = 0.0
    adv_B2: float = 0.0
    gp_A: float = 0.0
    gp_B: float = 0.0
    recon_A: float = 0.0
    recon_B: float = 0.0
    cycle: float = 0.0
    total_G: float = 0.0
    total_D: float = 0.0
    iteration: int = 0
    scale: int = 0

    def row(self) -> list:
        return [getattr(self, f.name) for f in fields(self)]

    def is_finite(self) -> bool:
        import math
        return all(math.isfinite(v) for v in self.row()[:11])


LOSS_CSV_COLUMNS = [f.name for f in fields(LossReport)]


def write_loss_header(path) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerow(LOSS_CSV_COLUMNS)


def append_loss_row(path, report: LossReport) -> None:
    with open(path, "a", newline="") as fh:
        csv.writer(fh).writerow(report.row())


def gradient_penalty(critic: Callable[[torch.Tensor], torch.Tensor],
                     real: torch.Tensor, fake: torch.Tensor,
                     rng: torch.Generator, lambda_gp: float = 0.1,
                     mode: str = "exact", fd_step: float = 1e-3) -> torch.Tensor:
    """Penalty pushing the critic's input-gradient norm toward 1.

    A point is sampled on the segment between real and fake; the critic's
    mean score is differentiated with respect to it and the squared
    deviation of the gradient norm from 1 is returned, scaled by
    ``lambda_gp``, as a positive term to add to the critic loss.

    ``mode="finite_diff"`` estimates the input gradient by central
    differences (one pair of critic calls per input element) for backends
    without a second-order path; it is only practical on tiny inputs.
    """
    if real.shape != fake.shape:
        raise ValueError(f"shape mismatch: {tuple(real.shape)} vs {tuple(fake.shape)}")
    eps = torch.rand((), generator=rng, dtype=real.dtype)
    c = (eps * real + (1.0 - eps) * fake).detach()
    if mode == "exact":
        c.requires_grad_(True)
        score = critic(c).mean()
        grad = grad_of_scalar(score, c, create_graph=True)
    elif mode == "finite_diff":
        if c.numel() > 4096:
            raise ValueError("finite-difference penalty is limited to tiny inputs")
        parts = []
        flat = c.flatten()
        for i in range(flat.numel()):
            shift = torch.zeros_like(flat)
            shift[i] = fd_step
            hi = critic((flat + shift).view_as(c)).mean()
            lo = critic((flat - shift).view_as(c)).mean()
            parts.append((hi - lo) / (2.0 * fd_step))
        grad = torch.stack(parts)
    else:
        raise ValueError(f"unknown penalty mode {mode!r}")
    norm = grad.flatten().norm(2)
    penalty = lambda_gp * (norm - 1.0) ** 2
    if not torch.isfinite(penalty):
        raise FloatingPointError("non-finite gradient penalty")
    return penalty


def critic_loss(critic: Callable[[torch.Tensor], torch.Tensor],
                real: torch.Tensor, fake: torch.Tensor,
                rng: torch.Generator, weights: LossWeights,
                gp_mode: str = "exact") -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Minimized critic objective for one real/fake pair.

    Returns ``(loss, wasserstein, penalty)`` where
    ``loss = wasserstein + penalty`` and
    ``wasserstein = mean(D(fake)) - mean(D(real))``.
    """
    w = critic(fake).mean() - critic(real).mean()
    gp = gradient_penalty(critic, real, fake, rng, weights.lambda_gp, gp_mode)
    return w + gp, w, gp


def generator_adv_loss(critic: Callable[[torch.Tensor], torch.Tensor],
                       fake: torch.Tensor) -> torch.Tensor:
    """Generator's adversarial term: drive the critic's score on the fake up."""
    return -critic(fake).mean()


def reconstruction_loss(gens_a: Sequence[nn.Module], gens_b: Optional[Sequence[nn.Module]],
                        plan: NoisePlan, pyr_a: Sequence[torch.Tensor],
                        pyr_b: Optional[Sequence[torch.Tensor]], n: int,
                        sched: ScaleSchedule, policy: str = "standard",
                        prev: tuple[Optional[torch.Tensor], Optional[torch.Tensor]] = (None, None),
                        ) -> tuple[torch.Tensor, torch.Tensor, Optional[torch.Tensor]]:
    """Zero-noise reconstruction error at scale ``n``, summed over domains.

    The scale maps the upsampled previous reconstruction (the fixed
    coarsest-scale noise at scale 0) and is compared against the real
    image at that scale, RMSE-normalized. ``prev`` optionally supplies
    the previous-scale reconstructions to avoid rerunning the chain.
    Returns ``(total, loss_a, loss_b)``; ``loss_b`` is None for a
    single-domain bundle.
    """
    def one_domain(gens, pyr, domain, prev_rec):
        if n == 0:
            out = uncond_step(gens[0], None, plan.z_star(domain), 0, sched.K, policy)
        else:
            if prev_rec is None:
                with torch.no_grad():
                    prev_rec = uncond_chain(gens, plan, sched, n - 1,
                                            "reconstruction", domain, policy=policy)
            z = torch.zeros((1, 3) + sched.sizes[n], dtype=pyr[n].dtype)
            out = uncond_step(gens[n], prev_rec, z, n, sched.K, policy)
        return rmse(out, pyr[n])

    loss_a = one_domain(gens_a, pyr_a, "a", prev[0])
    if gens_b is None:
        return loss_a, loss_a, None
    loss_b = one_domain(gens_b, pyr_b, "b", prev[1])
    return loss_a + loss_b, loss_a, loss_b


def cycle_loss(a_bar: torch.Tensor, aba_bar: torch.Tensor,
               b_bar: torch.Tensor, bab_bar: torch.Tensor) -> torch.Tensor:
    """Round-trip consistency for both directions, RMSE-normalized."""
    return rmse(a_bar, aba_bar) + rmse(b_bar, bab_bar)


def cycle_active(n: int, K: int, scope: str = "all") -> bool:
    if scope == "all":
        return n < K
    if scope == "last_only":
        return n == K - 1
    if scope == "none":
        return False
    raise ValueError(f"unknown cycle scope {scope!r}")


def total_losses(adv_g, recon, cycle, critic_total, weights: LossWeights,
                 n: int, K: int, cycle_scope: str = "all"):
    """Weighted totals as optimized: generator total includes the cycle
    term only on scales where it applies."""
    total_g = adv_g + weights.lambda_recon * recon
    if cycle_active(n, K, cycle_scope):
        total_g = total_g + weights.lambda_cycle * cycle
    return total_g, critic_total
