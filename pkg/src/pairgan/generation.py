"""Unconditional and conditional generation chains.

The unconditional chain grows an image coarse-to-fine: the coarsest
scale maps pure noise, residual scales add detail on top of the
upsampled previous output, and scales at or above the switch point K
regenerate outright. The conditional map translates a sample into the
other domain at a single scale and is fully deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
from torch import nn

from .backend import DTYPE, gaussian, make_generator, rmse
from .pyramid import ScaleSchedule, resize

RESIDUAL_POLICIES = ("standard", "all", "none")


@dataclass
class NoisePlan:
    """Per-scale noise amplitudes plus the fixed coarsest-scale maps.

    ``sigmas[0]`` is pinned to 1.0 (the coarsest scale has no previous
    output to measure a residual against); later entries are appended as
    scales finish training. ``z_star_b`` is absent in single-domain
    bundles.
    """

    seed: int
    z_star_a: torch.Tensor
    z_star_b: Optional[torch.Tensor] = None
    sigmas: list[float] = field(default_factory=lambda: [1.0])

    def __post_init__(self):
        if self.sigmas[0] != 1.0:
            raise ValueError("sigma at scale 0 is fixed to 1.0")
        if any(s < 0.0 for s in self.sigmas):
            raise ValueError("sigmas must be non-negative")

    def z_star(self, domain: str) -> torch.Tensor:
        if domain == "a":
            return self.z_star_a
        if domain == "b" and self.z_star_b is not None:
            return self.z_star_b
        raise ValueError(f"no fixed noise for domain {domain!r}")


def make_noise_plan(sched: ScaleSchedule, seed: int, two_domains: bool = True,
                    dtype=DTYPE) -> NoisePlan:
    shape = (1, 3) + sched.sizes[0]
    z_a = gaussian(shape, 1.0, make_generator(seed, "zstar/a"), dtype)
    z_b = gaussian(shape, 1.0, make_generator(seed, "zstar/b"), dtype) if two_domains else None
    return NoisePlan(seed=seed, z_star_a=z_a, z_star_b=z_b)


def residual_at(n: int, K: int, policy: str = "standard") -> bool:
    """Whether scale ``n`` adds to its input rather than replacing it."""
    if policy == "standard":
        return n < K
    if policy == "all":
        return True
    if policy == "none":
        return False
    raise ValueError(f"unknown residual policy {policy!r}")


def uncond_step(g: nn.Module, prev: Optional[torch.Tensor], z: torch.Tensor,
                n: int, K: int, policy: str = "standard") -> torch.Tensor:
    """One scale of the unconditional chain.

    Scale 0 maps noise alone. Above that, the noise is added to the
    upsampled previous output; residual scales add the generator output
    back onto that upsample, non-residual scales return it directly.
    """
    if n == 0:
        return g(z)
    if prev is None:
        raise ValueError(f"scale {n} needs the previous scale's output")
    up = resize(prev, tuple(z.shape[-2:]))
    if residual_at(n, K, policy):
        return g(z + up) + up
    return g(z + up)


def cond_map(g_target: nn.Module, x: torch.Tensor, n: int, K: int,
             policy: str = "standard") -> torch.Tensor:
    """Deterministic translation of ``x`` into the target domain at scale n."""
    if residual_at(n, K, policy):
        return g_target(x) + x
    return g_target(x)


def cycle_chain(g_a: nn.Module, g_b: nn.Module, x_from_a: torch.Tensor,
                n: int, K: int, policy: str = "standard"
                ) -> tuple[torch.Tensor, torch.Tensor]:
    """Map a domain-A sample to B and back: returns (ab, aba)."""
    if n >= K:
        raise ValueError(f"cycle mapping only applies below K={K}, got scale {n}")
    ab = cond_map(g_b, x_from_a, n, K, policy)
    aba = cond_map(g_a, ab, n, K, policy)
    return ab, aba


def compute_sigma(recon_prev_up: torch.Tensor, target: torch.Tensor) -> float:
    """Noise amplitude for a scale: RMSE between the upsampled
    reconstruction from the previous scale and the real image."""
    return max(rmse(recon_prev_up, target).item(), 0.0)


def sample_noise(sched: ScaleSchedule, n: int, sigma: float,
                 rng: torch.Generator, dtype=DTYPE) -> torch.Tensor:
    return gaussian((1, 3) + sched.sizes[n], sigma, rng, dtype)


def uncond_chain(generators: Sequence[nn.Module], plan: NoisePlan,
                 sched: ScaleSchedule, stop_scale: int, mode: str,
                 domain: str = "a", rng: Optional[torch.Generator] = None,
                 policy: str = "standard", start: Optional[torch.Tensor] = None,
                 start_scale: int = 0, collect: bool = False):
    """Run the unconditional chain up to ``stop_scale``.

    ``mode`` is ``"random"`` (fresh noise, amplitude ``sigmas[n]`` per
    scale, drawn from ``rng``) or ``"reconstruction"`` (the fixed
    coarsest-scale noise, zero noise above). A ``start`` image replaces
    the chain output at ``start_scale`` and the chain continues from
    there. Returns the final image, or all per-scale images when
    ``collect`` is set.
    """
    if mode not in ("random", "reconstruction"):
        raise ValueError(f"unknown chain mode {mode!r}")
    if stop_scale > sched.N:
        raise ValueError(f"stop scale {stop_scale} beyond finest scale {sched.N}")
    if len(generators) <= stop_scale:
        raise ValueError(f"chain needs generators for scales 0..{stop_scale}")
    if mode == "random":
        if rng is None:
            raise ValueError("random mode needs a noise stream")
        if len(plan.sigmas) <= stop_scale:
            raise ValueError(
                f"no noise amplitude for scale {stop_scale}; trained up to "
                f"{len(plan.sigmas) - 1}")

    dtype = plan.z_star_a.dtype
    out: Optional[torch.Tensor] = None
    images: list[torch.Tensor] = []
    first = 0
    if start is not None:
        if tuple(start.shape[-2:]) != sched.sizes[start_scale]:
            raise ValueError(
                f"start image size {tuple(start.shape[-2:])} does not match "
                f"scale {start_scale} size {sched.sizes[start_scale]}")
        out = start
        images.append(out)
        first = start_scale + 1
    for n in range(first, stop_scale + 1):
        if mode == "reconstruction":
            z = plan.z_star(domain) if n == 0 else torch.zeros(
                (1, 3) + sched.sizes[n], dtype=dtype)
        else:
            z = sample_noise(sched, n, plan.sigmas[n], rng, dtype)
        out = uncond_step(generators[n], out if n > 0 else None, z, n, sched.K, policy)
        images.append(out)
    return images if collect else out


def translation_chain(gens_src: Sequence[nn.Module], cond_gens_target: Sequence[nn.Module],
                      plan: NoisePlan, sched: ScaleSchedule, stop_scale: int,
                      domain: str, rng: torch.Generator, policy: str = "standard"
                      ) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
    """Random chain plus per-scale translations that feed on each other.

    Used by the ablation that conditions each scale's translation on the
    upsampled previous translation: the conditional input at scale n is
    the sample plus the upsampled scale-(n-1) translation. Returns the
    unconditional samples and the translations, per scale.
    """
    samples: list[torch.Tensor] = []
    translated: list[torch.Tensor] = []
    out: Optional[torch.Tensor] = None
    for n in range(stop_scale + 1):
        z = sample_noise(sched, n, plan.sigmas[n], rng, plan.z_star_a.dtype)
        out = uncond_step(gens_src[n], out if n > 0 else None, z, n, sched.K, policy)
        samples.append(out)
        cond_in = out
        if n > 0:
            cond_in = out + resize(translated[n - 1], tuple(out.shape[-2:]))
        translated.append(cond_map(cond_gens_target[n], cond_in, n, sched.K, policy))
    return samples, translated
