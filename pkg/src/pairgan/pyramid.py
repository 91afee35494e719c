"""Multi-scale size schedules and resampling.

A schedule maps a source resolution onto a geometric ladder of sizes,
coarsest first. Every other module consumes the same schedule, so all
cross-scale bookkeeping lives here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class ScaleSchedule:
    """Per-scale size table.

    ``r`` is the per-scale shrink ratio in (0, 1): scale ``n`` measures
    ``round(size_N * r**(N - n))`` pixels per dimension. ``N`` indexes the
    finest scale, ``K`` the scale at which generation switches from
    residual to non-residual behavior.
    """

    r: float
    N: int
    K: int
    sizes: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        if not (0.0 < self.r < 1.0):
            raise ValueError(f"shrink ratio must be in (0, 1), got {self.r}")
        if self.N < 1:
            raise ValueError("at least two scales are required")
        if not (0 <= self.K <= self.N + 1):
            raise ValueError(f"K={self.K} outside [0, {self.N + 1}]")
        if len(self.sizes) != self.N + 1:
            raise ValueError("size table length must be N + 1")
        for n in range(self.N):
            h0, w0 = self.sizes[n]
            h1, w1 = self.sizes[n + 1]
            if not (h0 < h1 and w0 < w1):
                raise ValueError(
                    f"sizes must increase strictly: scale {n} {self.sizes[n]} "
                    f"vs scale {n + 1} {self.sizes[n + 1]}")

    @property
    def num_scales(self) -> int:
        return self.N + 1


def build_schedule(source_hw: tuple[int, int], r: float = 0.75,
                   min_size: int = 18, max_size: int = 220,
                   k_offset: int = 1) -> ScaleSchedule:
    """Build the size ladder for a source resolution.

    The source is first capped so its longest side is at most ``max_size``
    (aspect preserved). The number of coarser scales is the largest ``N``
    for which the shorter side, shrunk by ``r**N``, still rounds to at
    least ``min_size``. ``K`` is set to ``N - k_offset``.
    """
    if not (0.0 < r < 1.0):
        raise ValueError(f"shrink ratio must be in (0, 1), got {r}")
    if not (0 < min_size < max_size):
        raise ValueError(f"need 0 < min_size < max_size, got {min_size}, {max_size}")
    h, w = source_hw
    if h <= 0 or w <= 0:
        raise ValueError(f"source dimensions must be positive, got {source_hw}")

    long_side = max(h, w)
    if long_side > max_size:
        scale = max_size / long_side
        h = round_half_up(h * scale)
        w = round_half_up(w * scale)

    short_side = min(h, w)
    n = 0
    while round_half_up(short_side * r ** (n + 1)) >= min_size:
        n += 1
    if n < 1:
        raise ValueError(
            f"source of size {(h, w)} with min_size={min_size} leaves a single "
            f"scale; at least two are required")
    if not (-1 <= k_offset <= n):
        raise ValueError(f"k_offset={k_offset} outside [-1, {n}] for N={n}")

    sizes = [(round_half_up(h * r ** (n - i)), round_half_up(w * r ** (n - i)))
             for i in range(n + 1)]
    if min(sizes[0]) < 4:
        raise ValueError(f"coarsest scale {sizes[0]} is below the 4 px floor")
    return ScaleSchedule(r=r, N=n, K=n - k_offset, sizes=sizes)


def resize(img: torch.Tensor, target_hw: tuple[int, int]) -> torch.Tensor:
    """Bilinear resample an image tensor (1, C, H, W) to ``target_hw``.

    Exact identity when the size already matches; output is clamped to
    the [-1, 1] pixel range.
    """
    th, tw = target_hw
    if th <= 0 or tw <= 0:
        raise ValueError(f"target dimensions must be positive, got {target_hw}")
    if img.dim() != 4:
        raise ValueError(f"expected a (1, C, H, W) tensor, got {tuple(img.shape)}")
    if img.shape[-2:] == (th, tw):
        return img.clone()
    out = F.interpolate(img, size=(th, tw), mode="bilinear", align_corners=False)
    return out.clamp(-1.0, 1.0)


def build_pyramid(img: torch.Tensor, sched: ScaleSchedule) -> list[torch.Tensor]:
    """Downsample an image to every schedule size, coarsest first."""
    if tuple(img.shape[-2:]) != sched.sizes[sched.N]:
        raise ValueError(
            f"image size {tuple(img.shape[-2:])} does not match the schedule's "
            f"finest scale {sched.sizes[sched.N]}")
    levels = [resize(img, hw) for hw in sched.sizes[:-1]]
    levels.append(img.clone())
    return levels
