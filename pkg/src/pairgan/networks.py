"""Per-scale generators and patch critics.

Both net kinds are the same fully convolutional stack: five 3x3 blocks
with size-preserving padding, giving a fixed 11x11 receptive field at
every scale. Generators end in tanh (3 output channels); critics end in
a raw 1-channel score map with one score per spatial position.
"""

from __future__ import annotations

import copy
from contextlib import contextmanager
from dataclasses import dataclass, replace
from typing import Optional

import torch
from torch import nn

from .backend import DTYPE, derive_seed, fingerprint_tensors, make_generator


class SpatialNorm(nn.Module):
    """Per-channel normalization over the spatial positions of one image.

    Statistics always come from the current input (a batch of one leaves
    nothing else to normalize over); there are no running averages. A
    probe can temporarily freeze the statistics captured from a reference
    input so the layer acts as a plain affine map.
    """

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.frozen_stats: Optional[tuple[torch.Tensor, torch.Tensor]] = None
        self._capture = False

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.frozen_stats is not None and not self._capture:
            mean, var = self.frozen_stats
        else:
            mean = x.mean(dim=(0, 2, 3), keepdim=True)
            var = x.var(dim=(0, 2, 3), unbiased=False, keepdim=True)
            if self._capture:
                self.frozen_stats = (mean.detach(), var.detach())
        shape = (1, -1, 1, 1)
        out = (x - mean) / torch.sqrt(var + self.eps)
        return out * self.weight.view(shape) + self.bias.view(shape)


@contextmanager
def frozen_norm_stats(net: nn.Module, reference: torch.Tensor):
    """Freeze every SpatialNorm in ``net`` to the stats of one reference pass.

    Inside the context the net is a composition of convolutions and
    pointwise maps, which is what receptive-field probes need to measure.
    """
    norms = [m for m in net.modules() if isinstance(m, SpatialNorm)]
    for m in norms:
        m._capture = True
    try:
        with torch.no_grad():
            net(reference)
    finally:
        for m in norms:
            m._capture = False
    try:
        yield net
    finally:
        for m in norms:
            m.frozen_stats = None


@dataclass(frozen=True)
class NetSpec:
    """Shared architecture description for generators and critics."""

    base_channels: int = 32
    in_channels: int = 3
    out_channels: int = 3
    blocks: int = 5
    kernel: int = 3
    final_activation: str = "tanh"  # "tanh" or "none"

    def __post_init__(self):
        if self.blocks < 2:
            raise ValueError("need at least two blocks")
        if self.kernel % 2 != 1:
            raise ValueError("kernel size must be odd to preserve spatial size")
        if self.final_activation not in ("tanh", "none"):
            raise ValueError(f"unknown final activation {self.final_activation!r}")

    @property
    def receptive_field(self) -> int:
        return self.blocks * (self.kernel - 1) + 1


def generator_spec(base_channels: int = 32, in_channels: int = 3) -> NetSpec:
    return NetSpec(base_channels=base_channels, in_channels=in_channels,
                   out_channels=3, final_activation="tanh")


def critic_spec(base_channels: int = 32, in_channels: int = 3) -> NetSpec:
    return NetSpec(base_channels=base_channels, in_channels=in_channels,
                   out_channels=1, final_activation="none")


class PatchNet(nn.Module):
    """Five conv blocks, size-preserving. Interior blocks: conv + spatial
    norm + LeakyReLU(0.2). Final block: conv only, then the spec's final
    activation (tanh for generators, nothing for critics)."""

    def __init__(self, spec: NetSpec, dtype=DTYPE):
        super().__init__()
        self.spec = spec
        pad = spec.kernel // 2
        layers: list[nn.Module] = []
        ch_in = spec.in_channels
        for _ in range(spec.blocks - 1):
            layers.append(nn.Conv2d(ch_in, spec.base_channels, spec.kernel, padding=pad))
            layers.append(SpatialNorm(spec.base_channels))
            layers.append(nn.LeakyReLU(0.2))
            ch_in = spec.base_channels
        layers.append(nn.Conv2d(ch_in, spec.out_channels, spec.kernel, padding=pad))
        if spec.final_activation == "tanh":
            layers.append(nn.Tanh())
        self.body = nn.Sequential(*layers)
        self.to(dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)

    @property
    def final_conv(self) -> nn.Conv2d:
        convs = [m for m in self.body if isinstance(m, nn.Conv2d)]
        return convs[-1]


def init_weights(net: PatchNet, seed: int, zero_final: bool = False) -> None:
    """Deterministic init: convs N(0, 0.02), norm scale 1 / shift 0.

    With ``zero_final`` the last conv is zeroed, which makes a residual
    generator start as the exact identity map.
    """
    rng = make_generator(seed, "weights")
    for m in net.modules():
        if isinstance(m, nn.Conv2d):
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=rng,
                                           dtype=m.weight.dtype) * 0.02)
                m.bias.zero_()
        elif isinstance(m, SpatialNorm):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()
    if zero_final:
        with torch.no_grad():
            net.final_conv.weight.zero_()
            net.final_conv.bias.zero_()


@dataclass
class ScaleNets:
    """The four (or six) networks owned by one scale.

    ``g_a_cond``/``g_b_cond`` exist only in the ablation that unshares
    the conditional generators; ``g_b``/``d_b`` are absent in
    single-domain (refinement) bundles.
    """

    scale: int
    g_a: PatchNet
    d_a: PatchNet
    g_b: Optional[PatchNet] = None
    d_b: Optional[PatchNet] = None
    g_a_cond: Optional[PatchNet] = None
    g_b_cond: Optional[PatchNet] = None

    def nets(self) -> dict[str, PatchNet]:
        out = {"g_a": self.g_a, "d_a": self.d_a}
        for name in ("g_b", "d_b", "g_a_cond", "g_b_cond"):
            net = getattr(self, name)
            if net is not None:
                out[name] = net
        return out

    def cond_net(self, domain: str) -> PatchNet:
        """Generator used for conditional mapping into ``domain``."""
        if domain == "a":
            return self.g_a_cond if self.g_a_cond is not None else self.g_a
        if domain == "b":
            net = self.g_b_cond if self.g_b_cond is not None else self.g_b
            if net is None:
                raise ValueError("bundle has no second domain")
            return net
        raise ValueError(f"unknown domain {domain!r}")

    def generators(self):
        for name, net in self.nets().items():
            if name.startswith("g"):
                yield net

    def set_requires_grad(self, flag: bool) -> None:
        for net in self.nets().values():
            net.requires_grad_(flag)


def make_scale_nets(scale: int, seed: int, base_channels: int = 32,
                    two_domains: bool = True, separate_cond: bool = False,
                    dtype=DTYPE) -> ScaleNets:
    """Create and deterministically initialize one scale's networks."""
    def gen(name: str) -> PatchNet:
        net = PatchNet(generator_spec(base_channels), dtype=dtype)
        init_weights(net, derive_seed(seed, f"init/{name}", scale), zero_final=True)
        return net

    def crit(name: str) -> PatchNet:
        net = PatchNet(critic_spec(base_channels), dtype=dtype)
        init_weights(net, derive_seed(seed, f"init/{name}", scale), zero_final=False)
        return net

    nets = ScaleNets(scale=scale, g_a=gen("g_a"), d_a=crit("d_a"))
    if two_domains:
        nets.g_b = gen("g_b")
        nets.d_b = crit("d_b")
        if separate_cond:
            nets.g_a_cond = gen("g_a_cond")
            nets.g_b_cond = gen("g_b_cond")
    return nets


def init_from_previous(prev: ScaleNets) -> ScaleNets:
    """Deep-copied nets for the next scale; training the copy leaves the
    originals untouched."""
    nxt = copy.deepcopy(prev)
    nxt.scale = prev.scale + 1
    nxt.set_requires_grad(True)
    return nxt


def net_fingerprint(net: nn.Module) -> str:
    return fingerprint_tensors(net.state_dict().items())


def scale_fingerprint(nets: ScaleNets) -> str:
    named = []
    for name, net in nets.nets().items():
        named.extend((f"{name}.{k}", v) for k, v in net.state_dict().items())
    return fingerprint_tensors(named)


def influence_mask(net: PatchNet, input_hw: tuple[int, int],
                   center: tuple[int, int], seed: int = 0,
                   dtype=torch.float64) -> torch.Tensor:
    """Boolean (H, W) map of input positions that influence one output pixel.

    Measured as the nonzero pattern of the gradient of the output at
    ``center`` (summed over channels) with normalization statistics
    frozen, i.e. the architecture's receptive field.
    """
    probe = PatchNet(replace(net.spec, base_channels=net.spec.base_channels), dtype=dtype)
    probe.load_state_dict({k: v.to(dtype) for k, v in net.state_dict().items()})
    rng = make_generator(seed, "rf-probe")
    x = torch.randn((1, net.spec.in_channels) + tuple(input_hw),
                    generator=rng, dtype=dtype)
    with frozen_norm_stats(probe, x):
        xg = x.clone().requires_grad_(True)
        y = probe(xg)
        target = y[0, :, center[0], center[1]].sum()
        (grad,) = torch.autograd.grad(target, xg)
    return grad.abs().sum(dim=(0, 1)) != 0
