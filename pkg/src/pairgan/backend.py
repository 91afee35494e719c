"""Differentiable-computation contract and seeded randomness.

Everything trainable in this package runs on torch tensors. This module
pins down exactly which operations (and which of their derivatives) the
rest of the code relies on, provides a capability probe that verifies
them against finite differences, and centralizes seed handling so that
every consumer draws from an isolated, reproducible stream.
"""

from __future__ import annotations

import hashlib
from typing import Callable, Iterable

import torch
import torch.nn.functional as F

DTYPE = torch.float32

#: Operations (with reverse-mode gradients) the models and losses need.
REQUIRED_OPS = (
    "conv2d_3x3_same",
    "spatial_batch_norm",
    "leaky_relu",
    "tanh",
    "add_scale",
    "bilinear_resize",
    "l2_norm",
    "mean",
    "seeded_gaussian",
    "second_order_grad",
)


class BackendCapabilityError(RuntimeError):
    """Raised when a required op or its gradient is missing or wrong."""


def derive_seed(root_seed: int, purpose: str, *indices: int) -> int:
    """Derive a child seed from a root seed and a purpose label.

    Separate purposes ("init", "noise", "eps", "frame", ...) get
    independent streams, so toggling one consumer never perturbs the
    draws seen by another.
    """
    tag = f"{root_seed}/{purpose}/" + "/".join(str(i) for i in indices)
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def make_generator(root_seed: int, purpose: str, *indices: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(root_seed, purpose, *indices))
    return gen


def gaussian(shape, sigma: float, rng: torch.Generator, dtype=DTYPE) -> torch.Tensor:
    """Draw N(0, sigma^2) noise of the given shape from a seeded stream."""
    return sigma * torch.randn(shape, generator=rng, dtype=dtype)


def grad_of_scalar(scalar: torch.Tensor, wrt: torch.Tensor, create_graph: bool = True) -> torch.Tensor:
    """Gradient of a single-element tensor with respect to ``wrt``.

    With ``create_graph`` the result stays differentiable, which is what
    lets a penalty on the gradient norm itself be optimized.
    """
    if scalar.numel() != 1:
        raise ValueError(f"expected a scalar, got shape {tuple(scalar.shape)}")
    (grad,) = torch.autograd.grad(scalar, wrt, create_graph=create_graph)
    return grad


def rmse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """L2 norm of (a - b) divided by sqrt(element count).

    All distance-style losses in the package use this normalization so
    their magnitudes do not scale with resolution.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    diff = a - b
    return diff.flatten().norm(2) / diff.numel() ** 0.5


def finite_difference_grad(f: Callable[[torch.Tensor], torch.Tensor],
                           x: torch.Tensor, step: float = 1e-4) -> torch.Tensor:
    """Central-difference gradient of a scalar function, element by element."""
    grad = torch.zeros_like(x)
    flat = x.flatten()
    gflat = grad.flatten()
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        hi = f(x).item()
        flat[i] = orig - step
        lo = f(x).item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def gradient_error(f: Callable[[torch.Tensor], torch.Tensor],
                   x: torch.Tensor, step: float = 1e-4) -> float:
    """Relative mismatch between autograd and central finite differences."""
    xg = x.detach().clone().requires_grad_(True)
    analytic = grad_of_scalar(f(xg), xg, create_graph=False)
    numeric = finite_difference_grad(f, x.detach().clone(), step)
    denom = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
    return (analytic - numeric).norm().item() / denom


def _spatial_norm_fn(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    mean = x.mean(dim=(0, 2, 3), keepdim=True)
    var = x.var(dim=(0, 2, 3), unbiased=False, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps)


def verify_capabilities(rel_tol: float = 1e-3, step: float = 1e-4) -> dict[str, float]:
    """Probe every required op and its gradient against finite differences.

    Returns the measured relative gradient error per op. Raises
    :class:`BackendCapabilityError` on the first op whose gradient is
    unavailable or disagrees with central differences beyond ``rel_tol``.
    Probes run in float64 so the finite-difference oracle is trustworthy.
    """
    g = torch.Generator()
    g.manual_seed(20_240_001)
    report: dict[str, float] = {}

    def check(name: str, f, x):
        try:
            err = gradient_error(f, x, step)
        except Exception as exc:  # missing op or missing gradient
            raise BackendCapabilityError(f"op {name!r} failed: {exc}") from exc
        if err > rel_tol:
            raise BackendCapabilityError(
                f"op {name!r}: gradient error {err:.2e} exceeds {rel_tol:.0e}")
        report[name] = err

    d = torch.float64
    x_img = torch.randn((1, 3, 6, 6), generator=g, dtype=d)
    w = torch.randn((4, 3, 3, 3), generator=g, dtype=d)
    check("conv2d_3x3_same", lambda x: F.conv2d(x, w, padding=1).sum(), x_img)
    check("spatial_batch_norm", lambda x: _spatial_norm_fn(x).pow(2).sum(), x_img)
    # keep inputs away from the LeakyReLU kink so central differences are valid
    x_act = torch.randn((8,), generator=g, dtype=d)
    x_act = torch.where(x_act.abs() < 0.05, x_act + 0.1, x_act)
    check("leaky_relu", lambda x: F.leaky_relu(x, 0.2).sum(), x_act)
    check("tanh", lambda x: torch.tanh(x).sum(), x_act)
    check("add_scale", lambda x: (2.5 * x + x).sum(), x_act)
    check("bilinear_resize",
          lambda x: F.interpolate(x, size=(9, 9), mode="bilinear", align_corners=False).sum(),
          x_img)
    x_pos = torch.randn((8,), generator=g, dtype=d) + 3.0
    check("l2_norm", lambda x: x.norm(2), x_pos)
    check("mean", lambda x: x.mean(), x_act)

    # reproducibility of the seeded Gaussian stream
    a = gaussian((4, 4), 1.0, make_generator(7, "probe"))
    b = gaussian((4, 4), 1.0, make_generator(7, "probe"))
    if not torch.equal(a, b):
        raise BackendCapabilityError("seeded gaussian stream is not reproducible")
    report["seeded_gaussian"] = 0.0

    # second-order path: penalty on a gradient norm must itself differentiate
    def grad_norm_penalty(x):
        xg = x if x.requires_grad else x.detach().clone().requires_grad_(True)
        inner = (xg ** 3).sum()
        grad = grad_of_scalar(inner, xg, create_graph=True)
        return (grad.norm(2) ** 2)

    x2 = torch.randn((8,), generator=g, dtype=d)
    err = gradient_error(grad_norm_penalty, x2, step)
    if err > rel_tol:
        raise BackendCapabilityError(
            f"op 'second_order_grad': gradient error {err:.2e} exceeds {rel_tol:.0e}")
    report["second_order_grad"] = err
    return report


def fingerprint_tensors(named: Iterable[tuple[str, torch.Tensor]]) -> str:
    """Order-stable sha256 digest of named tensors, for exact comparisons."""
    h = hashlib.sha256()
    for name, t in sorted(named, key=lambda kv: kv[0]):
        h.update(name.encode("utf-8"))
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
