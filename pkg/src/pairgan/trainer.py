"""Coarse-to-fine training of the coupled per-scale networks.

Scales train one at a time, coarsest first; finished scales are frozen
and, by default, seed the next scale's weights. Each iteration runs a
block of critic updates followed by a block of generator updates, every
one on freshly drawn unconditional samples. The per-scale noise
amplitude is fixed from the reconstruction error before the first
iteration of that scale ever draws noise.
"""

from __future__ import annotations

import json
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import torch

from . import imageio
from .backend import DTYPE, make_generator
from .generation import (NoisePlan, cond_map, make_noise_plan, residual_at,
                         sample_noise, translation_chain, uncond_chain,
                         uncond_step)
from .losses import (LossReport, LossWeights, append_loss_row, critic_loss,
                     cycle_active, cycle_loss, generator_adv_loss,
                     reconstruction_loss, total_losses, write_loss_header)
from .networks import (ScaleNets, init_from_previous, make_scale_nets,
                       scale_fingerprint)
from .pyramid import ScaleSchedule, build_pyramid, build_schedule, resize

LOSS_LOG_NAME = "losses.csv"
MANIFEST_NAME = "manifest.json"
NOISE_FILE_NAME = "noise.pt"
CHECKPOINT_FORMAT = 1


class TrainingDiverged(RuntimeError):
    """A loss went non-finite; state was checkpointed before raising."""


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    iters_per_scale: int = 10000
    lr: float = 0.0005
    beta1: float = 0.5
    beta2: float = 0.999
    d_steps: int = 3
    g_steps: int = 3
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    base_channels: int = 32
    # schedule parameters
    r: float = 0.75
    min_size: int = 18
    max_size: int = 220
    k_offset: int = 1
    # ablation switches
    cycle_scope: str = "all"              # all | last_only | none
    shared_cond_uncond: bool = True
    residual_policy: str = "standard"     # standard | all | none
    scale_weight_copy: bool = True
    condition_on_prev_translation: bool = False
    gp_mode: str = "exact"                # exact | finite_diff
    out_dir: Optional[str] = None

    def __post_init__(self):
        if min(self.iters_per_scale, self.d_steps, self.g_steps, self.base_channels) <= 0:
            raise ValueError("iteration counts and channel width must be positive")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.cycle_scope not in ("all", "last_only", "none"):
            raise ValueError(f"unknown cycle scope {self.cycle_scope!r}")
        if self.residual_policy not in ("standard", "all", "none"):
            raise ValueError(f"unknown residual policy {self.residual_policy!r}")
        if self.gp_mode not in ("exact", "finite_diff"):
            raise ValueError(f"unknown gradient-penalty mode {self.gp_mode!r}")


@dataclass
class ModelBundle:
    """Everything a trained (or in-training) system owns."""

    sched: ScaleSchedule
    plan: NoisePlan
    config: TrainConfig
    scale_nets: list[ScaleNets] = field(default_factory=list)
    trained_up_to: int = -1
    two_domains: bool = True
    audit: list[dict] = field(default_factory=list)

    def generators(self, domain: str):
        if domain == "a":
            return [sn.g_a for sn in self.scale_nets]
        if domain == "b" and self.two_domains:
            return [sn.g_b for sn in self.scale_nets]
        raise ValueError(f"bundle has no domain {domain!r}")

    def cond_generators(self, domain: str):
        return [sn.cond_net(domain) for sn in self.scale_nets]

    def critic(self, domain: str, n: int):
        sn = self.scale_nets[n]
        if domain == "a":
            return sn.d_a
        if domain == "b" and sn.d_b is not None:
            return sn.d_b
        raise ValueError(f"bundle has no domain {domain!r}")

    def require_trained(self, scale: int) -> None:
        if scale > self.trained_up_to:
            raise ValueError(
                f"scale {scale} not trained yet (trained up to {self.trained_up_to})")


def new_bundle(sched: ScaleSchedule, config: TrainConfig,
               two_domains: bool = True) -> ModelBundle:
    plan = make_noise_plan(sched, config.seed, two_domains=two_domains)
    return ModelBundle(sched=sched, plan=plan, config=config,
                       two_domains=two_domains)


def prepare_image(img: torch.Tensor, sched: ScaleSchedule) -> torch.Tensor:
    return resize(img, sched.sizes[sched.N])


def _ensure_scale_nets(bundle: ModelBundle, n: int) -> dict:
    """Create scale ``n`` nets, copying from the previous scale when enabled.

    Returns the audit fields describing how the scale was initialized.
    """
    cfg = bundle.config
    if len(bundle.scale_nets) != n:
        raise RuntimeError(f"scale {n} already initialized or out of order")
    copied = n > 0 and cfg.scale_weight_copy
    prev_fp = scale_fingerprint(bundle.scale_nets[n - 1]) if n > 0 else None
    if copied:
        nets = init_from_previous(bundle.scale_nets[n - 1])
    else:
        nets = make_scale_nets(n, cfg.seed, cfg.base_channels,
                               two_domains=bundle.two_domains,
                               separate_cond=not cfg.shared_cond_uncond)
    bundle.scale_nets.append(nets)
    return {"copied_from_previous": copied,
            "start_fingerprint": scale_fingerprint(nets),
            "prev_end_fingerprint": prev_fp}


def _set_sigma(bundle: ModelBundle, pyr_a, pyr_b, n: int) -> float:
    """Fix the scale's noise amplitude from the reconstruction error."""
    if len(bundle.plan.sigmas) != n and n > 0:
        raise RuntimeError(f"sigma bookkeeping out of sync at scale {n}")
    if n == 0:
        return bundle.plan.sigmas[0]
    from .generation import compute_sigma
    sigmas = []
    pairs = [("a", pyr_a)] + ([("b", pyr_b)] if bundle.two_domains else [])
    for domain, pyr in pairs:
        with torch.no_grad():
            rec = uncond_chain(bundle.generators(domain), bundle.plan, bundle.sched,
                               n - 1, "reconstruction", domain,
                               policy=bundle.config.residual_policy)
        up = resize(rec, bundle.sched.sizes[n])
        sigmas.append(compute_sigma(up, pyr[n]))
    sigma = sum(sigmas) / len(sigmas)
    bundle.plan.sigmas.append(sigma)
    return sigma


def _draw_sample_pair(bundle: ModelBundle, src: str, n: int,
                      rng: torch.Generator, with_grad: bool):
    """Fresh unconditional sample at scale ``n`` plus its translation.

    The chain below ``n`` always runs without gradients (those scales are
    frozen); the top step and the conditional map carry gradients only
    when requested. Returns ``(sample, translated)``; ``translated`` is
    None for single-domain bundles.
    """
    cfg = bundle.config
    sched, plan = bundle.sched, bundle.plan
    policy = cfg.residual_policy
    gens = bundle.generators(src)
    tgt = "b" if src == "a" else "a"

    if bundle.two_domains and cfg.condition_on_prev_translation and n > 0:
        cond_gens = bundle.cond_generators(tgt)
        with torch.no_grad():
            samples, translated = translation_chain(
                gens, cond_gens, plan, sched, n - 1, src, rng, policy)
        prev, prev_tr = samples[-1], translated[-1]
        z = sample_noise(sched, n, plan.sigmas[n], rng)
        with nullcontext() if with_grad else torch.no_grad():
            sample = uncond_step(gens[n], prev, z, n, sched.K, policy)
            cond_in = sample + resize(prev_tr, tuple(sample.shape[-2:]))
            trans = cond_map(cond_gens[n], cond_in, n, sched.K, policy)
        return sample, trans

    with torch.no_grad():
        prev = uncond_chain(gens, plan, sched, n - 1, "random", src, rng,
                            policy=policy) if n > 0 else None
    z = sample_noise(sched, n, plan.sigmas[n], rng)
    with nullcontext() if with_grad else torch.no_grad():
        sample = uncond_step(gens[n], prev, z, n, sched.K, policy)
        trans = None
        if bundle.two_domains:
            trans = cond_map(bundle.scale_nets[n].cond_net(tgt), sample,
                             n, sched.K, policy)
    return sample, trans


def _recon_prev(bundle: ModelBundle, domain: str, n: int) -> Optional[torch.Tensor]:
    if n == 0:
        return None
    with torch.no_grad():
        return uncond_chain(bundle.generators(domain), bundle.plan, bundle.sched,
                            n - 1, "reconstruction", domain,
                            policy=bundle.config.residual_policy)


def train_scale(bundle: ModelBundle, pyr_a: Sequence[torch.Tensor],
                pyr_b: Optional[Sequence[torch.Tensor]], n: int,
                pyr_a_provider: Optional[Callable] = None) -> ModelBundle:
    """Train scale ``n`` for the configured number of iterations.

    ``pyr_a_provider(iteration, rng)`` may substitute a different
    domain-A pyramid per iteration (frame rotation for video); the static
    ``pyr_a`` is still what fixes the noise amplitude.
    """
    cfg = bundle.config
    sched = bundle.sched
    if n != bundle.trained_up_to + 1:
        raise RuntimeError(f"scales must train in order; next is {bundle.trained_up_to + 1}")
    if bundle.two_domains == (pyr_b is None):
        raise ValueError("pyramids do not match the bundle's domain count")

    init_info = _ensure_scale_nets(bundle, n)
    sigma = _set_sigma(bundle, pyr_a, pyr_b, n)
    bundle.audit.append({"event": "scale_start", "scale": n, "sigma": sigma,
                         "sigmas_len": len(bundle.plan.sigmas), **init_info})

    frozen_before = [scale_fingerprint(bundle.scale_nets[k]) for k in range(n)]

    nets = bundle.scale_nets[n]
    gen_params = [p for net in dict.fromkeys(nets.generators()) for p in net.parameters()]
    critic_nets = [nets.d_a] + ([nets.d_b] if nets.d_b is not None else [])
    critic_params = [p for net in critic_nets for p in net.parameters()]
    opt_g = torch.optim.Adam(gen_params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    opt_d = torch.optim.Adam(critic_params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))

    noise_rng = make_generator(cfg.seed, "noise", n)
    eps_rng = make_generator(cfg.seed, "eps", n)
    frame_rng = make_generator(cfg.seed, "frame", n)

    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    loss_path = out_dir / LOSS_LOG_NAME if out_dir else None

    for it in range(cfg.iters_per_scale):
        cur_pyr_a = pyr_a_provider(it, frame_rng) if pyr_a_provider else pyr_a
        report = LossReport(iteration=it, scale=n)

        prev_rec_a = _recon_prev(bundle, "a", n)
        prev_rec_b = _recon_prev(bundle, "b", n) if bundle.two_domains else None

        for net in critic_nets:
            net.requires_grad_(True)
        for _ in range(cfg.d_steps):
            a_bar, ab_bar = _draw_sample_pair(bundle, "a", n, noise_rng, with_grad=False)
            opt_d.zero_grad(set_to_none=True)
            l_a1, w_a1, gp_a1 = critic_loss(nets.d_a, cur_pyr_a[n], a_bar.detach(),
                                            eps_rng, cfg.weights, cfg.gp_mode)
            total_d = l_a1
            if bundle.two_domains:
                b_bar, ba_bar = _draw_sample_pair(bundle, "b", n, noise_rng, with_grad=False)
                l_b1, w_b1, gp_b1 = critic_loss(nets.d_b, pyr_b[n], b_bar.detach(),
                                                eps_rng, cfg.weights, cfg.gp_mode)
                l_b2, w_b2, gp_b2 = critic_loss(nets.d_b, pyr_b[n], ab_bar.detach(),
                                                eps_rng, cfg.weights, cfg.gp_mode)
                l_a2, w_a2, gp_a2 = critic_loss(nets.d_a, cur_pyr_a[n], ba_bar.detach(),
                                                eps_rng, cfg.weights, cfg.gp_mode)
                total_d = total_d + l_b1 + l_b2 + l_a2
                report.adv_B1, report.adv_B2 = w_b1.item(), w_b2.item()
                report.adv_A2 = w_a2.item()
                report.gp_B = (gp_b1 + gp_b2).item()
                report.gp_A = (gp_a1 + gp_a2).item()
            else:
                report.gp_A = gp_a1.item()
            report.adv_A1 = w_a1.item()
            total_d.backward()
            opt_d.step()
            report.total_D = total_d.item()

        for net in critic_nets:
            net.requires_grad_(False)
        for _ in range(cfg.g_steps):
            opt_g.zero_grad(set_to_none=True)
            a_bar, ab_bar = _draw_sample_pair(bundle, "a", n, noise_rng, with_grad=True)
            adv = generator_adv_loss(nets.d_a, a_bar)
            cyc = torch.zeros((), dtype=a_bar.dtype)
            if bundle.two_domains:
                b_bar, ba_bar = _draw_sample_pair(bundle, "b", n, noise_rng, with_grad=True)
                adv = adv + generator_adv_loss(nets.d_b, ab_bar)
                adv = adv + generator_adv_loss(nets.d_b, b_bar)
                adv = adv + generator_adv_loss(nets.d_a, ba_bar)
                if cycle_active(n, sched.K, cfg.cycle_scope):
                    aba = cond_map(nets.cond_net("a"), ab_bar, n, sched.K, cfg.residual_policy)
                    bab = cond_map(nets.cond_net("b"), ba_bar, n, sched.K, cfg.residual_policy)
                    cyc = cycle_loss(a_bar, aba, b_bar, bab)
            recon, rec_a, rec_b = reconstruction_loss(
                bundle.generators("a"),
                bundle.generators("b") if bundle.two_domains else None,
                bundle.plan, cur_pyr_a, pyr_b, n, sched, cfg.residual_policy,
                prev=(prev_rec_a, prev_rec_b))
            total_g, _ = total_losses(adv, recon, cyc, None, cfg.weights,
                                      n, sched.K, cfg.cycle_scope)
            total_g.backward()
            opt_g.step()
            report.recon_A = rec_a.item()
            report.recon_B = rec_b.item() if rec_b is not None else 0.0
            report.cycle = cyc.item()
            report.total_G = total_g.item()
        for net in critic_nets:
            net.requires_grad_(True)

        if loss_path is not None:
            append_loss_row(loss_path, report)
        if not report.is_finite():
            if out_dir is not None:
                checkpoint_save(bundle, out_dir)
            raise TrainingDiverged(
                f"non-finite loss at scale {n}, iteration {it}: {report}")

    frozen_after = [scale_fingerprint(bundle.scale_nets[k]) for k in range(n)]
    if frozen_after != frozen_before:
        raise RuntimeError(f"frozen scales changed while training scale {n}")
    nets.set_requires_grad(False)
    bundle.trained_up_to = n
    bundle.audit.append({"event": "scale_end", "scale": n,
                         "end_fingerprint": scale_fingerprint(nets),
                         "frozen_unchanged": True})
    if out_dir is not None:
        _write_preview(bundle, pyr_a, pyr_b, n, out_dir)
    return bundle


def _write_preview(bundle: ModelBundle, pyr_a, pyr_b, n: int, out_dir: Path) -> None:
    """Per-scale grid: reconstruction, random sample, and conditional map
    for each domain."""
    rng = make_generator(bundle.config.seed, "preview", n)
    policy = bundle.config.residual_policy
    rows = []
    domains = [("a", pyr_a)] + ([("b", pyr_b)] if bundle.two_domains else [])
    with torch.no_grad():
        for domain, _pyr in domains:
            rec = uncond_chain(bundle.generators(domain), bundle.plan, bundle.sched,
                               n, "reconstruction", domain, policy=policy)
            sample = uncond_chain(bundle.generators(domain), bundle.plan, bundle.sched,
                                  n, "random", domain, rng, policy=policy)
            row = [rec, sample]
            if bundle.two_domains:
                other = "b" if domain == "a" else "a"
                row.append(cond_map(bundle.scale_nets[n].cond_net(other), sample,
                                    n, bundle.sched.K, policy))
            rows.append(row)
    imageio.save_image(imageio.compose_grid(rows), out_dir / f"preview_scale_{n}.png")


def _setup_pair(img_a: torch.Tensor, img_b: Optional[torch.Tensor],
                config: TrainConfig):
    sched = build_schedule(tuple(img_a.shape[-2:]), config.r, config.min_size,
                           config.max_size, config.k_offset)
    img_a = prepare_image(img_a, sched)
    pyr_a = build_pyramid(img_a, sched)
    pyr_b = None
    if img_b is not None:
        pyr_b = build_pyramid(prepare_image(img_b, sched), sched)
    return sched, pyr_a, pyr_b


def _train_remaining(bundle: ModelBundle, pyr_a, pyr_b,
                     pyr_a_provider: Optional[Callable] = None) -> ModelBundle:
    out_dir = Path(bundle.config.out_dir) if bundle.config.out_dir else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        if not (out_dir / LOSS_LOG_NAME).exists():
            write_loss_header(out_dir / LOSS_LOG_NAME)
    for n in range(bundle.trained_up_to + 1, bundle.sched.N + 1):
        train_scale(bundle, pyr_a, pyr_b, n, pyr_a_provider)
        if out_dir is not None:
            checkpoint_save(bundle, out_dir)
    return bundle


def train_pair(img_a: torch.Tensor, img_b: torch.Tensor, config: TrainConfig,
               resume_from=None) -> ModelBundle:
    """Train the full system on two images, coarsest scale to finest.

    Both images are resized onto the schedule derived from image A's
    resolution. With ``resume_from``, a previously checkpointed run is
    continued from the first untrained scale; the checkpoint must match
    the schedule and configuration of this run.
    """
    sched, pyr_a, pyr_b = _setup_pair(img_a, img_b, config)
    if resume_from is not None:
        bundle = checkpoint_load(resume_from)
        _check_resume_compatible(bundle, sched, config)
        bundle.config = config
    else:
        bundle = new_bundle(sched, config, two_domains=True)
    return _train_remaining(bundle, pyr_a, pyr_b)


def train_refiner(img: torch.Tensor, config: TrainConfig,
                  resume_from=None) -> ModelBundle:
    """Train a single-domain model of one image: unconditional generation
    and reconstruction only, no translation and no cycle. Used to add
    fine detail to translated outputs."""
    sched, pyr, _ = _setup_pair(img, None, config)
    if resume_from is not None:
        bundle = checkpoint_load(resume_from)
        _check_resume_compatible(bundle, sched, config)
        bundle.config = config
    else:
        bundle = new_bundle(sched, config, two_domains=False)
    return _train_remaining(bundle, pyr, None)


def _check_resume_compatible(bundle: ModelBundle, sched: ScaleSchedule,
                             config: TrainConfig) -> None:
    if bundle.sched != sched:
        raise CheckpointError(
            f"checkpoint schedule {bundle.sched.sizes} does not match the "
            f"requested schedule {sched.sizes}")
    saved = asdict(replace(bundle.config, out_dir=None))
    wanted = asdict(replace(config, out_dir=None))
    if saved != wanted:
        diffs = {k: (saved[k], wanted[k]) for k in saved if saved[k] != wanted[k]}
        raise CheckpointError(f"checkpoint config differs from requested: {diffs}")


def checkpoint_save(bundle: ModelBundle, path) -> None:
    """Write the bundle as a directory: one parameter file per network per
    scale, the fixed noises, and a JSON manifest with the schedule, noise
    amplitudes, and configuration."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for sn in bundle.scale_nets[: bundle.trained_up_to + 1]:
        for name, net in sn.nets().items():
            torch.save(net.state_dict(), path / f"{name}_{sn.scale}.pt")
    noise = {"z_star_a": bundle.plan.z_star_a}
    if bundle.plan.z_star_b is not None:
        noise["z_star_b"] = bundle.plan.z_star_b
    torch.save(noise, path / NOISE_FILE_NAME)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "schedule": {"r": bundle.sched.r, "N": bundle.sched.N, "K": bundle.sched.K,
                     "sizes": [list(s) for s in bundle.sched.sizes]},
        "sigmas": bundle.plan.sigmas[: bundle.trained_up_to + 1],
        "seed": bundle.plan.seed,
        "trained_up_to": bundle.trained_up_to,
        "two_domains": bundle.two_domains,
        "config": asdict(replace(bundle.config, out_dir=None)),
    }
    with open(path / MANIFEST_NAME, "w") as fh:
        json.dump(manifest, fh, indent=2)


def checkpoint_load(path) -> ModelBundle:
    """Rebuild a bundle from a checkpoint directory, bit-exact."""
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.exists():
        raise CheckpointError(f"no manifest at {manifest_path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')}")
    s = manifest["schedule"]
    sched = ScaleSchedule(r=s["r"], N=s["N"], K=s["K"],
                          sizes=[tuple(x) for x in s["sizes"]])
    cfg_dict = dict(manifest["config"])
    cfg_dict["weights"] = LossWeights(**cfg_dict["weights"])
    config = TrainConfig(**cfg_dict)
    noise = torch.load(path / NOISE_FILE_NAME, weights_only=True)
    two_domains = manifest["two_domains"]
    plan = NoisePlan(seed=manifest["seed"], z_star_a=noise["z_star_a"],
                     z_star_b=noise.get("z_star_b"),
                     sigmas=list(manifest["sigmas"]) or [1.0])
    bundle = ModelBundle(sched=sched, plan=plan, config=config,
                         two_domains=two_domains,
                         trained_up_to=manifest["trained_up_to"])
    for n in range(manifest["trained_up_to"] + 1):
        nets = make_scale_nets(n, config.seed, config.base_channels,
                               two_domains=two_domains,
                               separate_cond=not config.shared_cond_uncond)
        for name, net in nets.nets().items():
            f = path / f"{name}_{n}.pt"
            if not f.exists():
                raise CheckpointError(f"missing parameter file {f}")
            net.load_state_dict(torch.load(f, weights_only=True))
        nets.set_requires_grad(False)
        bundle.scale_nets.append(nets)
    return bundle
