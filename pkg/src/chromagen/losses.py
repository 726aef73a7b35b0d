"""Loss functions for every model family.

Networks are passed in as callables with the package's calling conventions:

* ``encoder(x) -> LatentStats``
* ``conditional(gray) -> features``
* ``decoder(z, features) -> image``
* ``critic(x, gray) -> (B,) scores``

so the same code runs on the full-size networks and on tiny test doubles.

Reductions: ``"sum"`` and ``"mean"`` are over every element; ``"sample_sum"``
sums within each sample and averages over the batch, which is how the
VAE-family losses keep reconstruction and KL terms on a per-image scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import torch
import torch.nn.functional as F

from chromagen.errors import NonFiniteError, ShapeError
from chromagen.models.networks import LatentStats, reparameterize

REDUCTIONS = ("sum", "mean", "sample_sum")


@dataclass
class LossReport:
    total: torch.Tensor
    components: Dict[str, torch.Tensor] = field(default_factory=dict)

    def scalars(self) -> Dict[str, float]:
        out = {name: float(v.detach()) for name, v in self.components.items()}
        out["total"] = float(self.total.detach())
        return out

    def check_finite(self, prefix: str = "") -> "LossReport":
        for name, value in {**self.components, "total": self.total}.items():
            if not torch.isfinite(value).all():
                raise NonFiniteError(f"loss component {prefix}{name} is {float(value)}")
        return self


@dataclass
class GpConfig:
    lam: float = 10.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"gradient-penalty weight must be >= 0, got {self.lam}")


def _reduce(values: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "sum":
        return values.sum()
    if reduction == "mean":
        return values.mean()
    if reduction == "sample_sum":
        return values.reshape(values.shape[0], -1).sum(1).mean()
    raise ValueError(f"reduction must be one of {REDUCTIONS}, got {reduction!r}")


def reconstruction_loss(kind: str, x: torch.Tensor, y: torch.Tensor, reduction: str = "mean"):
    """L1 or squared-error distance between two image batches."""
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    diff = x - y
    if kind == "L1":
        return _reduce(diff.abs(), reduction)
    if kind == "L2":
        return _reduce(diff.pow(2), reduction)
    raise ValueError(f"kind must be 'L1' or 'L2', got {kind!r}")


def kl_standard_normal(stats: LatentStats, reduction: str = "sum") -> torch.Tensor:
    """Closed-form ``KL(N(mu, sigma^2) || N(0, I))`` from ``(mu, log_sigma)``.

    Summed over latent dimensions. ``reduction="sum"`` also sums over the
    batch; ``"mean"`` averages over it.
    """
    mu, log_sigma = stats
    if not (torch.isfinite(mu).all() and torch.isfinite(log_sigma).all()):
        raise NonFiniteError("latent statistics contain non-finite values")
    per_dim = -0.5 * (1.0 + 2.0 * log_sigma - mu.pow(2) - torch.exp(2.0 * log_sigma))
    if per_dim.dim() == 1:
        per_dim = per_dim.unsqueeze(0)
    per_sample = per_dim.reshape(per_dim.shape[0], -1).sum(1)
    if reduction == "sum":
        return per_sample.sum()
    if reduction == "mean":
        return per_sample.mean()
    raise ValueError(f"reduction must be 'sum' or 'mean', got {reduction!r}")


def _per_sample_uniform(n, like: torch.Tensor, generator=None) -> torch.Tensor:
    return torch.rand(n, generator=generator, dtype=like.dtype, device=like.device)


def gradient_penalty(
    critic: Callable,
    real: torch.Tensor,
    fake: torch.Tensor,
    gray: Optional[torch.Tensor],
    cfg: GpConfig = GpConfig(),
    u: Optional[torch.Tensor] = None,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """``lam * mean_batch (||grad_x' D(x', gray)||_2 - 1)^2`` on random interpolates.

    ``x' = u * real + (1 - u) * fake`` with one ``u`` per sample. The result
    keeps its graph, so it can be backpropagated into the critic's parameters.
    """
    if real.shape != fake.shape:
        raise ShapeError(f"real {tuple(real.shape)} and fake {tuple(fake.shape)} differ")
    b = real.shape[0]
    if u is None:
        u = _per_sample_uniform(b, real, generator)
    u = u.reshape(b, *([1] * (real.dim() - 1))).to(real.dtype)
    if (u < 0).any() or (u > 1).any():
        raise ValueError("interpolation weights must lie in [0, 1]")
    x_hat = (u * real.detach() + (1 - u) * fake.detach()).requires_grad_(True)
    scores = critic(x_hat, gray)
    if scores.requires_grad:
        (grad,) = torch.autograd.grad(scores.sum(), x_hat, create_graph=True, allow_unused=True)
    else:
        grad = None
    if grad is None:
        grad = torch.zeros_like(x_hat)
    norms = grad.reshape(b, -1).norm(2, dim=1)
    return cfg.lam * (norms - 1).pow(2).mean()


def critic_loss(
    critic: Callable,
    real: torch.Tensor,
    fake: torch.Tensor,
    gray: Optional[torch.Tensor],
    cfg: GpConfig = GpConfig(),
    u: Optional[torch.Tensor] = None,
    generator: Optional[torch.Generator] = None,
) -> LossReport:
    """Negative Wasserstein estimate plus gradient penalty."""
    fake = fake.detach()
    d_real = critic(real, gray).mean()
    d_fake = critic(fake, gray).mean()
    gp = gradient_penalty(critic, real, fake, gray, cfg, u, generator)
    wd = d_real - d_fake
    return LossReport(-wd + gp, {"wd_estimate": wd, "gp": gp, "d_real": d_real, "d_fake": d_fake})


def generator_loss_wgan(
    critic: Callable,
    fake: torch.Tensor,
    gray: Optional[torch.Tensor],
    l1_weight: float = 0.0,
    real: Optional[torch.Tensor] = None,
) -> LossReport:
    if l1_weight < 0:
        raise ValueError(f"l1_weight must be >= 0, got {l1_weight}")
    adv = -critic(fake, gray).mean()
    if l1_weight > 0:
        if real is None:
            raise ValueError("an L1 term needs the real images")
        l1 = reconstruction_loss("L1", fake, real, "mean")
    else:
        l1 = adv.new_zeros(())
        if real is not None:
            l1 = reconstruction_loss("L1", fake, real, "mean").detach()
    return LossReport(adv + l1_weight * l1, {"adv": adv, "l1": l1})


def cvae_loss(encoder, conditional, decoder, x, gray, eps, kind: str = "L1") -> LossReport:
    stats = encoder(x)
    z = reparameterize(stats, eps)
    x_hat = decoder(z, conditional(gray))
    recon = reconstruction_loss(kind, x_hat, x, "sample_sum")
    kl = kl_standard_normal(stats, "mean")
    return LossReport(recon + kl, {"recon": recon, "kl": kl})


def age_adversarial_loss(encoder, decoder, conditional, x_real, gray, z_prior):
    """Latent-space L1 between encodings of generated and real images.

    Returns the report and the encodings of the generated images, which
    seed the reconstruction step.
    """
    x_gen = decoder(z_prior, conditional(gray))
    z_gen = encoder(x_gen).mu
    z_real = encoder(x_real).mu
    adv = reconstruction_loss("L1", z_gen, z_real, "sample_sum")
    return LossReport(adv, {"adv_latent": adv}), z_gen


def age_reconstruction_loss(decoder, conditional, z_gen, gray, x_real) -> LossReport:
    x_gen = decoder(z_gen, conditional(gray))
    rec = reconstruction_loss("L1", x_gen, x_real, "sample_sum")
    return LossReport(rec, {"rec": rec})


def age_losses(encoder, decoder, conditional, x_real, gray, z_prior) -> Tuple[LossReport, LossReport]:
    adv, z_gen = age_adversarial_loss(encoder, decoder, conditional, x_real, gray, z_prior)
    rec = age_reconstruction_loss(decoder, conditional, z_gen, gray, x_real)
    return adv, rec


def _check(name: str, value: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(value).all():
        raise NonFiniteError(f"IVAE component {name} is non-finite ({float(value)})")
    return value


def ivae_encoder_loss(encoder, decoder, conditional, x, gray, z_p, eps,
                      m: float = 120.0, alpha: float = 0.5, beta: float = 0.4):
    """Encoder-side objective. Returns ``(report, (z, x_r, x_p))``.

    Re-encodings inside the hinge terms see detached reconstructions, so the
    decoder receives no gradient from them.
    """
    if m <= 0 or alpha < 0 or beta < 0:
        raise ValueError("need m > 0 and alpha, beta >= 0")
    stats = encoder(x)
    z = reparameterize(stats, eps)
    cond = conditional(gray)
    x_r = decoder(z, cond)
    x_p = decoder(z_p, cond)
    ae = _check("ae", reconstruction_loss("L1", x_r, x, "sample_sum"))
    reg = _check("reg", kl_standard_normal(stats, "mean"))
    reg_r = _check("reg_r", kl_standard_normal(encoder(x_r.detach()), "mean"))
    reg_pp = _check("reg_pp", kl_standard_normal(encoder(x_p.detach()), "mean"))
    hinge_r = F.relu(m - reg_r)
    hinge_p = F.relu(m - reg_pp)
    adv = reg + alpha * (hinge_r + hinge_p)
    report = LossReport(adv + beta * ae, {
        "adv": adv, "reg": reg, "reg_r": reg_r, "reg_pp": reg_pp,
        "hinge_r": hinge_r, "hinge_p": hinge_p, "ae": ae,
    })
    return report, (z, x_r, x_p)


def _ivae_decoder_terms(encoder, x, x_r, x_p, alpha, beta) -> LossReport:
    reg_r = _check("dec_reg_r", kl_standard_normal(encoder(x_r), "mean"))
    reg_pp = _check("dec_reg_pp", kl_standard_normal(encoder(x_p), "mean"))
    ae = _check("dec_ae", reconstruction_loss("L1", x_r, x, "sample_sum"))
    adv = alpha * (reg_r + reg_pp)
    return LossReport(adv + beta * ae, {"adv": adv, "reg_r": reg_r, "reg_pp": reg_pp, "ae": ae})


def ivae_decoder_loss(encoder, decoder, conditional, x, gray, z, z_p,
                      alpha: float = 0.5, beta: float = 0.4) -> LossReport:
    """Decoder-side objective from a fixed latent ``z`` (taken without gradient)."""
    cond = conditional(gray)
    x_r = decoder(z.detach(), cond)
    x_p = decoder(z_p, cond)
    return _ivae_decoder_terms(encoder, x, x_r, x_p, alpha, beta)


def ivae_losses(encoder, decoder, conditional, x_real, gray, z_p, m=120.0, alpha=0.5,
                beta=0.4, eps=None, generator=None) -> Tuple[LossReport, LossReport]:
    """Both IVAE objectives evaluated at the same parameters."""
    if eps is None:
        mu = encoder(x_real).mu
        eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
    enc, (_, x_r, x_p) = ivae_encoder_loss(encoder, decoder, conditional, x_real, gray,
                                           z_p, eps, m, alpha, beta)
    dec = _ivae_decoder_terms(encoder, x_real, x_r, x_p, alpha, beta)
    return enc, dec
