"""Tiny float64 networks (<1k parameters each) and a finite-difference checker.

They follow the same calling conventions as the full-size networks, so the
loss functions run on them unchanged.
"""

import torch

from chromagen.models.networks import Conditional, Critic, Decoder, Encoder, CNNColorizer
from chromagen.models.specs import ArchitectureSpec, LayerSpec

SIZE = 8
LATENT = 4


def _conv(c, s=2, bn=False, act="leaky_relu"):
    return LayerSpec("conv", kernel=3, stride=s, padding=1, out_channels=c, activation=act,
                     batch_norm=bn)


def _tconv(c, act="tanh", bn=False):
    return LayerSpec("transposed_conv", kernel=3, stride=2, padding=1, output_padding=1,
                     out_channels=c, activation=act, batch_norm=bn)


def toy_encoder():
    spec = ArchitectureSpec(
        "toy_encoder", (3, SIZE, SIZE), (_conv(2, bn=True),),
        heads={"mu": (LayerSpec("dense", out_channels=LATENT),),
               "log_sigma": (LayerSpec("dense", out_channels=LATENT),)},
    )
    return Encoder(spec)


def toy_conditional():
    return Conditional(ArchitectureSpec("toy_conditional", (1, SIZE, SIZE), (_conv(2),),
                                        output_shape=(2, 4, 4)))


def toy_decoder():
    layers = (
        LayerSpec("dense", out_channels=32, activation="leaky_relu"),
        LayerSpec("reshape", target_shape=(2, 4, 4)),
        LayerSpec("concat", source="cond", out_channels=4),
        _tconv(3),
    )
    return Decoder(ArchitectureSpec("toy_decoder", (LATENT,), layers,
                                    side_inputs={"cond": (2, 4, 4)}, output_shape=(3, SIZE, SIZE)))


def toy_critic():
    layers = (
        _conv(2, s=1),
        LayerSpec("residual_block", kernel=3, stride=2, padding=1, out_channels=3,
                  activation="leaky_relu"),
        LayerSpec("pool_avg", kernel=4, stride=4),
        LayerSpec("dense", out_channels=1),
    )
    return Critic(ArchitectureSpec("toy_critic", (4, SIZE, SIZE), layers, output_shape=(1,)))


def toy_colorizer():
    return CNNColorizer(ArchitectureSpec("toy_cnn", (1, SIZE, SIZE), (_conv(4, bn=True), _tconv(3)),
                                         output_shape=(3, SIZE, SIZE)))


class ToyGenerator(torch.nn.Module):
    """generator(z, gray) = decoder(z, conditional(gray))."""

    def __init__(self):
        super().__init__()
        self.decoder = toy_decoder()
        self.conditional = toy_conditional()

    def forward(self, z, gray):
        return self.decoder(z, self.conditional(gray))


def toys(seed=0):
    torch.manual_seed(seed)
    nets = {
        "encoder": toy_encoder(), "conditional": toy_conditional(), "decoder": toy_decoder(),
        "critic": toy_critic(), "colorizer": toy_colorizer(), "generator": ToyGenerator(),
    }
    return {k: v.double() for k, v in nets.items()}


def toy_batch(b=3, seed=0):
    g = torch.Generator().manual_seed(seed)
    color = torch.rand(b, 3, SIZE, SIZE, generator=g, dtype=torch.float64) * 2 - 1
    gray = color.mean(1, keepdim=True)
    return color, gray


def fd_relative_error(loss_fn, params, h=1e-6, fd_fn=None):
    """Relative L2 error between autograd and central-difference gradients.

    ``loss_fn()`` must be a deterministic function of ``params`` returning a
    scalar tensor. ``fd_fn`` (default ``loss_fn``) is the closure perturbed
    for the numeric side.
    """
    fd_fn = fd_fn or loss_fn
    params = list(params)
    analytic = torch.autograd.grad(loss_fn(), params, allow_unused=True)
    analytic = torch.cat([
        (a if a is not None else torch.zeros_like(p)).reshape(-1) for a, p in zip(analytic, params)
    ])
    numeric = []
    # evaluations stay outside no_grad: the gradient penalty differentiates internally
    for p in params:
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = fd_fn().item()
            flat[i] = orig - h
            down = fd_fn().item()
            flat[i] = orig
            numeric.append((up - down) / (2 * h))
    numeric = torch.tensor(numeric, dtype=torch.float64)
    denom = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
    return (analytic - numeric).norm().item() / denom


def n_params(*modules):
    return sum(p.numel() for m in modules for p in m.parameters())


def gradient_cases(seed=0):
    """name -> (loss closure, finite-difference closure, parameters).

    The two closures coincide except for the IVAE encoder loss, whose hinge
    terms stop gradients: its finite differences are taken on a reference
    objective that holds the re-encoded reconstructions fixed.
    """
    from chromagen import losses as L
    from chromagen.models.networks import reparameterize

    n = toys(seed)
    enc, cond, dec, critic = n["encoder"], n["conditional"], n["decoder"], n["critic"]
    gen = n["generator"]
    x, gray = toy_batch(seed=seed)
    g = torch.Generator().manual_seed(seed + 1)
    eps = torch.randn(len(x), LATENT, generator=g, dtype=torch.float64)
    z_p = torch.randn(len(x), LATENT, generator=g, dtype=torch.float64)
    u = torch.rand(len(x), generator=g, dtype=torch.float64)
    fake = gen(z_p, gray).detach()
    vae = [*enc.parameters(), *cond.parameters(), *dec.parameters()]

    # AGE reconstruction sees a fixed latent, as in the training step
    _, z_gen = L.age_adversarial_loss(enc, dec, cond, x, gray, z_p)
    z_gen = z_gen.detach()

    # IVAE: the hinge re-encodings see reconstructions taken at the base point
    m = 3.0
    with torch.no_grad():
        z0 = reparameterize(enc(x), eps)
        x_r0, x_p0 = dec(z0, cond(gray)), dec(z_p, cond(gray))

    def ivae_enc_reference():
        stats = enc(x)
        x_r = dec(reparameterize(stats, eps), cond(gray))
        hinge = (torch.relu(m - L.kl_standard_normal(enc(x_r0), "mean"))
                 + torch.relu(m - L.kl_standard_normal(enc(x_p0), "mean")))
        return (L.kl_standard_normal(stats, "mean") + 0.5 * hinge
                + 0.4 * L.reconstruction_loss("L1", x_r, x, "sample_sum"))

    def ivae_enc():
        return L.ivae_encoder_loss(enc, dec, cond, x, gray, z_p, eps, m, 0.5, 0.4)[0].total

    def same(fn):
        return fn, fn

    cases = {name: (*same(fn), list(ps)) for name, (fn, ps) in {
        "cnn_l1": (lambda: L.reconstruction_loss("L1", n["colorizer"](gray), x), n["colorizer"].parameters()),
        "cnn_l2": (lambda: L.reconstruction_loss("L2", n["colorizer"](gray), x), n["colorizer"].parameters()),
        "cvae_l1": (lambda: L.cvae_loss(enc, cond, dec, x, gray, eps, "L1").total, vae),
        "cvae_l2": (lambda: L.cvae_loss(enc, cond, dec, x, gray, eps, "L2").total, vae),
        "critic": (lambda: L.critic_loss(critic, x, fake, gray, L.GpConfig(), u).total,
                   critic.parameters()),
        "generator": (lambda: L.generator_loss_wgan(critic, gen(z_p, gray), gray, 1.0, x).total,
                      gen.parameters()),
        "age_adversarial": (lambda: L.age_adversarial_loss(enc, dec, cond, x, gray, z_p)[0].total,
                            [*enc.parameters(), *cond.parameters()]),
        "age_reconstruction": (lambda: L.age_reconstruction_loss(dec, cond, z_gen, gray, x).total,
                               [*dec.parameters(), *cond.parameters()]),
        "ivae_decoder": (lambda: L.ivae_decoder_loss(enc, dec, cond, x, gray, z0, z_p, 0.5, 0.4).total,
                         [*dec.parameters(), *cond.parameters()]),
    }.items()}
    cases["ivae_encoder"] = (ivae_enc, ivae_enc_reference, list(enc.parameters()))
    return cases
