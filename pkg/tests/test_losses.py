import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import toys
from chromagen import losses as L
from chromagen.errors import NonFiniteError, ShapeError
from chromagen.models import LatentStats


def t(x):
    return torch.tensor(x, dtype=torch.float64)


def test_reconstruction_examples():
    x = torch.zeros(2, 6, dtype=torch.float64)
    for kind in ("L1", "L2"):
        assert L.reconstruction_loss(kind, x, x.clone()) == 0
    y = x + 0.5
    assert L.reconstruction_loss("L1", y, x, "sum").item() == pytest.approx(6.0)
    assert L.reconstruction_loss("L2", y, x, "mean").item() == pytest.approx(0.25)
    assert L.reconstruction_loss("L1", y, x, "sample_sum").item() == pytest.approx(3.0)
    with pytest.raises(ShapeError):
        L.reconstruction_loss("L1", x, torch.zeros(3, 4))
    with pytest.raises(ValueError):
        L.reconstruction_loss("L3", x, x)


def test_kl_analytic_examples():
    assert L.kl_standard_normal(LatentStats(t([0.0, 0.0]), t([0.0, 0.0]))).item() == 0
    assert L.kl_standard_normal(LatentStats(t([1.0, 0.0]), t([0.0, 0.0]))).item() == pytest.approx(0.5, abs=1e-9)
    got = L.kl_standard_normal(LatentStats(t([0.0]), t([1.0]))).item()
    assert got == pytest.approx((math.e ** 2 - 3) / 2, abs=1e-9)


def test_kl_reductions_over_batch():
    stats = LatentStats(t([[1.0, 0.0], [0.0, 0.0]]), t([[0.0, 0.0], [0.0, 0.0]]))
    assert L.kl_standard_normal(stats, "sum").item() == pytest.approx(0.5)
    assert L.kl_standard_normal(stats, "mean").item() == pytest.approx(0.25)


def monte_carlo_kl(mu, log_sigma, n=1_000_000, seed=0):
    """E_q[log q(z) - log p(z)] with q = N(mu, sigma^2), p = N(0, I)."""
    rng = np.random.default_rng(seed)
    sigma = np.exp(log_sigma)
    z = mu + sigma * rng.standard_normal((n, len(mu)))
    log_q = -0.5 * (((z - mu) / sigma) ** 2) - log_sigma - 0.5 * np.log(2 * np.pi)
    log_p = -0.5 * z ** 2 - 0.5 * np.log(2 * np.pi)
    return float((log_q - log_p).sum(1).mean())


@pytest.mark.parametrize("seed", range(3))
def test_kl_matches_monte_carlo(seed):
    rng = np.random.default_rng(100 + seed)
    d = int(rng.integers(1, 9))
    mu, ls = rng.normal(size=d), rng.uniform(-1, 0.5, size=d)
    closed = L.kl_standard_normal(LatentStats(t(mu), t(ls))).item()
    assert closed == pytest.approx(monte_carlo_kl(mu, ls, seed=seed), abs=1e-2)


@settings(max_examples=50)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=8), st.floats(-3, 3))
def test_kl_nonnegative(mu, ls):
    stats = LatentStats(t(mu), t([ls] * len(mu)))
    assert L.kl_standard_normal(stats).item() >= -1e-12


def test_kl_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        L.kl_standard_normal(LatentStats(t([float("inf")]), t([0.0])))


class Linear(torch.nn.Module):
    def __init__(self, w):
        super().__init__()
        self.w = torch.nn.Parameter(w)

    def forward(self, x, gray):
        return (x.reshape(len(x), -1) * self.w).sum(1)


def _pair(b=4, shape=(1, 2, 2), seed=0):
    g = torch.Generator().manual_seed(seed)
    return (torch.randn(b, *shape, generator=g, dtype=torch.float64),
            torch.randn(b, *shape, generator=g, dtype=torch.float64))


def test_gp_unit_norm_linear_critic():
    real, fake = _pair()
    w = torch.randn(4, dtype=torch.float64)
    critic = Linear(w / w.norm())
    assert abs(L.gradient_penalty(critic, real, fake, None).item()) <= 1e-9


def test_gp_constant_critic():
    real, fake = _pair()
    critic = lambda x, gray: torch.ones(len(x), dtype=x.dtype)  # noqa: E731
    assert L.gradient_penalty(critic, real, fake, None).item() == pytest.approx(10.0, abs=1e-9)


def test_gp_scaled_sum_critic():
    real, fake = _pair()
    critic = lambda x, gray: 3 * x.reshape(len(x), -1).sum(1)  # noqa: E731
    assert L.gradient_penalty(critic, real, fake, None).item() == pytest.approx(250.0, abs=1e-6)


def test_gp_uses_supplied_interpolation_and_gray():
    real, fake = _pair(b=2, shape=(1, 1, 1))
    seen = {}

    def critic(x, gray):
        seen["x"] = x.detach().clone()
        seen["gray"] = gray
        return (x ** 2).reshape(len(x), -1).sum(1)

    gray = torch.zeros(2, 1, 1, 1)
    u = t([0.25, 1.0])
    gp = L.gradient_penalty(critic, real, fake, gray, L.GpConfig(2.0), u)
    x_hat = u.reshape(2, 1, 1, 1) * real + (1 - u.reshape(2, 1, 1, 1)) * fake
    torch.testing.assert_close(seen["x"], x_hat)
    assert seen["gray"] is gray
    expected = 2.0 * ((2 * x_hat.abs().reshape(2)) - 1).pow(2).mean()
    assert gp.item() == pytest.approx(expected.item())
    with pytest.raises(ValueError):
        L.gradient_penalty(critic, real, fake, gray, u=t([1.5, 0.0]))
    with pytest.raises(ValueError):
        L.GpConfig(-1.0)


def test_gp_is_differentiable_in_critic_parameters():
    real, fake = _pair()
    critic = Linear(torch.full((4,), 2.0, dtype=torch.float64))
    gp = L.gradient_penalty(critic, real, fake, None)
    (g,) = torch.autograd.grad(gp, critic.w)
    # d/dw 10 (||w|| - 1)^2 = 20 (||w|| - 1) w / ||w||
    torch.testing.assert_close(g, 20 * (4.0 - 1) * critic.w.detach() / 4.0)


def test_critic_loss_examples():
    real, fake = _pair()
    zero = lambda x, gray: torch.zeros(len(x), dtype=x.dtype)  # noqa: E731
    rep = L.critic_loss(zero, real, fake, None)
    assert rep.total.item() == pytest.approx(10.0, abs=1e-9)
    assert rep.components["wd_estimate"].item() == 0
    w = torch.randn(4, dtype=torch.float64)
    rep = L.critic_loss(Linear(w / w.norm()), real, real.clone(), None)
    assert abs(rep.total.item()) <= 1e-9


def test_critic_loss_arithmetic():
    real, fake = _pair()
    scores = lambda x, gray: torch.where(x.reshape(len(x), -1)[:, :1] == real.reshape(len(x), -1)[:, :1],  # noqa: E731
                                         torch.full((len(x), 1), 2.0, dtype=x.dtype),
                                         torch.full((len(x), 1), -1.0, dtype=x.dtype)).sum(1)
    rep = L.critic_loss(scores, real, fake, None, u=torch.zeros(4, dtype=torch.float64))
    c = rep.components
    assert c["wd_estimate"].item() == pytest.approx(3.0)
    assert rep.total.item() == pytest.approx(-3.0 + c["gp"].item(), abs=1e-12)


def test_generator_loss_examples():
    real, fake = _pair()
    four = lambda x, gray: torch.full((len(x),), 4.0, dtype=x.dtype)  # noqa: E731
    rep = L.generator_loss_wgan(four, fake, None)
    assert rep.total.item() == pytest.approx(-4.0)
    rep = L.generator_loss_wgan(four, real, None, 1.0, real.clone())
    assert rep.components["l1"].item() == 0
    shifted = real + 2.5
    rep = L.generator_loss_wgan(four, shifted, None, 1.0, real)
    assert rep.total.item() == pytest.approx(-1.5)
    with pytest.raises(ValueError):
        L.generator_loss_wgan(four, fake, None, 1.0)
    with pytest.raises(ValueError):
        L.generator_loss_wgan(four, fake, None, -1.0, real)


def _setup(seed=0):
    n = toys.toys(seed)
    x, gray = toys.toy_batch(seed=seed)
    g = torch.Generator().manual_seed(seed + 7)
    eps = torch.randn(len(x), toys.LATENT, generator=g, dtype=torch.float64)
    z_p = torch.randn(len(x), toys.LATENT, generator=g, dtype=torch.float64)
    return n, x, gray, eps, z_p


def test_age_identities_and_determinism():
    n, x, gray, eps, z_p = _setup()
    enc, cond, dec = n["encoder"], n["conditional"], n["decoder"]
    enc.eval()
    adv, rec = L.age_losses(enc, dec, cond, x, gray, z_p)
    adv2, rec2 = L.age_losses(enc, dec, cond, x, gray, z_p)
    assert adv.total.item() == adv2.total.item() and rec.total.item() == rec2.total.item()
    # the real batch fed as "generated" yields a zero latent distance
    ident = lambda z, c: x  # noqa: E731
    adv0, rec0 = L.age_losses(enc, ident, cond, x, gray, z_p)
    assert adv0.total.item() == 0 and rec0.total.item() == 0


def test_ivae_hinge_arithmetic():
    # hinge contribution alpha * ([m - 20]+ + [m - 150]+) with m = 120, alpha = 0.5
    reg_r, reg_pp = t(20.0), t(150.0)
    hinge = 0.5 * (torch.relu(120 - reg_r) + torch.relu(120 - reg_pp))
    assert hinge.item() == pytest.approx(50.0)


def test_ivae_saturated_hinges_leave_plain_kl():
    n, x, gray, eps, z_p = _setup()
    enc, dec, cond = n["encoder"], n["decoder"], n["conditional"]
    rep, _ = L.ivae_encoder_loss(enc, dec, cond, x, gray, z_p, eps, m=1e-9)
    assert rep.components["hinge_r"].item() == 0 and rep.components["hinge_p"].item() == 0
    assert rep.components["adv"].item() == pytest.approx(rep.components["reg"].item())


def test_ivae_degenerates_to_cvae():
    n, x, gray, eps, z_p = _setup()
    enc, dec, cond = n["encoder"], n["decoder"], n["conditional"]
    enc.eval()
    rep, _ = L.ivae_encoder_loss(enc, dec, cond, x, gray, z_p, eps, m=120, alpha=0.0, beta=1.0)
    cvae = L.cvae_loss(enc, cond, dec, x, gray, eps, "L1")
    assert rep.total.item() == pytest.approx(cvae.total.item(), abs=1e-6)


def test_ivae_report_totals_and_validation():
    n, x, gray, eps, z_p = _setup()
    enc, dec, cond = n["encoder"], n["decoder"], n["conditional"]
    e, d = L.ivae_losses(enc, dec, cond, x, gray, z_p, m=3.0, alpha=0.5, beta=0.4, eps=eps)
    c = e.components
    assert e.total.item() == pytest.approx(
        (c["reg"] + 0.5 * (c["hinge_r"] + c["hinge_p"]) + 0.4 * c["ae"]).item(), abs=1e-6)
    dc = d.components
    assert d.total.item() == pytest.approx((0.5 * (dc["reg_r"] + dc["reg_pp"]) + 0.4 * dc["ae"]).item(), abs=1e-6)
    with pytest.raises(ValueError):
        L.ivae_encoder_loss(enc, dec, cond, x, gray, z_p, eps, m=0)


def test_ivae_hinge_gives_decoder_no_gradient():
    n, x, gray, eps, z_p = _setup()
    enc, dec, cond = n["encoder"], n["decoder"], n["conditional"]
    rep, _ = L.ivae_encoder_loss(enc, dec, cond, x, gray, z_p, eps, m=1e6)
    assert rep.components["hinge_r"].item() > 0
    hinge = rep.components["hinge_r"] + rep.components["hinge_p"]
    grads = torch.autograd.grad(hinge, list(dec.parameters()), allow_unused=True)
    assert all(g is None or g.abs().max() == 0 for g in grads)


def test_cvae_report_combination():
    n, x, gray, eps, _ = _setup()
    rep = L.cvae_loss(n["encoder"], n["conditional"], n["decoder"], x, gray, eps)
    c = rep.components
    assert rep.total.item() == pytest.approx((c["recon"] + c["kl"]).item(), abs=1e-6)
    assert c["recon"].item() >= 0 and c["kl"].item() >= 0


def test_loss_report_helpers():
    rep = L.LossReport(t(1.0), {"a": t(0.5)})
    assert rep.scalars() == {"a": 0.5, "total": 1.0}
    with pytest.raises(NonFiniteError, match="a"):
        L.LossReport(t(1.0), {"a": t(float("nan"))}).check_finite()


def test_toy_networks_are_small():
    for name, net in toys.toys().items():
        assert toys.n_params(net) <= 1000, name


@pytest.mark.parametrize("name", list(toys.gradient_cases()))
def test_finite_difference_gradients(name):
    fn, fd, params = toys.gradient_cases()[name]
    assert sum(p.numel() for p in params) <= 1000
    assert toys.fd_relative_error(fn, params, fd_fn=fd) < 1e-3
