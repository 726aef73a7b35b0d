"""Training loops for the eight model configurations.

Randomness: parameter initialization and every noise draw (latent samples,
reparameterization noise, gradient-penalty interpolation weights) come from
one ``torch.Generator`` seeded with ``config.seed``, consumed in the order
init -> per step (in step order) noise. Batch order is a separate pure
function of ``(seed, epoch)``. The generator state is checkpointed, so a
resumed run draws exactly the noise an uninterrupted run would have.
"""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import torch
from torch import nn

from chromagen import losses as L
from chromagen.data import ImageBatch, LabeledImageSet, make_batches, num_batches
from chromagen.errors import NonFiniteLossError
from chromagen.experiment_io import (
    CheckpointBundle,
    MetricRecord,
    append_metrics,
    checkpoint_path,
    load_checkpoint,
    numpy_to_state,
    save_checkpoint,
    state_to_numpy,
)
from chromagen.models import LATENT_DIM, build_network, require_double_backward

log = logging.getLogger(__name__)

MODELS = ("cnn_l1", "cnn_l2", "cvae_l1", "cvae_l2", "cwgan_gp", "cwgan_gp_l1", "age", "ivae")
SCHEDULES = ("constant", "linear_to_zero")

FAMILY = {
    "cnn_l1": "cnn", "cnn_l2": "cnn", "cvae_l1": "cvae", "cvae_l2": "cvae",
    "cwgan_gp": "cwgan", "cwgan_gp_l1": "cwgan", "age": "age", "ivae": "ivae",
}
DEFAULT_CRITIC_RATIO = {"cwgan_gp": 5, "cwgan_gp_l1": 1}
DEFAULT_SCHEDULE = {"cwgan_gp": "linear_to_zero", "cwgan_gp_l1": "linear_to_zero"}


@dataclass
class IvaeConfig:
    m: float = 120.0
    alpha: float = 0.5
    beta: float = 0.4


@dataclass
class TrainConfig:
    model: str = "cnn_l1"
    epochs: int = 100
    batch_size: int = 64
    seed: int = 0
    lr: float = 0.001
    adam_betas: Tuple[float, float] = (0.5, 0.999)
    lambda_gp: float = 10.0
    # None picks the family default (5 for cwgan_gp, 1 otherwise)
    critic_ratio: Optional[int] = None
    l1_weight: float = 1.0
    ivae: IvaeConfig = field(default_factory=IvaeConfig)
    # None picks linear_to_zero for the CWGAN variants, constant otherwise
    lr_schedule: Optional[str] = None
    subset: Optional[int] = None
    eval_every: int = 1
    eval_subset: Optional[int] = None
    is_splits: int = 1
    checkpoint_every: int = 1
    drop_last: bool = False

    def validate(self) -> "TrainConfig":
        if self.model not in MODELS:
            raise ValueError(f"unknown model {self.model!r}; valid models: {', '.join(MODELS)}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.critic_ratio is not None and self.critic_ratio < 1:
            raise ValueError("critic_ratio must be >= 1")
        if self.lr_schedule is not None and self.lr_schedule not in SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {SCHEDULES}")
        if self.lambda_gp < 0 or self.l1_weight < 0:
            raise ValueError("lambda_gp and l1_weight must be >= 0")
        if self.ivae.m <= 0 or self.ivae.alpha < 0 or self.ivae.beta < 0:
            raise ValueError("ivae needs m > 0 and alpha, beta >= 0")
        if self.is_splits < 1 or self.eval_every < 0 or self.checkpoint_every < 0:
            raise ValueError("is_splits must be >= 1; eval_every, checkpoint_every >= 0")
        if len(self.adam_betas) != 2:
            raise ValueError("adam_betas needs two values")
        return self

    def resolved(self) -> "TrainConfig":
        self.validate()
        return replace(
            self,
            adam_betas=tuple(self.adam_betas),
            critic_ratio=self.critic_ratio or DEFAULT_CRITIC_RATIO.get(self.model, 1),
            lr_schedule=self.lr_schedule or DEFAULT_SCHEDULE.get(self.model, "constant"),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("ivae"), dict):
            d["ivae"] = IvaeConfig(**d["ivae"])
        if "adam_betas" in d:
            d["adam_betas"] = tuple(d["adam_betas"])
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def lr_at(schedule: str, step: int, total_steps: int, base: float) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if schedule == "constant":
        return base
    if schedule == "linear_to_zero":
        return base * (1.0 - step / total_steps) if total_steps else base
    raise ValueError(f"unknown schedule {schedule!r}")


@dataclass
class RunArtifacts:
    networks: Dict[str, nn.Module]
    records: List[MetricRecord]
    config: TrainConfig
    log_path: Optional[Path] = None
    checkpoints: List[Path] = field(default_factory=list)
    wall_seconds: float = 0.0
    first_step_losses: Dict[str, float] = field(default_factory=dict)


class ModelState:
    """Networks, their optimizers, and the run's noise generator."""

    def __init__(self, config: TrainConfig):
        self.config = config
        self.family = FAMILY[config.model]
        self.generator = torch.Generator().manual_seed(config.seed)
        g = self.generator
        if self.family == "cnn":
            self.nets = {"colorizer": build_network("cnn_colorizer", g)}
            groups = {"colorizer": ["colorizer"]}
        elif self.family == "cwgan":
            require_double_backward()
            self.nets = {
                "generator": build_network("cwgan_generator", g),
                "critic": build_network("cwgan_critic", g),
            }
            groups = {"generator": ["generator"], "critic": ["critic"]}
        else:
            self.nets = {
                "encoder": build_network("cvae_encoder", g),
                "conditional": build_network("cvae_conditional", g),
                "decoder": build_network("cvae_decoder", g),
            }
            groups = {
                "cvae": {"vae": ["encoder", "conditional", "decoder"]},
                "age": {"encoder": ["encoder", "conditional"], "decoder": ["decoder"]},
                "ivae": {"encoder": ["encoder"], "decoder": ["decoder", "conditional"]},
            }[self.family]
        self.groups = groups
        self.optimizers = {
            name: torch.optim.Adam(
                [p for n in members for p in self.nets[n].parameters()],
                lr=config.lr, betas=tuple(config.adam_betas),
            )
            for name, members in groups.items()
        }

    def set_mode(self, training: bool) -> None:
        for net in self.nets.values():
            net.train(training)
        assert_mode(self.nets.values(), training)

    def set_lr(self, lr: float) -> None:
        for opt in self.optimizers.values():
            for group in opt.param_groups:
                group["lr"] = lr

    def params(self, group: str):
        return [p for n in self.groups[group] for p in self.nets[n].parameters()]

    def state_bundle(self, epoch: int, global_step: int) -> CheckpointBundle:
        return CheckpointBundle(
            model=self.config.model,
            epoch=epoch,
            networks={n: state_to_numpy(net.state_dict()) for n, net in self.nets.items()},
            optimizers={n: opt.state_dict() for n, opt in self.optimizers.items()},
            rng={"torch": self.generator.get_state().numpy().copy()},
            config=self.config.to_dict(),
            extra={"global_step": global_step},
        )

    def load_bundle(self, bundle: CheckpointBundle) -> None:
        for name, net in self.nets.items():
            net.load_state_dict(numpy_to_state(bundle.networks[name]))
        for name, opt in self.optimizers.items():
            opt.load_state_dict(_to_torch(bundle.optimizers[name]))
        self.generator.set_state(torch.from_numpy(np.array(bundle.rng["torch"], copy=True)))


def _to_torch(tree):
    if isinstance(tree, np.ndarray):
        return torch.from_numpy(np.array(tree, copy=True))
    if isinstance(tree, dict):
        return {k: _to_torch(v) for k, v in tree.items()}
    if isinstance(tree, list):
        return [_to_torch(v) for v in tree]
    if isinstance(tree, tuple):
        return tuple(_to_torch(v) for v in tree)
    return tree


def assert_mode(nets, training: bool) -> None:
    for net in nets:
        for m in net.modules():
            if m.training != training:
                raise AssertionError(
                    f"{type(m).__name__} is in {'train' if m.training else 'eval'} mode, "
                    f"expected {'train' if training else 'eval'}"
                )


def restore_networks(path) -> Tuple[ModelState, CheckpointBundle]:
    """Rebuild a model (with optimizers) from a checkpoint file."""
    bundle = load_checkpoint(path)
    config = TrainConfig.from_dict(bundle.config).resolved()
    state = ModelState(config)
    state.load_bundle(bundle)
    return state, bundle


def _f(t: torch.Tensor) -> float:
    return float(t.detach())


def _backward_into(loss: torch.Tensor, params) -> None:
    grads = torch.autograd.grad(loss, params, retain_graph=True, allow_unused=True)
    for p, g in zip(params, grads):
        p.grad = torch.zeros_like(p) if g is None else g


class Trainer:
    def __init__(
        self,
        config: TrainConfig,
        data: LabeledImageSet,
        run_dir=None,
        test_data: Optional[LabeledImageSet] = None,
        extractor=None,
        resume_from=None,
        on_epoch: Optional[Callable[[MetricRecord], None]] = None,
    ):
        self.config = config.resolved()
        self.data = data.subset(self.config.subset)
        if len(self.data) == 0:
            raise ValueError("training data is empty")
        self.test_data = test_data.subset(self.config.eval_subset) if test_data is not None else None
        self.extractor = extractor
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.on_epoch = on_epoch
        self.state = ModelState(self.config)
        self.start_epoch = 0
        self.global_step = 0
        if resume_from is not None:
            bundle = load_checkpoint(resume_from)
            self.state.load_bundle(bundle)
            self.start_epoch = bundle.epoch
            self.global_step = bundle.extra["global_step"]
        self.steps_per_epoch = num_batches(len(self.data), self.config.batch_size,
                                           self.config.drop_last)
        self.total_steps = self.config.epochs * self.steps_per_epoch
        self.gp_cfg = L.GpConfig(self.config.lambda_gp)

    # -- noise -------------------------------------------------------------

    def _normal(self, *shape) -> torch.Tensor:
        return torch.randn(*shape, generator=self.state.generator)

    def _uniform(self, n) -> torch.Tensor:
        return torch.rand(n, generator=self.state.generator)

    # -- family steps --------------------------------------------------------

    def _step_cnn(self, batch: ImageBatch) -> Dict[str, float]:
        net = self.state.nets["colorizer"]
        kind = "L1" if self.config.model == "cnn_l1" else "L2"
        loss = L.reconstruction_loss(kind, net(batch.gray), batch.color, "mean")
        self._guard({"recon": loss})
        opt = self.state.optimizers["colorizer"]
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        return {"recon": _f(loss)}

    def _step_cvae(self, batch: ImageBatch) -> Dict[str, float]:
        n = self.state.nets
        kind = "L1" if self.config.model == "cvae_l1" else "L2"
        eps = self._normal(len(batch), LATENT_DIM)
        report = L.cvae_loss(n["encoder"], n["conditional"], n["decoder"], batch.color,
                             batch.gray, eps, kind)
        self._guard(report.components)
        opt = self.state.optimizers["vae"]
        opt.zero_grad(set_to_none=True)
        report.total.backward()
        opt.step()
        return report.scalars()

    def _step_cwgan(self, batch: ImageBatch) -> Dict[str, float]:
        n, opts, cfg = self.state.nets, self.state.optimizers, self.config
        gen, critic = n["generator"], n["critic"]
        b = len(batch)
        z = self._normal(b, LATENT_DIM)
        u = self._uniform(b)
        with torch.no_grad():
            fake = gen(z, batch.gray)
        c_report = L.critic_loss(critic, batch.color, fake, batch.gray, self.gp_cfg, u)
        self._guard({f"critic_{k}": v for k, v in c_report.components.items()})
        opts["critic"].zero_grad(set_to_none=True)
        c_report.total.backward()
        opts["critic"].step()
        out = {"critic_total": _f(c_report.total),
               **{k: _f(v) for k, v in c_report.components.items()}}
        if (self.global_step + 1) % cfg.critic_ratio == 0:
            l1_weight = cfg.l1_weight if cfg.model == "cwgan_gp_l1" else 0.0
            z = self._normal(b, LATENT_DIM)
            fake = gen(z, batch.gray)
            g_report = L.generator_loss_wgan(critic, fake, batch.gray, l1_weight, batch.color)
            self._guard({f"gen_{k}": v for k, v in g_report.components.items()})
            opts["generator"].zero_grad(set_to_none=True)
            g_report.total.backward()
            opts["generator"].step()
            # critic gradients from the generator pass are discarded
            opts["critic"].zero_grad(set_to_none=True)
            out.update({"gen_total": _f(g_report.total), "gen_adv": _f(g_report.components["adv"]),
                        "gen_l1": _f(g_report.components["l1"])})
        return out

    def _step_age(self, batch: ImageBatch) -> Dict[str, float]:
        n, opts = self.state.nets, self.state.optimizers
        z_prior = self._normal(len(batch), LATENT_DIM)
        adv, z_gen = L.age_adversarial_loss(n["encoder"], n["decoder"], n["conditional"],
                                            batch.color, batch.gray, z_prior)
        self._guard(adv.components)
        opts["encoder"].zero_grad(set_to_none=True)
        _backward_into(adv.total, self.state.params("encoder"))
        opts["encoder"].step()
        rec = L.age_reconstruction_loss(n["decoder"], n["conditional"], z_gen.detach(),
                                        batch.gray, batch.color)
        self._guard(rec.components)
        opts["decoder"].zero_grad(set_to_none=True)
        _backward_into(rec.total, self.state.params("decoder"))
        opts["decoder"].step()
        return {"adv_latent": _f(adv.total), "rec": _f(rec.total)}

    def _step_ivae(self, batch: ImageBatch) -> Dict[str, float]:
        n, opts, icfg = self.state.nets, self.state.optimizers, self.config.ivae
        b = len(batch)
        z_p = self._normal(b, LATENT_DIM)
        eps = self._normal(b, LATENT_DIM)
        enc, (z, _, _) = L.ivae_encoder_loss(n["encoder"], n["decoder"], n["conditional"],
                                             batch.color, batch.gray, z_p, eps,
                                             icfg.m, icfg.alpha, icfg.beta)
        self._guard({f"enc_{k}": v for k, v in enc.components.items()})
        opts["encoder"].zero_grad(set_to_none=True)
        _backward_into(enc.total, self.state.params("encoder"))
        opts["encoder"].step()
        dec = L.ivae_decoder_loss(n["encoder"], n["decoder"], n["conditional"], batch.color,
                                  batch.gray, z, z_p, icfg.alpha, icfg.beta)
        self._guard({f"dec_{k}": v for k, v in dec.components.items()})
        opts["decoder"].zero_grad(set_to_none=True)
        _backward_into(dec.total, self.state.params("decoder"))
        opts["decoder"].step()
        out = {f"enc_{k}": _f(v) for k, v in enc.components.items()}
        out["enc_total"] = _f(enc.total)
        out.update({f"dec_{k}": _f(v) for k, v in dec.components.items()})
        out["dec_total"] = _f(dec.total)
        return out

    def _guard(self, components: Dict[str, torch.Tensor]) -> None:
        for name, value in components.items():
            v = float(value.detach())
            if not np.isfinite(v):
                raise NonFiniteLossError(self._epoch + 1, self.global_step, name, v)

    # -- evaluation ----------------------------------------------------------

    def evaluate(self, epoch: int) -> Dict[str, float]:
        from chromagen.metrics import score_images

        if self.extractor is None or self.test_data is None:
            return {}
        fake, real = colorize_dataset(self.state, self.test_data, seed=self.config.seed,
                                      batch_size=max(self.config.batch_size, 128))
        self.state.set_mode(True)
        return score_images(self.extractor, fake, self.config.is_splits, reference=real)

    # -- main loop -------------------------------------------------------------

    def run(self) -> RunArtifacts:
        cfg = self.config
        step_fn = getattr(self, f"_step_{self.state.family}")
        records: List[MetricRecord] = []
        ckpts: List[Path] = []
        first_step: Dict[str, float] = {}
        log_path = None
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            log_path = self.run_dir / "metrics.log"
            if self.start_epoch == 0 and log_path.exists():
                raise FileExistsError(f"{log_path} already exists; use a fresh run directory")
        t_start = time.perf_counter()
        for epoch in range(self.start_epoch, cfg.epochs):
            self._epoch = epoch
            t0 = time.perf_counter()
            sums: Dict[str, float] = {}
            counts: Dict[str, int] = {}
            for batch in make_batches(self.data, cfg.batch_size, cfg.seed, True, epoch,
                                      cfg.drop_last):
                self.state.set_mode(True)
                self.state.set_lr(lr_at(cfg.lr_schedule, self.global_step, self.total_steps, cfg.lr))
                comps = step_fn(batch)
                if not first_step:
                    first_step = dict(comps)
                for k, v in comps.items():
                    sums[k] = sums.get(k, 0.0) + v
                    counts[k] = counts.get(k, 0) + 1
                self.global_step += 1
            record = MetricRecord(epoch=epoch + 1, losses={k: sums[k] / counts[k] for k in sums})
            if cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
                scores = self.evaluate(epoch + 1)
                record.is_mean = scores.get("is_mean")
                record.is_std = scores.get("is_std")
                record.fid = scores.get("fid")
            record.wall_seconds = time.perf_counter() - t0
            records.append(record)
            if log_path is not None:
                append_metrics(log_path, record)
                last = epoch + 1 == cfg.epochs
                if last or (cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0):
                    bundle = self.state.state_bundle(epoch + 1, self.global_step)
                    ckpts.append(save_checkpoint(bundle, checkpoint_path(self.run_dir, epoch + 1)))
            if self.on_epoch is not None:
                self.on_epoch(record)
        if self.run_dir is not None and cfg.epochs == 0:
            ckpts.append(save_checkpoint(self.state.state_bundle(0, 0),
                                         checkpoint_path(self.run_dir, 0)))
        return RunArtifacts(
            networks=self.state.nets, records=records, config=cfg, log_path=log_path,
            checkpoints=ckpts, wall_seconds=time.perf_counter() - t_start,
            first_step_losses=first_step,
        )


def train(config: TrainConfig, data: LabeledImageSet, **kwargs) -> RunArtifacts:
    """Train one model configuration; see :class:`Trainer` for keyword options."""
    return Trainer(config, data, **kwargs).run()


@torch.no_grad()
def colorize(state: ModelState, gray: torch.Tensor, generator: Optional[torch.Generator] = None,
             z: Optional[torch.Tensor] = None) -> torch.Tensor:
    """One colorization per gray input, in evaluation mode.

    Latent-variable families draw ``z`` from the standard normal prior unless
    it is supplied.
    """
    state.set_mode(False)
    n = state.nets
    if state.family == "cnn":
        return n["colorizer"](gray)
    if z is None:
        z = torch.randn(gray.shape[0], LATENT_DIM, generator=generator)
    if state.family == "cwgan":
        return n["generator"](z, gray)
    return n["decoder"](z, n["conditional"](gray))


def colorize_dataset(state: ModelState, data: LabeledImageSet, seed: int = 0,
                     batch_size: int = 128) -> Tuple[torch.Tensor, torch.Tensor]:
    """Colorize every image of ``data``; returns (generated, real) color tensors."""
    gen = torch.Generator().manual_seed(seed + 1_000_003)
    fakes, reals = [], []
    for batch in make_batches(data, batch_size, shuffle=False):
        fakes.append(colorize(state, batch.gray, gen))
        reals.append(batch.color)
    return torch.cat(fakes), torch.cat(reals)


def snapshot(module: nn.Module) -> Dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def deep_copy_networks(state: ModelState) -> Dict[str, nn.Module]:
    return {k: copy.deepcopy(v) for k, v in state.nets.items()}
