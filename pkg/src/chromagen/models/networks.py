"""Torch modules realized from :class:`ArchitectureSpec` tables."""

from __future__ import annotations

from typing import Dict, NamedTuple, Optional

import torch
import torch.nn.functional as F
from torch import nn

from chromagen.errors import CapabilityError, NonFiniteError, ShapeError
from chromagen.models import specs as S

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
INIT_STD = 0.02


class LatentStats(NamedTuple):
    mu: torch.Tensor
    log_sigma: torch.Tensor


def reparameterize(stats: LatentStats, eps: torch.Tensor) -> torch.Tensor:
    """``z = mu + exp(log_sigma) * eps``, with ``eps`` supplied by the caller."""
    mu, log_sigma = stats
    if not (torch.isfinite(mu).all() and torch.isfinite(log_sigma).all()):
        raise NonFiniteError("latent statistics contain non-finite values")
    if eps.shape != mu.shape:
        raise ShapeError(f"eps shape {tuple(eps.shape)} != mu shape {tuple(mu.shape)}")
    return mu + torch.exp(log_sigma) * eps


def _activation(name: str) -> nn.Module:
    if name == "leaky_relu":
        return nn.LeakyReLU(S.LEAKY_SLOPE)
    if name == "tanh":
        return nn.Tanh()
    return nn.Identity()


class ResidualDown(nn.Module):
    """Average-pool by ``stride``, then two 3x3 convolutions plus a 1x1 skip."""

    def __init__(self, in_ch: int, out_ch: int, layer: S.LayerSpec):
        super().__init__()
        self.pool = nn.AvgPool2d(layer.stride)
        pad = layer.kernel // 2
        self.conv1 = nn.Conv2d(in_ch, out_ch, layer.kernel, padding=pad)
        self.conv2 = nn.Conv2d(out_ch, out_ch, layer.kernel, padding=pad)
        self.skip = nn.Conv2d(in_ch, out_ch, 1)
        self.act = _activation(layer.activation)

    def forward(self, x):
        h = self.pool(x)
        return self.act(self.conv2(self.act(self.conv1(h))) + self.skip(h))


class Block(nn.Module):
    """One realized :class:`LayerSpec`: op, optional batch norm, activation."""

    def __init__(self, layer: S.LayerSpec, in_shape: S.Shape, side_shape=None):
        super().__init__()
        self.kind = layer.kind
        self.source = layer.source
        self.target_shape = layer.target_shape
        k = layer.kind
        bn = layer.batch_norm
        if k == "conv":
            self.op = nn.Conv2d(in_shape[0], layer.out_channels, layer.kernel, layer.stride,
                                layer.padding, dilation=layer.dilation, bias=not bn)
        elif k == "transposed_conv":
            self.op = nn.ConvTranspose2d(in_shape[0], layer.out_channels, layer.kernel,
                                         layer.stride, layer.padding, layer.output_padding,
                                         bias=not bn, dilation=layer.dilation)
        elif k == "dense":
            n_in = 1
            for d in in_shape:
                n_in *= d
            self.op = nn.Linear(n_in, layer.out_channels, bias=not bn)
        elif k == "pool_avg":
            self.op = nn.AvgPool2d(layer.kernel, layer.stride, layer.padding)
        elif k == "residual_block":
            self.op = ResidualDown(in_shape[0], layer.out_channels, layer)
        else:
            self.op = None
        if bn:
            self.norm = (nn.BatchNorm1d if k == "dense" else nn.BatchNorm2d)(
                layer.out_channels, eps=BN_EPS, momentum=BN_MOMENTUM)
        else:
            self.norm = None
        # residual blocks apply their own activation
        self.act = nn.Identity() if k == "residual_block" else _activation(layer.activation)

    def forward(self, x, side: Dict[str, torch.Tensor]):
        if self.kind == "reshape":
            return x.reshape(x.shape[0], *self.target_shape)
        if self.kind == "concat":
            return torch.cat([x, side[self.source]], dim=1)
        if self.kind == "dense":
            x = x.flatten(1)
        x = self.op(x)
        if self.norm is not None:
            x = self.norm(x)
        return self.act(x)


class Chain(nn.Module):
    def __init__(self, layers, in_shape: S.Shape, side_shapes: Dict[str, S.Shape], label: str):
        super().__init__()
        shapes = S._chain(layers, in_shape, side_shapes, label)
        ins = [in_shape] + shapes[:-1]
        self.blocks = nn.ModuleList(
            Block(layer, ins[i], side_shapes.get(layer.source)) for i, layer in enumerate(layers)
        )
        self.residual_from = {}
        projections = {}
        for i, layer in enumerate(layers):
            if layer.residual_from is None:
                continue
            j = layer.residual_from
            src, dst = shapes[j], shapes[i]
            stride = S.projection_stride(src[1], dst[1])
            self.residual_from[i] = j
            projections[str(i)] = nn.Conv2d(src[0], dst[0], 1, stride=stride)
        self.projections = nn.ModuleDict(projections)
        self.shapes = shapes

    def forward(self, x, side=None):
        side = side or {}
        outputs = []
        for i, block in enumerate(self.blocks):
            x = block(x, side)
            if i in self.residual_from:
                x = x + self.projections[str(i)](outputs[self.residual_from[i]])
            outputs.append(x)
        return x


class SpecNetwork(nn.Module):
    """Generic executor for an :class:`ArchitectureSpec`.

    ``forward(x, **extra)``: entries of ``extra`` named after a branch are fed
    through that branch; the rest are used directly as concat side inputs.
    Returns a tensor, or a dict keyed by head name when the spec has heads.
    """

    def __init__(self, spec: S.ArchitectureSpec):
        super().__init__()
        self.spec = spec
        S.infer_shapes(spec)
        self.branches = nn.ModuleDict({n: SpecNetwork(b) for n, b in spec.branches.items()})
        side_shapes = dict(spec.side_inputs)
        for name, branch in self.branches.items():
            side_shapes[name] = branch.output_shape
        self.trunk = Chain(spec.layers, tuple(spec.input_shape), side_shapes, spec.name)
        trunk_out = self.trunk.shapes[-1] if spec.layers else tuple(spec.input_shape)
        self.heads = nn.ModuleDict({
            n: Chain(h, trunk_out, side_shapes, f"{spec.name}.{n}") for n, h in spec.heads.items()
        })
        self.output_shape = trunk_out if not spec.heads else None

    def forward(self, x, **extra):
        side = {}
        for name, value in extra.items():
            side[name] = self.branches[name](value) if name in self.branches else value
        h = self.trunk(x, side)
        if not self.heads:
            return h
        return {name: head(h, side) for name, head in self.heads.items()}


class CNNColorizer(SpecNetwork):
    def __init__(self, spec: Optional[S.ArchitectureSpec] = None):
        super().__init__(spec or S.build_cnn_colorizer())

    def forward(self, gray):
        return super().forward(gray)


class Encoder(SpecNetwork):
    def __init__(self, spec: Optional[S.ArchitectureSpec] = None):
        super().__init__(spec or S.build_encoder())

    def forward(self, x) -> LatentStats:
        out = super().forward(x)
        return LatentStats(out["mu"], out["log_sigma"])


class Conditional(SpecNetwork):
    def __init__(self, spec: Optional[S.ArchitectureSpec] = None):
        super().__init__(spec or S.build_conditional())

    def forward(self, gray):
        return super().forward(gray)


class Decoder(SpecNetwork):
    def __init__(self, spec: Optional[S.ArchitectureSpec] = None):
        super().__init__(spec or S.build_decoder())
        self.latent_dim = self.spec.input_shape[0]

    def forward(self, z, cond):
        return super().forward(z, cond=cond)


class Generator(SpecNetwork):
    def __init__(self, spec: Optional[S.ArchitectureSpec] = None):
        super().__init__(spec or S.build_cwgan_generator())
        self.latent_dim = self.spec.input_shape[0]

    def forward(self, z, gray):
        return super().forward(z, cond=gray)


class Critic(SpecNetwork):
    """Scores a (gray, candidate) pair; returns one unbounded scalar per sample."""

    def __init__(self, spec: Optional[S.ArchitectureSpec] = None):
        super().__init__(spec or S.build_cwgan_critic())

    def forward(self, x, gray):
        return super().forward(torch.cat([gray, x], dim=1)).reshape(x.shape[0])


def init_parameters(module: nn.Module, generator: Optional[torch.Generator] = None) -> nn.Module:
    """Weights ~ N(0, 0.02), biases 0, batch-norm scale ~ N(1, 0.02).

    A ``log_sigma`` head is the exception: its weights start at zero, so every
    posterior starts at unit variance. With N(0, 0.02) on the 16384-wide dense
    head, initial log-sigmas reach ~8 and the IVAE re-encoding loop overflows.
    """
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, INIT_STD, generator=generator)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d)):
            nn.init.normal_(m.weight, 1.0, INIT_STD, generator=generator)
            nn.init.zeros_(m.bias)
    heads = getattr(module, "heads", None)
    if heads is not None and "log_sigma" in heads:
        for p in heads["log_sigma"].parameters():
            nn.init.zeros_(p)
    return module


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def require_double_backward() -> None:
    """Fail loudly unless gradients of gradients flow through conv and LeakyReLU."""
    try:
        torch.manual_seed(0)
        x = torch.randn(1, 1, 5, 5, dtype=torch.float64, requires_grad=True)
        w = torch.randn(1, 1, 3, 3, dtype=torch.float64, requires_grad=True)
        y = F.leaky_relu(F.conv2d(x, w, padding=1), S.LEAKY_SLOPE).pow(2).sum()
        (gx,) = torch.autograd.grad(y, x, create_graph=True)
        (gw,) = torch.autograd.grad(gx.pow(2).sum(), w)
    except RuntimeError as exc:
        raise CapabilityError(f"backend cannot differentiate through a gradient: {exc}") from exc
    if gw is None or not torch.isfinite(gw).all() or gw.abs().sum() == 0:
        raise CapabilityError("backend returned an empty second-order gradient")


_NETWORK_CLASSES = {
    "cnn_colorizer": CNNColorizer,
    "cvae_encoder": Encoder,
    "cvae_conditional": Conditional,
    "cvae_decoder": Decoder,
    "cwgan_generator": Generator,
    "cwgan_critic": Critic,
}


def build_network(name: str, generator: Optional[torch.Generator] = None) -> SpecNetwork:
    return init_parameters(_NETWORK_CLASSES[name](), generator)
