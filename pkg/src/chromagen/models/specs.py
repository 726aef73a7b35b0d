"""Declarative layer tables for every network, plus shape and receptive-field arithmetic.

An :class:`ArchitectureSpec` is pure data. :mod:`chromagen.models.networks`
turns one into a torch module; everything here runs without a backend.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

from chromagen.errors import ShapeError

Shape = Tuple[int, ...]

KINDS = ("conv", "transposed_conv", "dense", "reshape", "concat", "pool_avg", "residual_block")
ACTIVATIONS = ("leaky_relu", "tanh", "linear")
CONV_KINDS = ("conv", "transposed_conv")

LATENT_DIM = 512
LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class LayerSpec:
    """One row of a layer table.

    ``reshape`` carries its target in ``target_shape``; ``concat`` joins the
    side input named ``source`` along channels and ``out_channels`` is the
    joined width. ``residual_from`` adds the (1x1-projected) output of an
    earlier layer of the same chain after this layer's activation.
    """

    kind: str
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    output_padding: int = 0
    out_channels: int = 0
    activation: str = "linear"
    batch_norm: bool = False
    target_shape: Optional[Shape] = None
    source: Optional[str] = None
    residual_from: Optional[int] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.kernel < 1 or self.stride < 1 or self.dilation < 1:
            raise ValueError("kernel, stride and dilation must all be >= 1")
        if self.padding < 0 or self.output_padding < 0:
            raise ValueError("padding and output_padding must be >= 0")
        if self.output_padding and self.kind != "transposed_conv":
            raise ValueError("only transposed_conv may carry output_padding")
        if self.output_padding >= self.stride:
            raise ValueError("output_padding must be smaller than stride")
        if self.kind == "reshape" and not self.target_shape:
            raise ValueError("reshape needs target_shape")
        if self.kind == "concat" and not self.source:
            raise ValueError("concat needs a source")


@dataclass(frozen=True)
class ArchitectureSpec:
    name: str
    input_shape: Shape
    layers: Tuple[LayerSpec, ...]
    # parallel output heads applied to the trunk's output, in declared order
    heads: Dict[str, Tuple[LayerSpec, ...]] = field(default_factory=dict)
    # named tensors fed into concat layers, with their shapes
    side_inputs: Dict[str, Shape] = field(default_factory=dict)
    # sub-networks computing side inputs from extra inputs
    branches: Dict[str, "ArchitectureSpec"] = field(default_factory=dict)
    output_shape: Optional[Shape] = None

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def conv_out(size: int, kernel: int, stride: int = 1, padding: int = 0, dilation: int = 1) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def transposed_conv_out(
    size: int, kernel: int, stride: int = 1, padding: int = 0,
    output_padding: int = 0, dilation: int = 1,
) -> int:
    return (size - 1) * stride - 2 * padding + dilation * (kernel - 1) + output_padding + 1


def projection_stride(src: int, dst: int) -> int:
    """Stride of a 1x1 convolution mapping spatial size ``src`` onto ``dst``."""
    for s in range(1, src + 1):
        if conv_out(src, 1, s) == dst:
            return s
    raise ShapeError(f"no 1x1 projection maps spatial size {src} onto {dst}")


def _numel(shape: Shape) -> int:
    n = 1
    for d in shape:
        n *= d
    return n


def layer_output_shape(layer: LayerSpec, shape: Shape, side: Optional[Shape] = None) -> Shape:
    k = layer.kind
    if k == "dense":
        return (layer.out_channels,)
    if k == "reshape":
        if _numel(shape) != _numel(layer.target_shape):
            raise ShapeError(f"cannot reshape {shape} into {layer.target_shape}")
        return tuple(layer.target_shape)
    if len(shape) != 3:
        raise ShapeError(f"{k} needs a (C, H, W) input, got {shape}")
    c, h, w = shape
    if k == "conv":
        dims = [conv_out(d, layer.kernel, layer.stride, layer.padding, layer.dilation) for d in (h, w)]
        return (layer.out_channels, *dims)
    if k == "transposed_conv":
        dims = [
            transposed_conv_out(d, layer.kernel, layer.stride, layer.padding,
                                layer.output_padding, layer.dilation)
            for d in (h, w)
        ]
        return (layer.out_channels, *dims)
    if k == "pool_avg":
        return (c, *[conv_out(d, layer.kernel, layer.stride, layer.padding) for d in (h, w)])
    if k == "residual_block":
        # average-pool downsample, then two same-padded convolutions
        return (layer.out_channels, *[conv_out(d, layer.stride, layer.stride) for d in (h, w)])
    if k == "concat":
        if side is None:
            raise ShapeError(f"concat source {layer.source!r} has no declared shape")
        if tuple(side[1:]) != (h, w):
            raise ShapeError(f"concat spatial mismatch: {shape} vs {side}")
        if c + side[0] != layer.out_channels:
            raise ShapeError(
                f"concat of {c} and {side[0]} channels declared as {layer.out_channels}"
            )
        return (layer.out_channels, h, w)
    raise ShapeError(f"unhandled layer kind {k}")


def _chain(layers, shape: Shape, side_inputs, label: str) -> List[Shape]:
    shapes: List[Shape] = []
    for i, layer in enumerate(layers):
        try:
            out = layer_output_shape(layer, shape, side_inputs.get(layer.source))
        except ShapeError as exc:
            raise ShapeError(f"{label} layer {i + 1} ({layer.kind}): {exc}") from None
        if any(d <= 0 for d in out):
            raise ShapeError(
                f"{label} layer {i + 1} ({layer.kind}) produces non-positive shape {out}"
            )
        if layer.residual_from is not None:
            j = layer.residual_from
            if not 0 <= j < i:
                raise ShapeError(f"{label} layer {i + 1}: residual_from must point backwards")
            src = shapes[j]
            if len(src) != 3 or len(out) != 3:
                raise ShapeError(f"{label} layer {i + 1}: residual needs spatial tensors")
            projection_stride(src[1], out[1])
        shapes.append(out)
        shape = out
    return shapes


def infer_shapes(spec: ArchitectureSpec) -> List[Shape]:
    """Output shape after every trunk layer, followed by each head's final shape."""
    side = dict(spec.side_inputs)
    for name, branch in spec.branches.items():
        side[name] = infer_shapes(branch)[-1]
    shapes = _chain(spec.layers, tuple(spec.input_shape), side, spec.name)
    trunk_out = shapes[-1] if shapes else tuple(spec.input_shape)
    for name, head in spec.heads.items():
        shapes.append(_chain(head, trunk_out, side, f"{spec.name}.{name}")[-1])
    if spec.output_shape is not None and not spec.heads and shapes[-1] != tuple(spec.output_shape):
        raise ShapeError(
            f"{spec.name} ends at {shapes[-1]} but declares output {spec.output_shape}"
        )
    return shapes


def compute_receptive_field(layers) -> int:
    """Receptive field, in input pixels, of a stack of forward convolutions."""
    rf, jump = 1, 1
    for i, layer in enumerate(layers):
        if layer.kind != "conv":
            raise ValueError(
                f"receptive field is defined for conv layers only; layer {i + 1} is {layer.kind}"
            )
        rf += layer.dilation * (layer.kernel - 1) * jump
        jump *= layer.stride
    return rf


def _conv(k, s, p, c, d=1, act="leaky_relu", bn=True, residual_from=None):
    return LayerSpec("conv", kernel=k, stride=s, padding=p, dilation=d, out_channels=c,
                     activation=act, batch_norm=bn, residual_from=residual_from)


def _tconv(c, act="leaky_relu", bn=True):
    return LayerSpec("transposed_conv", kernel=3, stride=2, padding=1, output_padding=1,
                     out_channels=c, activation=act, batch_norm=bn)


def build_cnn_colorizer() -> ArchitectureSpec:
    layers = (
        _conv(3, 2, 1, 16),
        _conv(3, 2, 1, 64),
        _conv(3, 2, 1, 256),
        _conv(3, 1, 2, 256, d=2),
        _conv(3, 1, 2, 256, d=2),
        _tconv(128),
        _tconv(64),
        _tconv(3, act="tanh", bn=False),
    )
    return ArchitectureSpec("cnn_colorizer", (1, 64, 64), layers, output_shape=(3, 64, 64))


CNN_ENCODER_DEPTH = 5  # layers 1-5 of the colorizer act as its encoder


def build_encoder() -> ArchitectureSpec:
    trunk = (
        _conv(5, 2, 1, 16),
        _conv(3, 2, 1, 64),
        _conv(3, 2, 1, 256),
    )
    head = lambda: (LayerSpec("dense", out_channels=LATENT_DIM),)  # noqa: E731
    return ArchitectureSpec(
        "cvae_encoder", (3, 64, 64), trunk, heads={"mu": head(), "log_sigma": head()}
    )


def _conditional_layers(residual: bool):
    return (
        _conv(5, 2, 1, 16),
        _conv(3, 2, 1, 64, residual_from=0 if residual else None),
        _conv(3, 2, 1, 256, bn=False),
        # 1x1 projection so the concat is 64 + 64 = 128 channels
        _conv(1, 1, 0, 64, bn=False),
    )


def build_conditional(residual: bool = False) -> ArchitectureSpec:
    name = "cwgan_conditional" if residual else "cvae_conditional"
    return ArchitectureSpec(name, (1, 64, 64), _conditional_layers(residual),
                            output_shape=(64, 8, 8))


def _decoder_layers():
    return (
        LayerSpec("dense", out_channels=4096, activation="leaky_relu"),
        LayerSpec("reshape", target_shape=(64, 8, 8)),
        LayerSpec("concat", source="cond", out_channels=128),
        _conv(3, 1, 1, 256),
        # dilated convolutions keep 8x8, mirroring the colorizer's layers 4-5
        _conv(3, 1, 2, 256, d=2),
        _conv(3, 1, 2, 256, d=2),
        _tconv(128),
        _tconv(64),
        _tconv(3, act="tanh", bn=False),
    )


def build_decoder() -> ArchitectureSpec:
    return ArchitectureSpec(
        "cvae_decoder", (LATENT_DIM,), _decoder_layers(),
        side_inputs={"cond": (64, 8, 8)}, output_shape=(3, 64, 64),
    )


def build_cvae() -> Tuple[ArchitectureSpec, ArchitectureSpec, ArchitectureSpec]:
    return build_encoder(), build_conditional(), build_decoder()


def build_cwgan_generator() -> ArchitectureSpec:
    return ArchitectureSpec(
        "cwgan_generator", (LATENT_DIM,), _decoder_layers(),
        branches={"cond": build_conditional(residual=True)},
        output_shape=(3, 64, 64),
    )


def build_cwgan_critic() -> ArchitectureSpec:
    def conv(c, s=1):
        return _conv(3, s, 1, c, bn=False)

    layers = (
        conv(64), conv(64), conv(64),
        LayerSpec("residual_block", kernel=3, stride=2, padding=1, out_channels=128,
                  activation="leaky_relu"),
        LayerSpec("residual_block", kernel=3, stride=2, padding=1, out_channels=256,
                  activation="leaky_relu"),
        conv(256, s=2),
        LayerSpec("pool_avg", kernel=8, stride=8),
        LayerSpec("dense", out_channels=1),
    )
    return ArchitectureSpec("cwgan_critic", (4, 64, 64), layers, output_shape=(1,))


def all_specs() -> Dict[str, ArchitectureSpec]:
    enc, cond, dec = build_cvae()
    return {
        "cnn_colorizer": build_cnn_colorizer(),
        "cvae_encoder": enc,
        "cvae_conditional": cond,
        "cvae_decoder": dec,
        "cwgan_generator": build_cwgan_generator(),
        "cwgan_critic": build_cwgan_critic(),
    }
