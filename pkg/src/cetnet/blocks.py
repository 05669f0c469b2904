"""Convolutional building units: MBConv, Fused-MBConv, depthwise-separable projection.

All blocks take and return NCHW tensors and expose ``cost((C, H, W))``
returning ``((C', H', W'), macs)`` for the static analyzer.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import ops
from .errors import ConfigurationError, DimensionError
from .nn import Activation, BatchNorm2d, Conv2d, Module, Sequential


class BlockKind(str, Enum):
    MBCONV = "MBConv"
    FUSED_MBCONV = "FusedMBConv"
    DWSEP = "DWSepConv"


@dataclass(frozen=True)
class BlockSpec:
    kind: BlockKind
    c_in: int
    c_out: int
    stride: int = 1
    expand_ratio: int = 1
    norm: str = "batch"
    se: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", BlockKind(self.kind))
        if self.expand_ratio not in (1, 2):
            raise ConfigurationError(f"expand_ratio must be 1 or 2, got {self.expand_ratio}")
        if self.stride not in (1, 2):
            raise ConfigurationError(f"stride must be 1 or 2, got {self.stride}")
        if self.c_in < 1 or self.c_out < 1:
            raise ConfigurationError(f"channel counts must be positive ({self.c_in}, {self.c_out})")
        if self.norm != "batch":
            raise ConfigurationError(f"conv blocks use BatchNorm; got norm={self.norm!r}")

    @property
    def residual(self) -> bool:
        return self.stride == 1 and self.c_in == self.c_out

    @property
    def hidden(self) -> int:
        return self.c_in * self.expand_ratio


def _check_channels(x, c, what):
    if x.ndim != 4:
        raise DimensionError(f"{what}: expected NCHW input, got shape {x.shape}")
    if x.shape[1] != c:
        raise DimensionError(f"{what}: channel axis has {x.shape[1]} channels, block expects {c}")


def _out_hw(h, w, stride):
    return (h - 1) // stride + 1, (w - 1) // stride + 1


class SqueezeExcite(Module):
    """Channel gating: global pool -> 1x1 reduce -> SiLU -> 1x1 expand -> sigmoid."""

    def __init__(self, channels: int, reduced: int, rng=None):
        super().__init__()
        self.reduce = Conv2d(channels, reduced, 1, rng=rng)
        self.expand = Conv2d(reduced, channels, 1, rng=rng)

    def forward(self, x):
        s = ops.mean(x, axis=(2, 3), keepdims=True)
        s = ops.sigmoid(self.expand(ops.silu(self.reduce(s))))
        return ops.mul(x, ops.broadcast_to(s, x.shape))

    def macs(self):
        return self.reduce.macs(1, 1) + self.expand.macs(1, 1)


class MBConv(Module):
    """Inverted residual: [1x1 expand] -> 3x3 depthwise (strided) -> 1x1 linear project.

    With ``expand_ratio == 1`` the expansion conv is omitted and the depthwise
    conv acts directly on the input (MobileNetV2 convention).
    """

    def __init__(self, spec: BlockSpec, act: str = "silu", rng=None):
        super().__init__()
        if spec.kind is not BlockKind.MBCONV:
            raise ConfigurationError(f"MBConv needs kind=MBConv, got {spec.kind.value}")
        object.__setattr__(self, "spec", spec)
        hidden = spec.hidden
        if spec.expand_ratio != 1:
            self.expand = Sequential(Conv2d(spec.c_in, hidden, 1, bias=False, rng=rng),
                                     BatchNorm2d(hidden), Activation(act))
        else:
            self.expand = None
        self.depthwise = Sequential(Conv2d(hidden, hidden, 3, spec.stride, 1, groups=hidden, bias=False, rng=rng),
                                    BatchNorm2d(hidden), Activation(act))
        self.se = SqueezeExcite(hidden, max(1, spec.c_in // 4), rng=rng) if spec.se else None
        self.project = Sequential(Conv2d(hidden, spec.c_out, 1, bias=False, rng=rng), BatchNorm2d(spec.c_out))

    def forward(self, x):
        _check_channels(x, self.spec.c_in, "MBConv")
        h = x if self.expand is None else self.expand(x)
        h = self.depthwise(h)
        if self.se is not None:
            h = self.se(h)
        h = self.project(h)
        return ops.add(h, x) if self.spec.residual else h

    def cost(self, shape):
        c, hh, ww = shape
        s = self.spec
        ho, wo = _out_hw(hh, ww, s.stride)
        macs = 0
        if self.expand is not None:
            macs += self.expand[0].macs(hh, ww)
        macs += self.depthwise[0].macs(hh, ww)
        if self.se is not None:
            macs += self.se.macs()
        macs += self.project[0].macs(ho, wo)
        return (s.c_out, ho, wo), macs


class FusedMBConv(Module):
    """3x3 full conv (strided, expanding) -> [1x1 project].

    With ``expand_ratio == 1`` the block is a single 3x3 conv + norm + activation.
    """

    def __init__(self, spec: BlockSpec, act: str = "silu", rng=None):
        super().__init__()
        if spec.kind is not BlockKind.FUSED_MBCONV:
            raise ConfigurationError(f"FusedMBConv needs kind=FusedMBConv, got {spec.kind.value}")
        object.__setattr__(self, "spec", spec)
        if spec.expand_ratio == 1:
            self.fused = Sequential(Conv2d(spec.c_in, spec.c_out, 3, spec.stride, 1, bias=False, rng=rng),
                                    BatchNorm2d(spec.c_out), Activation(act))
            self.se = None
            self.project = None
        else:
            hidden = spec.hidden
            self.fused = Sequential(Conv2d(spec.c_in, hidden, 3, spec.stride, 1, bias=False, rng=rng),
                                    BatchNorm2d(hidden), Activation(act))
            self.se = SqueezeExcite(hidden, max(1, spec.c_in // 4), rng=rng) if spec.se else None
            self.project = Sequential(Conv2d(hidden, spec.c_out, 1, bias=False, rng=rng), BatchNorm2d(spec.c_out))

    def forward(self, x):
        _check_channels(x, self.spec.c_in, "FusedMBConv")
        h = self.fused(x)
        if self.se is not None:
            h = self.se(h)
        if self.project is not None:
            h = self.project(h)
        return ops.add(h, x) if self.spec.residual else h

    def cost(self, shape):
        c, hh, ww = shape
        s = self.spec
        ho, wo = _out_hw(hh, ww, s.stride)
        macs = self.fused[0].macs(hh, ww)
        if self.se is not None:
            macs += self.se.macs()
        if self.project is not None:
            macs += self.project[0].macs(ho, wo)
        return (s.c_out, ho, wo), macs


class DWSepConv(Module):
    """Depthwise 3x3 (stride 1, pad 1) followed by an optional pointwise 1x1.

    Used as the convolutional projection on tokens: shape-preserving.
    """

    def __init__(self, channels: int, pointwise: bool = True, rng=None):
        super().__init__()
        self.channels = channels
        self.depthwise = Conv2d(channels, channels, 3, 1, 1, groups=channels, bias=True, rng=rng)
        self.pointwise = Conv2d(channels, channels, 1, bias=True, rng=rng) if pointwise else None

    def identity_init(self):
        """Delta depthwise kernel and identity pointwise map: forward becomes the identity."""
        w = np.zeros_like(self.depthwise.weight.data)
        w[:, 0, 1, 1] = 1.0
        self.depthwise.weight.data[...] = w
        self.depthwise.bias.data[...] = 0.0
        if self.pointwise is not None:
            self.pointwise.weight.data[...] = np.eye(self.channels, dtype=w.dtype)[:, :, None, None]
            self.pointwise.bias.data[...] = 0.0
        return self

    def forward_map(self, x):
        _check_channels(x, self.channels, "DWSepConv")
        y = self.depthwise(x)
        return y if self.pointwise is None else self.pointwise(y)

    def forward(self, tokens, h: int, w: int):
        """Tokens (N, H*W, C) -> reshape to NCHW -> conv -> flatten back."""
        n, length, c = tokens.shape
        if length != h * w:
            raise DimensionError(f"DWSepConv: token count {length} != H*W = {h}*{w}")
        x = ops.permute(ops.reshape(tokens, (n, h, w, c)), (0, 3, 1, 2))
        y = self.forward_map(x)
        return ops.reshape(ops.permute(y, (0, 2, 3, 1)), (n, length, c))

    def cost(self, shape):
        c, h, w = shape
        macs = self.depthwise.macs(h, w)
        if self.pointwise is not None:
            macs += self.pointwise.macs(h, w)
        return shape, macs


def build_block(spec: BlockSpec, act: str = "silu", rng=None) -> Module:
    if spec.kind is BlockKind.MBCONV:
        return MBConv(spec, act, rng)
    if spec.kind is BlockKind.FUSED_MBCONV:
        return FusedMBConv(spec, act, rng)
    return DWSepConv(spec.c_in, rng=rng)
