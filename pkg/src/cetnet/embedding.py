"""Token embedding layers: convolutional stem, convolutional embedding, and the
non-convolutional patchify / patch-merging downsamplers."""

from __future__ import annotations

from . import ops
from .blocks import BlockKind, BlockSpec, FusedMBConv, MBConv
from .errors import ConfigurationError, DimensionError
from .nn import ChannelLayerNorm, Conv2d, LayerNorm, Linear, Module, Sequential

DEFAULT_STEM_EXPAND = (1, 1, 2, 1)


def _check_map(x, channels, what):
    if x.ndim != 4:
        raise DimensionError(f"{what}: expected NCHW input, got {x.shape}")
    if x.shape[1] != channels:
        raise DimensionError(f"{what}: channel axis has {x.shape[1]} channels, expected {channels}")


def _cost_seq(layers, shape):
    total = 0
    for layer in layers:
        shape, macs = layer.cost(shape)
        total += macs
    return shape, total


class ConvStem(Module):
    """S0 + CE of S1: Fused-MBConv stack with two stride-2 layers, 1x1 conv, LayerNorm.

    Widths run 3 -> D/2 (S0) -> D (S1). With ``layers=5`` this is
    FMB(3->D/2, s2), FMB(D/2->D/2), FMB(D/2->D, s2), FMB(D->D), conv1x1(D->D).
    Other depths (>= 3) split the ``layers-1`` Fused-MBConvs between the two
    halves, front-loading S0.

    ``expand`` gives the Fused-MBConv ratios for (first layer, S0 rest,
    first S1 layer, S1 rest).
    """

    def __init__(self, dim: int, layers: int = 5, expand=DEFAULT_STEM_EXPAND, in_chans: int = 3,
                 act: str = "silu", se: bool = False, rng=None):
        super().__init__()
        if layers < 3:
            raise ConfigurationError(f"stem needs at least 3 layers (two strided + 1x1), got {layers}")
        if dim % 2:
            raise ConfigurationError(f"stem width D must be even, got {dim}")
        self.dim, self.in_chans = dim, in_chans
        n_fused = layers - 1
        n_s0 = -(-n_fused // 2)
        half = dim // 2
        specs = []
        for i in range(n_fused):
            if i == 0:
                specs.append(BlockSpec(BlockKind.FUSED_MBCONV, in_chans, half, 2, expand[0], se=se))
            elif i < n_s0:
                specs.append(BlockSpec(BlockKind.FUSED_MBCONV, half, half, 1, expand[1], se=se))
            elif i == n_s0:
                specs.append(BlockSpec(BlockKind.FUSED_MBCONV, half, dim, 2, expand[2], se=se))
            else:
                specs.append(BlockSpec(BlockKind.FUSED_MBCONV, dim, dim, 1, expand[3], se=se))
        self.blocks = Sequential(*[FusedMBConv(s, act, rng) for s in specs])
        self.pointwise = Conv2d(dim, dim, 1, bias=True, rng=rng)
        self.norm = ChannelLayerNorm(dim)

    def forward(self, x):
        _check_map(x, self.in_chans, "ConvStem")
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise DimensionError(f"ConvStem: spatial size {x.shape[2]}x{x.shape[3]} is not divisible by 4")
        return self.norm(self.pointwise(self.blocks(x)))

    def cost(self, shape):
        shape, macs = _cost_seq(self.blocks, shape)
        return shape, macs + self.pointwise.macs(shape[1], shape[2])


class ConvEmbed(Module):
    """MBConv(C -> 2C, stride 2) followed by ``layers-1`` MBConv(2C -> 2C)."""

    def __init__(self, dim: int, layers: int = 5, expand_first: int = 1, expand_rest: int = 1,
                 act: str = "silu", se: bool = False, rng=None):
        super().__init__()
        if layers < 1:
            raise ConfigurationError(f"convolutional embedding needs layers >= 1, got {layers}")
        self.dim = dim
        specs = [BlockSpec(BlockKind.MBCONV, dim, 2 * dim, 2, expand_first, se=se)]
        specs += [BlockSpec(BlockKind.MBCONV, 2 * dim, 2 * dim, 1, expand_rest, se=se)] * (layers - 1)
        self.blocks = Sequential(*[MBConv(s, act, rng) for s in specs])

    def forward(self, x):
        _check_map(x, self.dim, "ConvEmbed")
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise DimensionError(f"ConvEmbed: spatial size {x.shape[2]}x{x.shape[3]} is not even")
        return self.blocks(x)

    def cost(self, shape):
        return _cost_seq(self.blocks, shape)


class PatchMerging(Module):
    """2x2 neighbourhood concat (C -> 4C) -> LayerNorm -> linear 4C -> 2C (no bias)."""

    def __init__(self, dim: int, rng=None):
        super().__init__()
        self.dim = dim
        self.norm = LayerNorm(4 * dim)
        self.reduction = Linear(4 * dim, 2 * dim, bias=False, rng=rng)

    @staticmethod
    def merge(x):
        """NCHW -> (N, H/2, W/2, 4C); channel blocks ordered (0,0), (1,0), (0,1), (1,1) as (dy, dx)."""
        n, c, h, w = x.shape
        x = ops.reshape(x, (n, c, h // 2, 2, w // 2, 2))
        x = ops.permute(x, (0, 2, 4, 5, 3, 1))
        return ops.reshape(x, (n, h // 2, w // 2, 4 * c))

    def forward(self, x):
        _check_map(x, self.dim, "PatchMerging")
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise DimensionError(f"PatchMerging: spatial size {x.shape[2]}x{x.shape[3]} is not even")
        y = self.reduction(self.norm(self.merge(x)))
        return ops.permute(y, (0, 3, 1, 2))

    def cost(self, shape):
        c, h, w = shape
        return (2 * c, h // 2, w // 2), self.reduction.macs((h // 2) * (w // 2))


class PatchEmbed(Module):
    """Non-overlapping 4x4 patchify: unfold -> linear 48 -> D -> LayerNorm."""

    def __init__(self, dim: int, patch: int = 4, in_chans: int = 3, rng=None):
        super().__init__()
        self.dim, self.patch, self.in_chans = dim, patch, in_chans
        self.proj = Linear(in_chans * patch * patch, dim, rng=rng)
        self.norm = LayerNorm(dim)

    def forward(self, x):
        _check_map(x, self.in_chans, "PatchEmbed")
        n, c, h, w = x.shape
        p = self.patch
        if h % p or w % p:
            raise DimensionError(f"PatchEmbed: spatial size {h}x{w} is not divisible by {p}")
        x = ops.reshape(x, (n, c, h // p, p, w // p, p))
        x = ops.reshape(ops.permute(x, (0, 2, 4, 1, 3, 5)), (n, h // p, w // p, c * p * p))
        y = self.norm(self.proj(x))
        return ops.permute(y, (0, 3, 1, 2))

    def cost(self, shape):
        c, h, w = shape
        p = self.patch
        return (self.dim, h // p, w // p), self.proj.macs((h // p) * (w // p))


def conv_stem_forward(image, stem: ConvStem):
    return stem(image)


def conv_embed_forward(x, embed: ConvEmbed):
    return embed(x)


def patch_merging_forward(x, merging: PatchMerging):
    return merging(x)
