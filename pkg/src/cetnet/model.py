"""Pattern parsing, model configuration and network assembly."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .attention import WindowBlock
from .blocks import BlockKind, BlockSpec, MBConv
from .embedding import DEFAULT_STEM_EXPAND, ConvEmbed, ConvStem, PatchEmbed, PatchMerging
from .errors import ConfigurationError, DimensionError, PatternParseError
from .nn import LayerNorm, Linear, Module, Sequential
from .tensor import Tensor

SLOT_NAMES = ("embed1", "stage1", "embed2", "stage2", "embed3", "stage3", "embed4", "stage4")


@dataclass(frozen=True)
class PatternSpec:
    """Eight C/T slots: embed1, stage1, ..., embed4, stage4."""

    slots: tuple

    def embed(self, i: int) -> str:
        return self.slots[2 * i]

    def stage(self, i: int) -> str:
        return self.slots[2 * i + 1]

    @property
    def has_attention(self) -> bool:
        return any(self.stage(i) == "T" for i in range(4))

    def __str__(self):
        return "-".join(self.slots)


CANONICAL_PATTERN = "C-T-C-T-C-T-C-T"


def parse_pattern(s: str) -> PatternSpec:
    """Parse ``"X-X-X-X-X-X-X-X"`` with ``X`` in {C, T}."""
    if not isinstance(s, str):
        raise PatternParseError(f"pattern must be a string, got {type(s).__name__}", 1)
    tokens = s.strip().split("-")
    for i, tok in enumerate(tokens[:8]):
        if tok not in ("C", "T"):
            raise PatternParseError(f"slot {i + 1} ({SLOT_NAMES[i]}) has symbol {tok!r}; expected 'C' or 'T'", i + 1)
    if len(tokens) != 8:
        pos = len(tokens) + 1 if len(tokens) < 8 else 9
        raise PatternParseError(f"pattern needs exactly 8 slots, got {len(tokens)}", pos)
    return PatternSpec(tuple(tokens))


def all_patterns():
    """All 256 patterns in lexicographic C<T order."""
    for bits in range(256):
        yield parse_pattern("-".join("T" if bits >> (7 - k) & 1 else "C" for k in range(8)))


@dataclass
class ModelConfig:
    """Everything needed to build a model.

    ``depths`` counts attention layers per stage (a LEWin block is two of
    them: a regular-window half and a shifted-window half). ``block`` picks
    ``"lewin"`` (conv projection before every attention half) or ``"swin"``
    (plain shifted-window blocks). Heads per stage are ``C_stage // head_dim``.
    """

    dim: int = 64
    depths: tuple = (2, 2, 18, 2)
    ce_layers: tuple = (5, 5, 5, 5)
    window: int = 7
    mlp_ratio: float = 4.0
    head_dim: int = 32
    pattern: str = CANONICAL_PATTERN
    num_classes: int = 1000
    input_size: int = 224
    block: str = "lewin"
    proj_pointwise: bool = False
    se: bool = False
    stem_expand: tuple = DEFAULT_STEM_EXPAND
    ce_expand: tuple = (1, 1)
    stage_conv_expand: int = 2

    def __post_init__(self):
        self.depths = tuple(int(d) for d in self.depths)
        self.ce_layers = tuple(int(k) for k in self.ce_layers)
        self.stem_expand = tuple(int(e) for e in self.stem_expand)
        self.ce_expand = tuple(int(e) for e in self.ce_expand)
        self.validate()

    @property
    def pattern_spec(self) -> PatternSpec:
        return parse_pattern(self.pattern)

    def stage_dims(self):
        return [self.dim * 2 ** i for i in range(4)]

    def validate(self):
        spec = self.pattern_spec
        if len(self.depths) != 4 or min(self.depths) < 1:
            raise ConfigurationError(f"depths must be 4 integers >= 1, got {self.depths}")
        if len(self.ce_layers) != 4 or min(self.ce_layers) < 1:
            raise ConfigurationError(f"ce_layers must be 4 integers >= 1, got {self.ce_layers}")
        if spec.embed(0) == "C" and self.ce_layers[0] < 3:
            raise ConfigurationError("the convolutional stem needs ce_layers[0] >= 3")
        if self.dim < 2 or self.dim % 2:
            raise ConfigurationError(f"dim must be a positive even integer, got {self.dim}")
        if spec.has_attention and self.dim % self.head_dim:
            raise ConfigurationError(f"dim={self.dim} must be divisible by head_dim={self.head_dim}")
        if self.window < 1 or self.mlp_ratio <= 0 or self.num_classes < 1:
            raise ConfigurationError("window, mlp_ratio and num_classes must be positive")
        if self.block not in ("lewin", "swin"):
            raise ConfigurationError(f"block must be 'lewin' or 'swin', got {self.block!r}")
        for e in self.stem_expand + self.ce_expand + (self.stage_conv_expand,):
            if e not in (1, 2):
                raise ConfigurationError(f"expand ratios must be 1 or 2, got {e}")
        if len(self.stem_expand) != 4 or len(self.ce_expand) != 2:
            raise ConfigurationError("stem_expand needs 4 entries and ce_expand 2")
        if self.input_size % 32:
            raise ConfigurationError(f"input_size must be a multiple of 32, got {self.input_size}")

    # -- JSON -------------------------------------------------------------------
    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {unknown}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        d = json.loads(text)
        if not isinstance(d, dict):
            raise ConfigurationError("model config must be a JSON object")
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls.from_json(Path(path).read_text())

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


# ----------------------------------------------------------------------------
# presets
# ----------------------------------------------------------------------------

def cetnet_t(**kw) -> ModelConfig:
    return ModelConfig(dim=64, depths=(2, 2, 18, 2), **kw)


def cetnet_s(**kw) -> ModelConfig:
    """Calibrated to the published 34M / 6.8G budget; the depths are not published."""
    return ModelConfig(dim=64, depths=(2, 4, 32, 2), **kw)


def cetnet_b(**kw) -> ModelConfig:
    """Calibrated to the published 75M / 15.1G budget; the depths are not published."""
    return ModelConfig(dim=96, depths=(2, 4, 30, 2), **kw)


def ce_swin(dim, depths, ce=5, **kw) -> ModelConfig:
    return ModelConfig(dim=dim, depths=depths, ce_layers=(5, ce, ce, ce), block="swin", **kw)


def ce_swin_t(**kw):
    return ce_swin(96, (2, 2, 4, 2), **kw)


def ce_swin_s(**kw):
    return ce_swin(96, (2, 2, 16, 2), **kw)


def ce_swin_b(**kw):
    return ce_swin(128, (2, 2, 16, 2), **kw)


def swin_t_ce_host(ce_layers: int, **kw) -> ModelConfig:
    """Swin-T ([2,2,6,2], D=96) with its patch embedding/merging replaced by CE."""
    return ce_swin(96, (2, 2, 6, 2), ce=ce_layers, **kw)


def swin_t(**kw) -> ModelConfig:
    """Reference Swin-T: patchify + patch merging + plain window blocks."""
    return ModelConfig(dim=96, depths=(2, 2, 6, 2), block="swin", pattern="T-T-T-T-T-T-T-T", **kw)


def tiny(**kw) -> ModelConfig:
    base = dict(dim=32, depths=(1, 1, 1, 1), num_classes=10, input_size=32)
    base.update(kw)
    return ModelConfig(**base)


PRESETS = {
    "cetnet-t": cetnet_t, "cetnet-s": cetnet_s, "cetnet-b": cetnet_b,
    "ce-swin-t": ce_swin_t, "ce-swin-s": ce_swin_s, "ce-swin-b": ce_swin_b,
    "swin-t": swin_t, "tiny": tiny,
}


# ----------------------------------------------------------------------------
# network
# ----------------------------------------------------------------------------

class TransformerStage(Module):
    """``depth`` window half-blocks alternating regular / shifted windows."""

    def __init__(self, dim, depth, heads, window, mlp_ratio, projection, rng=None):
        super().__init__()
        self.dim = dim
        self.blocks = Sequential(*[WindowBlock(dim, heads, window, i % 2 == 1, mlp_ratio, projection, rng=rng)
                                   for i in range(depth)])

    def forward(self, x):
        n, c, h, w = x.shape
        z = ops.reshape(ops.permute(x, (0, 2, 3, 1)), (n, h * w, c))
        for blk in self.blocks:
            z = blk(z, h, w)
        return ops.permute(ops.reshape(z, (n, h, w, c)), (0, 3, 1, 2))

    def cost(self, shape):
        return shape, sum(blk.cost(shape)[1] for blk in self.blocks)


class ConvStage(Module):
    """``depth`` shape-preserving MBConv blocks."""

    def __init__(self, dim, depth, expand, act="silu", se=False, rng=None):
        super().__init__()
        spec = BlockSpec(BlockKind.MBCONV, dim, dim, 1, expand, se=se)
        self.blocks = Sequential(*[MBConv(spec, act, rng) for _ in range(depth)])

    def forward(self, x):
        return self.blocks(x)

    def cost(self, shape):
        return shape, sum(blk.cost(shape)[1] for blk in self.blocks)


class Head(Module):
    """Global average pool -> LayerNorm -> linear classifier."""

    def __init__(self, dim, num_classes, rng=None):
        super().__init__()
        self.norm = LayerNorm(dim)
        self.fc = Linear(dim, num_classes, rng=rng)

    def forward(self, x):
        return self.fc(self.norm(ops.mean(x, axis=(2, 3))))

    def cost(self, shape):
        return (self.fc.out_features, 1, 1), self.fc.macs(1)


class Model(Module):
    """Four (embedding, stage) pairs realised per the C/T pattern, then a head."""

    def __init__(self, cfg: ModelConfig, rng=None):
        super().__init__()
        object.__setattr__(self, "cfg", cfg)
        spec = cfg.pattern_spec
        dims = cfg.stage_dims()
        projection = None
        if cfg.block == "lewin":
            projection = "dwsep" if cfg.proj_pointwise else "dw"
        for i in range(4):
            c = dims[i]
            if i == 0:
                embed = (ConvStem(cfg.dim, cfg.ce_layers[0], cfg.stem_expand, se=cfg.se, rng=rng)
                         if spec.embed(0) == "C" else PatchEmbed(cfg.dim, rng=rng))
            else:
                embed = (ConvEmbed(dims[i - 1], cfg.ce_layers[i], *cfg.ce_expand, se=cfg.se, rng=rng)
                         if spec.embed(i) == "C" else PatchMerging(dims[i - 1], rng=rng))
            if spec.stage(i) == "T":
                stage = TransformerStage(c, cfg.depths[i], c // cfg.head_dim, cfg.window, cfg.mlp_ratio,
                                         projection, rng=rng)
            else:
                stage = ConvStage(c, cfg.depths[i], cfg.stage_conv_expand, se=cfg.se, rng=rng)
            setattr(self, f"embed{i + 1}", embed)
            setattr(self, f"stage{i + 1}", stage)
        self.head = Head(dims[3], cfg.num_classes, rng=rng)

    def parts(self):
        """(name, module) in execution order."""
        out = []
        for i in range(1, 5):
            out.append((f"embed{i}", getattr(self, f"embed{i}")))
            out.append((f"stage{i}", getattr(self, f"stage{i}")))
        out.append(("head", self.head))
        return out

    def _check_input(self, x: Tensor):
        if x.ndim != 4 or x.shape[1] != 3:
            raise DimensionError(f"model input must be (N, 3, H, W), got {x.shape}")
        if x.shape[2] % 32 or x.shape[3] % 32:
            raise DimensionError(f"input size {x.shape[2]}x{x.shape[3]} is not divisible by the total stride 32")

    def forward_features(self, x: Tensor):
        """Return the four stage outputs (NCHW)."""
        self._check_input(x)
        feats = []
        for i in range(1, 5):
            x = getattr(self, f"embed{i}")(x)
            x = getattr(self, f"stage{i}")(x)
            feats.append(x)
        return feats

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.forward_features(x)[-1])

    def cost(self, h: int, w: int):
        """Per-part ``(name, out_shape, macs)`` for an ``h`` x ``w`` input."""
        shape = (3, h, w)
        rows = []
        for name, part in self.parts():
            shape, macs = part.cost(shape)
            rows.append((name, shape, macs))
        return rows


def build_model(cfg: ModelConfig, seed: int | None = 0) -> Model:
    """Instantiate ``cfg``. ``seed=None`` skips random init (weights are zero-filled)."""
    cfg.validate()
    rng = None if seed is None else np.random.default_rng(seed)
    return Model(cfg, rng=rng)


def forward(model: Model, batch: Tensor) -> Tensor:
    return model(batch)
