"""Window self-attention (W-MSA / SW-MSA) and the locally enhanced window block.

Token tensors are laid out ``(N, H*W, C)`` in row-major spatial order. Window
tensors are ``(N * num_windows, M*M, C)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import ops
from .blocks import DWSepConv
from .errors import ConfigurationError, DimensionError
from .nn import LayerNorm, Linear, Module, parameter, trunc_normal
from .tensor import Tensor

MASK_VALUE = -100.0


@dataclass(frozen=True)
class WindowGrid:
    """Geometry of one (shifted) window partition.

    ``H``/``W`` are the feature-map size; the map is zero-padded on the
    right/bottom to ``Hp``/``Wp`` (multiples of ``M``) before partitioning.
    """

    H: int
    W: int
    M: int
    shift: int = 0

    def __post_init__(self):
        if self.M < 1:
            raise ConfigurationError(f"window size must be positive, got {self.M}")
        if self.shift not in (0, self.M // 2):
            raise ConfigurationError(f"shift must be 0 or {self.M // 2}, got {self.shift}")

    @classmethod
    def for_map(cls, h: int, w: int, window: int, shifted: bool) -> "WindowGrid":
        """Clamp the window to the map when the map is not larger than it.

        A map no larger than the window is covered by a single window, so
        shifting would be a no-op and is disabled.
        """
        if min(h, w) <= window:
            m = min(h, w)
            return cls(h, w, m, 0)
        return cls(h, w, window, window // 2 if shifted else 0)

    @property
    def Hp(self) -> int:
        return -(-self.H // self.M) * self.M

    @property
    def Wp(self) -> int:
        return -(-self.W // self.M) * self.M

    @property
    def windows(self) -> int:
        return (self.Hp // self.M) * (self.Wp // self.M)

    @property
    def padded(self) -> bool:
        return self.Hp != self.H or self.Wp != self.W


# ----------------------------------------------------------------------------
# partition / reverse
# ----------------------------------------------------------------------------

def _partition_nhwc(x: Tensor, m: int) -> Tensor:
    n, h, w, c = x.shape
    x = ops.reshape(x, (n, h // m, m, w // m, m, c))
    x = ops.permute(x, (0, 1, 3, 2, 4, 5))
    return ops.reshape(x, (n * (h // m) * (w // m), m * m, c))


def _reverse_nhwc(xw: Tensor, m: int, h: int, w: int) -> Tensor:
    c = xw.shape[-1]
    n = xw.shape[0] // ((h // m) * (w // m))
    x = ops.reshape(xw, (n, h // m, w // m, m, m, c))
    x = ops.permute(x, (0, 1, 3, 2, 4, 5))
    return ops.reshape(x, (n, h, w, c))


def window_partition(x: Tensor, m: int, channels_last: bool = False) -> Tensor:
    """Tile an ``(N, C, H, W)`` map into ``(N*windows, M*M, C)`` windows.

    H and W must be divisible by ``m``.
    """
    if x.ndim != 4:
        raise DimensionError(f"window_partition: expected a 4-D map, got {x.shape}")
    if not channels_last:
        x = ops.permute(x, (0, 2, 3, 1))
    _, h, w, _ = x.shape
    if h % m:
        raise DimensionError(f"window_partition: height axis {h} is not divisible by window {m}")
    if w % m:
        raise DimensionError(f"window_partition: width axis {w} is not divisible by window {m}")
    return _partition_nhwc(x, m)


def window_reverse(xw: Tensor, m: int, h: int, w: int, channels_last: bool = False) -> Tensor:
    """Inverse of :func:`window_partition`."""
    if h % m or w % m:
        raise DimensionError(f"window_reverse: map {h}x{w} is not divisible by window {m}")
    x = _reverse_nhwc(xw, m, h, w)
    return x if channels_last else ops.permute(x, (0, 3, 1, 2))


# ----------------------------------------------------------------------------
# masks and relative position bias
# ----------------------------------------------------------------------------

def region_labels(grid: WindowGrid) -> np.ndarray:
    """Integer label per padded map position identifying its pre-shift region."""
    labels = np.zeros((grid.Hp, grid.Wp), dtype=np.int64)
    if grid.shift == 0:
        return labels
    m, s = grid.M, grid.shift
    cuts_h = (slice(0, grid.Hp - m), slice(grid.Hp - m, grid.Hp - s), slice(grid.Hp - s, None))
    cuts_w = (slice(0, grid.Wp - m), slice(grid.Wp - m, grid.Wp - s), slice(grid.Wp - s, None))
    label = 0
    for hs in cuts_h:
        for ws in cuts_w:
            labels[hs, ws] = label
            label += 1
    return labels


def build_shift_mask(grid: WindowGrid) -> np.ndarray:
    """Additive attention mask of shape ``(windows, M*M, M*M)``.

    Token pairs that come from different regions of the unshifted map get
    ``-100``; all others get 0. The mask is all-zero when ``shift == 0``.
    """
    n = grid.M * grid.M
    if grid.shift == 0:
        return np.zeros((grid.windows, n, n), dtype=np.float32)
    lab = region_labels(grid)
    m = grid.M
    win = lab.reshape(grid.Hp // m, m, grid.Wp // m, m).transpose(0, 2, 1, 3).reshape(-1, n)
    mask = np.where(win[:, :, None] != win[:, None, :], MASK_VALUE, 0.0)
    return mask.astype(np.float32)


@lru_cache(maxsize=None)
def relative_position_index(m: int, table_window: int | None = None) -> np.ndarray:
    """Index map ``(M*M, M*M)`` into a ``((2T-1)**2, heads)`` bias table.

    ``table_window`` (T) defaults to ``m``; a smaller effective window reads
    the centre of a larger table.
    """
    t = m if table_window is None else table_window
    if m > t:
        raise ConfigurationError(f"window {m} exceeds bias table window {t}")
    coords = np.stack(np.meshgrid(np.arange(m), np.arange(m), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (t - 1)
    idx = rel[0] * (2 * t - 1) + rel[1]
    idx.setflags(write=False)
    return idx


# ----------------------------------------------------------------------------
# attention
# ----------------------------------------------------------------------------

class WindowAttention(Module):
    """Multi-head self-attention inside each window with relative position bias."""

    def __init__(self, dim: int, heads: int, window: int, rel_bias: bool = True, rng=None):
        super().__init__()
        if heads < 1 or dim % heads:
            raise ConfigurationError(f"heads={heads} must divide channel dim {dim}")
        self.dim, self.heads, self.window = dim, heads, window
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        self.qkv = Linear(dim, 3 * dim, rng=rng)
        self.proj = Linear(dim, dim, rng=rng)
        self.relative_position_bias_table = (
            parameter(trunc_normal(rng, ((2 * window - 1) ** 2, heads))) if rel_bias else None)
        object.__setattr__(self, "last_attn", None)

    def forward(self, xw: Tensor, mask: np.ndarray | None = None) -> Tensor:
        bw, length, c = xw.shape
        if c != self.dim:
            raise DimensionError(f"WindowAttention: channel axis {c} != {self.dim}")
        m = int(round(length ** 0.5))
        h, d = self.heads, self.head_dim
        qkv = ops.permute(ops.reshape(self.qkv(xw), (bw, length, 3, h, d)), (2, 0, 3, 1, 4))
        q = ops.mul(qkv[0], self.scale)
        k, v = qkv[1], qkv[2]
        attn = ops.matmul(q, ops.permute(k, (0, 1, 3, 2)))
        if self.relative_position_bias_table is not None:
            idx = relative_position_index(m, self.window).reshape(-1)
            bias = ops.gather_rows(self.relative_position_bias_table, idx)
            bias = ops.permute(ops.reshape(bias, (length, length, h)), (2, 0, 1))
            attn = ops.add(attn, ops.broadcast_to(bias, attn.shape))
        if mask is not None:
            nw = mask.shape[0]
            shape5 = (bw // nw, nw, h, length, length)
            mt = Tensor(mask[:, None].astype(attn.dtype))
            attn = ops.reshape(ops.add(ops.reshape(attn, shape5), ops.broadcast_to(mt, shape5)), attn.shape)
        attn = ops.softmax(attn, axis=-1)
        object.__setattr__(self, "last_attn", attn.data)
        out = ops.matmul(attn, v)
        out = ops.reshape(ops.permute(out, (0, 2, 1, 3)), (bw, length, c))
        return self.proj(out)

    def macs(self, windows: int, length: int) -> int:
        tokens = windows * length
        return (self.qkv.macs(tokens) + self.proj.macs(tokens)
                + 2 * windows * length * length * self.dim)


def window_msa(x_windows: Tensor, attn: WindowAttention, mask: np.ndarray | None = None) -> Tensor:
    """Functional entry point: ``attn`` holds the projection parameters and head count."""
    return attn(x_windows, mask)


class Mlp(Module):
    """linear(C -> rC) -> GELU -> linear(rC -> C)."""

    def __init__(self, dim: int, ratio: float = 4.0, act: str = "gelu", rng=None):
        super().__init__()
        hidden = int(dim * ratio)
        self.act = act
        self.fc1 = Linear(dim, hidden, rng=rng)
        self.fc2 = Linear(hidden, dim, rng=rng)

    def forward(self, x):
        return self.fc2(ops.activation(self.fc1(x), self.act))

    def macs(self, tokens):
        return self.fc1.macs(tokens) + self.fc2.macs(tokens)


class WindowBlock(Module):
    """One transformer half-block over windows, optionally with a conv projection.

    ``projection`` is ``None`` for a plain shifted-window block, or ``"dw"`` /
    ``"dwsep"`` for the locally enhanced variant, where tokens first pass
    through a 3x3 depthwise (+ pointwise) conv and both residuals use the
    projected tokens::

        x  = proj(z)
        z' = MSA(LN(x)) + x
        z  = MLP(LN(z')) + z'
    """

    def __init__(self, dim, heads, window=7, shifted=False, mlp_ratio=4.0, projection=None,
                 rel_bias=True, rng=None):
        super().__init__()
        self.dim, self.window, self.shifted = dim, window, shifted
        if projection not in (None, "dw", "dwsep"):
            raise ConfigurationError(f"unknown projection {projection!r}")
        self.proj = DWSepConv(dim, pointwise=projection == "dwsep", rng=rng) if projection else None
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, window, rel_bias=rel_bias, rng=rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio, rng=rng)

    def grid(self, h, w) -> WindowGrid:
        return WindowGrid.for_map(h, w, self.window, self.shifted)

    def attend(self, y: Tensor, h: int, w: int) -> Tensor:
        """Windowed attention over normalised tokens ``y`` (N, H*W, C)."""
        n, _, c = y.shape
        g = self.grid(h, w)
        y = ops.reshape(y, (n, h, w, c))
        if g.padded:
            y = ops.pad(y, ((0, 0), (0, g.Hp - h), (0, g.Wp - w), (0, 0)))
        if g.shift:
            y = ops.cyclic_shift(y, -g.shift, -g.shift, axes=(1, 2))
        yw = _partition_nhwc(y, g.M)
        mask = _cached_mask(g) if g.shift else None
        yw = self.attn(yw, mask)
        y = _reverse_nhwc(yw, g.M, g.Hp, g.Wp)
        if g.shift:
            y = ops.cyclic_shift(y, g.shift, g.shift, axes=(1, 2))
        if g.padded:
            y = y[:, :h, :w, :]
        return ops.reshape(y, (n, h * w, c))

    def forward(self, z: Tensor, h: int, w: int) -> Tensor:
        if z.ndim != 3 or z.shape[1] != h * w:
            raise DimensionError(f"WindowBlock: token tensor {z.shape} does not match grid {h}x{w}")
        x = self.proj(z, h, w) if self.proj is not None else z
        zh = ops.add(self.attend(self.norm1(x), h, w), x)
        return ops.add(self.mlp(self.norm2(zh)), zh)

    def cost(self, shape):
        c, h, w = shape
        g = self.grid(h, w)
        macs = 0
        if self.proj is not None:
            macs += self.proj.cost(shape)[1]
        macs += self.attn.macs(g.windows, g.M * g.M)
        macs += self.mlp.macs(h * w)
        return shape, macs


@lru_cache(maxsize=64)
def _cached_mask(grid: WindowGrid) -> np.ndarray:
    return build_shift_mask(grid)


class LEWinBlock(Module):
    """Regular-window half followed by shifted-window half, each with its own projection."""

    def __init__(self, dim, heads, window=7, mlp_ratio=4.0, projection="dw", rng=None):
        super().__init__()
        self.w_msa = WindowBlock(dim, heads, window, False, mlp_ratio, projection, rng=rng)
        self.sw_msa = WindowBlock(dim, heads, window, True, mlp_ratio, projection, rng=rng)

    def forward(self, z, h, w):
        return self.sw_msa(self.w_msa(z, h, w), h, w)

    def cost(self, shape):
        return shape, self.w_msa.cost(shape)[1] + self.sw_msa.cost(shape)[1]


def lewin_block_forward(z_prev: Tensor, block: LEWinBlock, h: int, w: int) -> Tensor:
    return block(z_prev, h, w)
