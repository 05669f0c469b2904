import numpy as np
import pytest

from cetnet import ops
from cetnet.analysis import count_params, grad_check
from cetnet.attention import (MASK_VALUE, LEWinBlock, Mlp, WindowAttention, WindowBlock, WindowGrid,
                              build_shift_mask, relative_position_index, window_msa, window_partition,
                              window_reverse)
from cetnet.blocks import BlockKind, BlockSpec, DWSepConv, FusedMBConv, MBConv, build_block
from cetnet.errors import ConfigurationError, DimensionError
from cetnet.tensor import Tensor

RNG = np.random.default_rng


def _zero_weights(module):
    for name, p in module.named_parameters():
        if not name.endswith("weight") or p.ndim > 1:
            p.data[...] = 0.0


# -- specs & conv blocks ----------------------------------------------------------

def test_blockspec_rules():
    assert BlockSpec(BlockKind.MBCONV, 8, 8, 1, 2).residual
    assert not BlockSpec(BlockKind.MBCONV, 8, 16, 1, 2).residual
    assert not BlockSpec(BlockKind.MBCONV, 8, 8, 2, 2).residual
    with pytest.raises(ConfigurationError):
        BlockSpec(BlockKind.MBCONV, 8, 8, 1, 4)
    with pytest.raises(ConfigurationError):
        BlockSpec(BlockKind.MBCONV, 8, 8, 3, 1)


@pytest.mark.parametrize("kind,expand", [(BlockKind.MBCONV, 2), (BlockKind.MBCONV, 1),
                                         (BlockKind.FUSED_MBCONV, 1), (BlockKind.FUSED_MBCONV, 2)])
def test_zero_branch_is_pure_residual(kind, expand):
    blk = build_block(BlockSpec(kind, 8, 8, 1, expand), rng=RNG(0))
    _zero_weights(blk)
    x = Tensor(RNG(1).standard_normal((2, 8, 5, 5)))
    np.testing.assert_array_equal(blk(x).data, x.data)
    delta = RNG(2).standard_normal(x.shape)
    np.testing.assert_allclose(blk(Tensor(x.data + delta)).data - blk(x).data, delta, atol=1e-12)


def test_no_skip_when_shapes_change():
    blk = MBConv(BlockSpec(BlockKind.MBCONV, 8, 16, 2, 2), rng=RNG(0))
    _zero_weights(blk)
    a = blk(Tensor(RNG(1).standard_normal((1, 8, 6, 6)))).data
    b = blk(Tensor(RNG(2).standard_normal((1, 8, 6, 6)))).data
    np.testing.assert_array_equal(a, b)


def test_block_shapes():
    mb = MBConv(BlockSpec(BlockKind.MBCONV, 8, 16, 2, 2), rng=RNG(0))
    assert mb(Tensor(np.zeros((1, 8, 14, 14)))).shape == (1, 16, 7, 7)
    d = 64
    fm = FusedMBConv(BlockSpec(BlockKind.FUSED_MBCONV, 3, d // 2, 2, 1), rng=RNG(0))
    assert fm(Tensor(np.zeros((1, 3, 224, 224), dtype=np.float32))).shape == (1, d // 2, 112, 112)
    with pytest.raises(DimensionError):
        mb(Tensor(np.zeros((1, 4, 14, 14))))


def test_mbconv_param_tally():
    blk = MBConv(BlockSpec(BlockKind.MBCONV, 64, 64, 1, 2), rng=None)
    convs = 64 * 128 + 128 * 9 + 128 * 64
    norms = 2 * (128 + 128 + 64)
    assert convs == 17536
    assert count_params(blk) == convs + norms == 18176


def test_dwsep_identity_and_oracle():
    ds = DWSepConv(4, rng=RNG(0))
    x = Tensor(RNG(1).standard_normal((1, 4, 7, 7)))
    out = ds.forward_map(x)
    assert out.shape == (1, 4, 7, 7)
    ref = ops.conv2d(ops.conv2d(x, ds.depthwise.weight, ds.depthwise.bias, 1, 1, 4),
                     ds.pointwise.weight, ds.pointwise.bias)
    assert np.max(np.abs(out.data - ref.data)) <= 1e-6
    ds.identity_init()
    np.testing.assert_array_equal(ds.forward_map(x).data, x.data)
    tokens = Tensor(RNG(2).standard_normal((1, 49, 4)))
    np.testing.assert_array_equal(ds(tokens, 7, 7).data, tokens.data)
    with pytest.raises(DimensionError):
        ds(tokens, 6, 7)


@pytest.mark.parametrize("c", [4, 8])
@pytest.mark.parametrize("make", [
    lambda c: MBConv(BlockSpec(BlockKind.MBCONV, c, c, 1, 2), rng=RNG(3)),
    lambda c: FusedMBConv(BlockSpec(BlockKind.FUSED_MBCONV, c, c, 1, 2), rng=RNG(3)),
    lambda c: MBConv(BlockSpec(BlockKind.MBCONV, c, 2 * c, 2, 1), rng=RNG(3)),
], ids=["mbconv", "fused", "mbconv_s2"])
def test_blocks_gradcheck_7x7(make, c):
    assert grad_check(make(c), [(1, c, 7, 7)], seed=1, max_checks=40) <= 1e-4


# -- window geometry ------------------------------------------------------------------

def test_partition_examples():
    x = Tensor(RNG(0).standard_normal((2, 3, 8, 8)))
    assert window_partition(x, 4).shape == (8, 16, 3)
    single = window_partition(x, 8)
    np.testing.assert_array_equal(single.data[0], x.data[0].reshape(3, 64).T)
    np.testing.assert_array_equal(window_reverse(window_partition(x, 4), 4, 8, 8).data, x.data)
    with pytest.raises(DimensionError, match="height"):
        window_partition(Tensor(np.zeros((1, 1, 6, 8))), 4)


def test_grid_clamp_and_padding():
    g = WindowGrid.for_map(7, 7, 7, True)
    assert (g.M, g.shift) == (7, 0)
    g = WindowGrid.for_map(4, 9, 7, True)
    assert (g.M, g.shift) == (4, 0) and g.padded and g.Wp == 12
    g = WindowGrid.for_map(56, 56, 7, True)
    assert (g.shift, g.windows) == (3, 64)


def test_mask_zero_when_unshifted_and_symmetric():
    assert not build_shift_mask(WindowGrid(8, 8, 4, 0)).any()
    mask = build_shift_mask(WindowGrid(8, 8, 4, 2))
    np.testing.assert_array_equal(mask, mask.transpose(0, 2, 1))
    assert set(np.unique(mask)) <= {0.0, MASK_VALUE}


def _wrap_regions(h, w, m, s):
    """Oracle: a shifted-frame position belongs to the region given by whether its roll wrapped."""
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return (ys + s >= h).astype(int) * 2 + (xs + s >= w).astype(int)


def test_single_window_mask_region_count():
    m = 4
    mask = build_shift_mask(WindowGrid(m, m, m, m // 2))[0]
    labels = _wrap_regions(m, m, m, m // 2).reshape(-1)
    groups = np.bincount(labels)
    assert len(groups[groups > 0]) == 4
    assert np.count_nonzero(mask == 0) == int(np.sum(groups ** 2))


def test_relative_position_index_range():
    idx = relative_position_index(7)
    assert idx.shape == (49, 49) and idx.min() == 0 and idx.max() == 168
    assert np.all(np.diag(idx) == 84)
    small = relative_position_index(3, 7)
    assert small.shape == (9, 9) and np.all(np.diag(small) == 84)


# -- attention ---------------------------------------------------------------------------

def _brute_attention(attn, tokens, h, w, shift):
    """Per-token attention over tokens in the same shifted window and the same wrap region."""
    x = tokens.astype(np.float64)
    n, L, c = x.shape
    m, heads = attn.window, attn.heads
    d = c // heads
    wq = attn.qkv.weight.data.astype(np.float64)
    bq = attn.qkv.bias.data.astype(np.float64)
    table = attn.relative_position_bias_table.data.astype(np.float64)
    qkv = x @ wq.T + bq
    q, k, v = qkv[..., :c] * d ** -0.5, qkv[..., c:2 * c], qkv[..., 2 * c:]
    ys, xs = np.divmod(np.arange(L), w)
    yp, xp = (ys - shift) % h, (xs - shift) % w  # position in the shifted frame
    win = (yp // m) * (w // m) + xp // m
    region = (yp + shift >= h) * 2 + (xp + shift >= w)
    out = np.zeros_like(x)
    for b in range(n):
        for i in range(L):
            js = [j for j in range(L) if win[j] == win[i] and region[j] == region[i]]
            for hd in range(heads):
                sl = slice(hd * d, (hd + 1) * d)
                logits = []
                for j in js:
                    dy, dx = yp[i] % m - yp[j] % m + m - 1, xp[i] % m - xp[j] % m + m - 1
                    logits.append(q[b, i, sl] @ k[b, j, sl] + table[dy * (2 * m - 1) + dx, hd])
                e = np.exp(np.array(logits) - max(logits))
                p = e / e.sum()
                out[b, i, sl] = sum(pj * v[b, j, sl] for pj, j in zip(p, js))
    return out @ attn.proj.weight.data.T.astype(np.float64) + attn.proj.bias.data


@pytest.mark.parametrize("shifted", [False, True])
def test_window_attention_matches_brute_force(shifted):
    blk = WindowBlock(8, 2, 4, shifted=shifted, rng=RNG(0)).to(np.float64)
    blk.attn.relative_position_bias_table.data[...] = RNG(1).standard_normal((49, 2))
    tokens = RNG(2).standard_normal((2, 64, 8))
    got = blk.attend(Tensor(tokens), 8, 8).data
    ref = _brute_attention(blk.attn, tokens, 8, 8, 2 if shifted else 0)
    assert np.max(np.abs(got - ref)) <= 1e-6
    rows = blk.attn.last_attn.sum(-1)
    assert np.max(np.abs(rows - 1)) <= 1e-6


def test_single_token_window():
    attn = WindowAttention(4, 1, 1, rel_bias=False, rng=RNG(0)).to(np.float64)
    x = Tensor(RNG(1).standard_normal((3, 1, 4)))
    v = ops.linear(x, attn.qkv.weight, attn.qkv.bias).data[..., 8:]
    ref = v @ attn.proj.weight.data.T + attn.proj.bias.data
    np.testing.assert_allclose(window_msa(x, attn).data, ref, atol=1e-12)


def test_two_by_two_window_oracle_and_logit_shift():
    attn = WindowAttention(4, 1, 2, rel_bias=True, rng=RNG(0)).to(np.float64)
    x = RNG(1).standard_normal((1, 4, 4))
    got = attn(Tensor(x)).data
    assert np.max(np.abs(got - _brute_attention(attn, x, 2, 2, 0))) <= 1e-6
    # the same constant on every logit is absorbed by the softmax
    np.testing.assert_allclose(attn(Tensor(x), np.full((1, 4, 4), 5.0)).data, got, atol=1e-12)


def test_heads_must_divide():
    with pytest.raises(ConfigurationError):
        WindowAttention(10, 3, 2)


def test_mlp_examples():
    mlp = Mlp(4, 1.0, rng=None)
    x = Tensor(RNG(0).standard_normal((2, 4)))
    assert np.all(mlp(x).data == 0)
    mlp.fc1.weight.data[...] = np.eye(4)
    mlp.fc2.weight.data[...] = np.eye(4)
    np.testing.assert_allclose(mlp(x).data, ops.gelu(x).data, atol=1e-7)


# -- LEWin -------------------------------------------------------------------------------

def _plain_twin(lewin_half: WindowBlock, shifted):
    ref = WindowBlock(lewin_half.dim, lewin_half.attn.heads, lewin_half.window, shifted, rng=None)
    state = {k: v for k, v in lewin_half.state_dict().items() if not k.startswith("proj.")}
    ref.load_state_dict(state)
    return ref


@pytest.mark.parametrize("projection", ["dw", "dwsep"])
def test_lewin_identity_projection_equals_plain_blocks(projection):
    blk = LEWinBlock(16, 2, 4, projection=projection, rng=RNG(0)).to(np.float64)
    blk.w_msa.proj.identity_init()
    blk.sw_msa.proj.identity_init()
    ref_w, ref_sw = _plain_twin(blk.w_msa, False), _plain_twin(blk.sw_msa, True)
    z = Tensor(RNG(1).standard_normal((2, 64, 16)))
    got = blk(z, 8, 8).data
    ref = ref_sw(ref_w(z, 8, 8), 8, 8).data
    assert np.max(np.abs(got - ref)) <= 1e-6


def test_lewin_all_residual_and_shapes():
    blk = LEWinBlock(96, 3, 7, projection="dwsep", rng=RNG(0))
    z = Tensor(RNG(1).standard_normal((1, 49, 96)).astype(np.float32))
    assert blk(z, 7, 7).shape == (1, 49, 96)
    for half in (blk.w_msa, blk.sw_msa):
        half.proj.identity_init()
        for lin in (half.attn.qkv, half.attn.proj, half.mlp.fc1, half.mlp.fc2):
            lin.weight.data[...] = 0
            lin.bias.data[...] = 0
    np.testing.assert_allclose(blk(z, 7, 7).data, z.data, atol=1e-6)
    with pytest.raises(DimensionError):
        blk(z, 6, 7)


def test_lewin_projections_are_independent():
    blk = LEWinBlock(8, 1, 2, rng=RNG(0))
    assert blk.w_msa.proj.depthwise.weight is not blk.sw_msa.proj.depthwise.weight
    assert not np.array_equal(blk.w_msa.proj.depthwise.weight.data, blk.sw_msa.proj.depthwise.weight.data)


def test_padded_grid_forward():
    blk = WindowBlock(8, 1, 4, shifted=True, projection="dw", rng=RNG(0))
    z = Tensor(RNG(1).standard_normal((1, 30, 8)).astype(np.float32))
    assert blk(z, 5, 6).shape == (1, 30, 8)
