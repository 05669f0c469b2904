"""Named finite-difference cases covering every differentiable op and block.

Each case builds a small float64 subgraph. :func:`run_case` returns the
worst relative error reported by :func:`cetnet.analysis.grad_check`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .analysis import grad_check_detail
from .attention import LEWinBlock, WindowBlock
from .blocks import BlockKind, BlockSpec, DWSepConv, FusedMBConv, MBConv
from .embedding import ConvEmbed, ConvStem, PatchEmbed, PatchMerging
from .nn import BatchNorm2d, Conv2d, LayerNorm, Linear, Module, Sequential
from .tensor import Tensor

TOLERANCE = 1e-4


@dataclass
class GradCase:
    fn: Callable
    input_sizes: list
    params: Module | None = None
    max_checks: int | None = None


class _Holder(Module):
    """Owns loose parameter tensors for functional cases."""

    def __init__(self, **tensors):
        super().__init__()
        for k, v in tensors.items():
            setattr(self, k, v)


def _param(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, dtype=np.float64)


def _op_cases():
    rng = np.random.default_rng(11)
    cases = {}
    b = _param(rng, 3, 4)
    hold = _Holder(b=b)
    cases["op.add"] = GradCase(lambda a: ops.add(a, b), [(3, 4)], hold)
    cases["op.sub"] = GradCase(lambda a: ops.sub(b, a), [(3, 4)], hold)
    cases["op.mul"] = GradCase(lambda a: ops.mul(a, b), [(3, 4)], hold)
    cases["op.mul_scalar"] = GradCase(lambda a: ops.mul(a, -2.5), [(3, 4)])
    cases["op.neg"] = GradCase(ops.neg, [(3, 4)])
    cases["op.broadcast_to"] = GradCase(lambda a: ops.broadcast_to(a, (2, 3, 4)), [(3, 1)])
    cases["op.exp"] = GradCase(ops.exp, [(3, 4)])
    cases["op.square"] = GradCase(ops.square, [(3, 4)])
    cases["op.sum"] = GradCase(lambda a: ops.sum(a, axis=1, keepdims=True), [(3, 4, 2)])
    cases["op.mean"] = GradCase(lambda a: ops.mean(a, axis=(0, 2)), [(3, 4, 2)])
    cases["op.reshape"] = GradCase(lambda a: ops.reshape(a, (4, 6)), [(2, 3, 4)])
    cases["op.permute"] = GradCase(lambda a: ops.permute(a, (2, 0, 1)), [(2, 3, 4)])
    cases["op.cyclic_shift"] = GradCase(lambda a: ops.cyclic_shift(a, -1, 2), [(1, 2, 4, 5)])
    cases["op.pad"] = GradCase(lambda a: ops.pad(a, ((0, 0), (0, 0), (1, 2), (0, 1))), [(1, 2, 3, 3)])
    cases["op.getitem"] = GradCase(lambda a: a[:, 1:3, ::2], [(2, 4, 5)])
    cases["op.getitem_fancy"] = GradCase(lambda a: a[np.array([0, 2, 0])], [(3, 4)])
    c2 = _param(rng, 2, 2)
    cases["op.concat"] = GradCase(lambda a: ops.concat([a, c2], axis=1), [(2, 3)], _Holder(c=c2))
    table = _param(rng, 5, 3)
    idx = np.array([[0, 4, 4], [2, 1, 0]])
    cases["op.gather_rows"] = GradCase(lambda a: ops.mul(ops.gather_rows(table, idx), a), [(2, 3, 3)],
                                       _Holder(table=table))
    m = _param(rng, 2, 4, 3)
    cases["op.matmul"] = GradCase(lambda a: ops.matmul(a, m), [(2, 5, 4)], _Holder(m=m))
    w, bias = _param(rng, 5, 4), _param(rng, 5)
    cases["op.linear"] = GradCase(lambda a: ops.linear(a, w, bias), [(2, 3, 4)], _Holder(w=w, b=bias))
    cw, cb = _param(rng, 4, 2, 3, 3), _param(rng, 4)
    cases["op.conv2d"] = GradCase(lambda a: ops.conv2d(a, cw, cb, stride=2, pad=1, groups=2), [(2, 4, 5, 5)],
                                  _Holder(w=cw, b=cb))
    dw = _param(rng, 3, 1, 3, 3)
    cases["op.conv2d_depthwise"] = GradCase(lambda a: ops.conv2d(a, dw, None, 1, 1, groups=3), [(1, 3, 4, 4)],
                                            _Holder(w=dw))
    g, be = _param(rng, 4), _param(rng, 4)
    cases["op.layer_norm"] = GradCase(lambda a: ops.layer_norm(a, g, be), [(2, 3, 4)], _Holder(g=g, b=be))
    bg, bb = _param(rng, 3), _param(rng, 3)
    rm, rv = np.zeros(3), np.ones(3)
    cases["op.batch_norm"] = GradCase(lambda a: ops.batch_norm(a, bg, bb, rm, rv, True), [(2, 3, 3, 3)],
                                      _Holder(g=bg, b=bb))
    cases["op.batch_norm_eval"] = GradCase(lambda a: ops.batch_norm(a, bg, bb, rm + 0.3, rv * 2.0, False),
                                           [(2, 3, 3, 3)], _Holder(g=bg, b=bb))
    cases["op.gelu"] = GradCase(ops.gelu, [(3, 4)])
    cases["op.sigmoid"] = GradCase(ops.sigmoid, [(3, 4)])
    cases["op.silu"] = GradCase(ops.silu, [(3, 4)])
    cases["op.softmax"] = GradCase(lambda a: ops.softmax(a, axis=1), [(2, 5, 3)])
    cases["op.log_softmax"] = GradCase(lambda a: ops.log_softmax(a, axis=-1), [(3, 6)])
    return cases


def _block_cases():
    rng = np.random.default_rng(5)
    cases = {}
    lin = Linear(4, 3, rng=rng)
    cases["linear"] = GradCase(lin, [(2, 4)])
    conv = Conv2d(3, 4, 3, 1, 1, rng=rng)
    cases["conv2d"] = GradCase(conv, [(2, 3, 5, 5)])
    ln = LayerNorm(6)
    cases["layer_norm"] = GradCase(ln, [(2, 6)])
    bn = BatchNorm2d(3)
    cases["batch_norm"] = GradCase(bn, [(4, 3, 2, 2)])
    mb = MBConv(BlockSpec(BlockKind.MBCONV, 4, 4, 1, 2), rng=rng)
    cases["mbconv"] = GradCase(mb, [(2, 4, 5, 5)])
    mbs = MBConv(BlockSpec(BlockKind.MBCONV, 4, 8, 2, 1, se=True), rng=rng)
    cases["mbconv_strided_se"] = GradCase(mbs, [(2, 4, 6, 6)])
    fm = FusedMBConv(BlockSpec(BlockKind.FUSED_MBCONV, 4, 4, 1, 2), rng=rng)
    cases["fused_mbconv"] = GradCase(fm, [(2, 4, 5, 5)])
    fms = FusedMBConv(BlockSpec(BlockKind.FUSED_MBCONV, 3, 6, 2, 1), rng=rng)
    cases["fused_mbconv_strided"] = GradCase(fms, [(2, 3, 6, 6)])
    ds = DWSepConv(4, pointwise=True, rng=rng)
    cases["dwsep"] = GradCase(lambda z: ds(z, 3, 3), [(2, 9, 4)], ds)
    wm = WindowBlock(8, 2, 2, shifted=False, rng=rng)
    cases["w_msa"] = GradCase(lambda z: wm(z, 4, 4), [(1, 16, 8)], wm)
    sw = WindowBlock(8, 2, 2, shifted=True, rng=rng)
    cases["sw_msa"] = GradCase(lambda z: sw(z, 4, 4), [(1, 16, 8)], sw)
    swp = WindowBlock(8, 2, 3, shifted=True, rng=rng)
    cases["sw_msa_padded"] = GradCase(lambda z: swp(z, 4, 5), [(1, 20, 8)], swp)
    lw = LEWinBlock(8, 2, 2, projection="dwsep", rng=rng)
    cases["lewin"] = GradCase(lambda z: lw(z, 4, 4), [(1, 16, 8)], lw)
    lw32 = LEWinBlock(32, 1, 2, rng=rng)
    cases["lewin_c32"] = GradCase(lambda z: lw32(z, 4, 4), [(1, 16, 32)], lw32, max_checks=24)
    pm = PatchMerging(4, rng=rng)
    cases["patch_merging"] = GradCase(pm, [(1, 4, 4, 4)])
    pe = PatchEmbed(8, rng=rng)
    cases["patch_embed"] = GradCase(pe, [(1, 3, 8, 8)])
    stem = ConvStem(8, 3, rng=rng)
    ce = ConvEmbed(8, 2, rng=rng)
    blk = LEWinBlock(16, 1, 2, rng=rng)

    def chain(x):
        y = ce(stem(x))
        n, c, h, w = y.shape
        z = ops.reshape(ops.permute(y, (0, 2, 3, 1)), (n, h * w, c))
        return blk(z, h, w)

    cases["stem_ce_block"] = GradCase(chain, [(2, 3, 32, 32)], Sequential(stem, ce, blk), max_checks=12)
    return cases


def all_cases() -> dict:
    cases = _op_cases()
    cases.update(_block_cases())
    return cases


def run_case(case: GradCase, seed: int = 0) -> dict:
    return grad_check_detail(case.fn, case.input_sizes, seed, params=case.params, max_checks=case.max_checks)


def run_all(names=None, seed: int = 0):
    """Yield ``(name, worst_error)`` for the selected cases."""
    cases = all_cases()
    selected = list(cases) if names is None else list(names)
    for name in selected:
        if name not in cases:
            raise KeyError(f"unknown gradient case {name!r}; known: {', '.join(cases)}")
        errs = run_case(cases[name], seed)
        yield name, max(errs.values(), default=0.0)
