"""Static cost model and empirical diagnostics.

Cost convention: one FLOP is one multiply-accumulate. Convolutions and
linear maps count ``fan_in * outputs``; window attention adds the two
``L x L`` products per window. Norms, activations, softmax, residual adds and
pooling are not counted. Parameter counts cover every learned tensor
(weights, biases, norm affines, relative-position tables, classifier head);
BatchNorm running statistics are buffers and are excluded.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import DimensionError, NumericError
from .model import Model
from .nn import Module
from .tensor import Tensor, backward

FLOP_CONVENTION = "1 FLOP = 1 multiply-accumulate"


def count_params(model: Module) -> int:
    return int(sum(p.data.size for p in model.parameters()))


def _module_cost(module: Module, shape):
    if not hasattr(module, "cost"):
        raise DimensionError(f"{type(module).__name__} has no static cost rule")
    return module.cost(shape)


def count_flops(model: Module, h: int, w: int, in_chans: int | None = None) -> int:
    """MACs for one ``h`` x ``w`` image.

    For a full :class:`Model` the input has 3 channels. Other modules need
    ``in_chans`` unless they carry ``cin``/``dim``/``in_chans`` themselves.
    """
    if isinstance(model, Model):
        return int(sum(macs for _, _, macs in model.cost(h, w)))
    c = in_chans
    if c is None:
        for attr in ("in_chans", "cin", "dim", "channels"):
            if hasattr(model, attr):
                c = getattr(model, attr)
                break
    if c is None and hasattr(model, "spec"):
        c = model.spec.c_in
    if c is None:
        raise DimensionError(f"cannot infer input channels for {type(model).__name__}; pass in_chans")
    return int(_module_cost(model, (c, h, w))[1])


def report(model: Module, h: int, w: int) -> dict:
    """``{params_total, flops_total, per_stage: [{name, params, flops}]}``."""
    if isinstance(model, Model):
        rows = [{"name": name, "params": count_params(part), "flops": int(macs)}
                for (name, part), (_, _, macs) in zip(model.parts(), model.cost(h, w))]
    else:
        rows = [{"name": type(model).__name__, "params": count_params(model),
                 "flops": count_flops(model, h, w)}]
    return {
        "params_total": sum(r["params"] for r in rows),
        "flops_total": sum(r["flops"] for r in rows),
        "per_stage": rows,
    }


def format_table(rep: dict, input_size: int | None = None) -> str:
    lines = [f"{'part':<10}{'params':>14}{'MACs':>16}"]
    for r in rep["per_stage"]:
        lines.append(f"{r['name']:<10}{r['params']:>14,}{r['flops']:>16,}")
    lines.append("-" * 40)
    lines.append(f"{'total':<10}{rep['params_total']:>14,}{rep['flops_total']:>16,}")
    size = f" @ {input_size}x{input_size}" if input_size else ""
    lines.append(f"params {rep['params_total'] / 1e6:.2f}M, FLOPs {rep['flops_total'] / 1e9:.2f}G{size} "
                 f"({FLOP_CONVENTION})")
    return "\n".join(lines)


def format_json(rep: dict) -> str:
    return json.dumps(rep, indent=2)


# ----------------------------------------------------------------------------
# finite-difference gradient check
# ----------------------------------------------------------------------------

def _rel_err(a: np.ndarray, n: np.ndarray) -> float:
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-4)
    return float(np.max(np.abs(a - n) / denom))


def _finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {name}")


def grad_check_detail(subgraph, input_sizes, seed: int = 0, params: Module | None = None,
                      eps: float = 1e-5, max_checks: int | None = None) -> dict:
    """Per-tensor worst relative error of tape gradients against central differences.

    ``subgraph`` is a Module or any callable taking one tensor per entry of
    ``input_sizes``. Parameters come from ``params`` (default: ``subgraph``
    itself when it is a Module) and are cast to float64 in place. The scalar
    probed is ``sum(out * R)`` for a fixed random ``R``. ``max_checks`` caps
    the number of perturbed coordinates per tensor (sampled with ``seed``).
    """
    rng = np.random.default_rng(seed)
    owner = params if params is not None else (subgraph if isinstance(subgraph, Module) else None)
    named = []
    if owner is not None:
        owner.to(np.float64)
        named = list(owner.named_parameters())
    inputs = [Tensor(rng.standard_normal(tuple(s)), requires_grad=True, dtype=np.float64) for s in input_sizes]
    named += [(f"input{i}", t) for i, t in enumerate(inputs)]

    out = subgraph(*inputs)
    _finite("output", out.data)
    r = rng.standard_normal(out.shape)

    def loss_value():
        y = subgraph(*inputs).data
        _finite("output", y)
        return float(np.sum(y * r))

    for _, t in named:
        t.grad = None
    backward((out * Tensor(r, dtype=np.float64)).sum())

    errors = {}
    for name, t in named:
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        _finite(f"gradient of {name}", g)
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_checks is not None and flat.size > max_checks:
            idx = np.sort(rng.choice(flat.size, max_checks, replace=False))
        num = np.empty(len(idx))
        for j, k in enumerate(idx):
            orig = flat[k]
            flat[k] = orig + eps
            lp = loss_value()
            flat[k] = orig - eps
            lm = loss_value()
            flat[k] = orig
            num[j] = (lp - lm) / (2 * eps)
        errors[name] = _rel_err(g.reshape(-1)[idx], num)
    return errors


def grad_check(subgraph, input_sizes, seed: int = 0, **kw) -> float:
    """Worst relative gradient error over all parameters and inputs."""
    errs = grad_check_detail(subgraph, input_sizes, seed, **kw)
    return max(errs.values(), default=0.0)


# ----------------------------------------------------------------------------
# effective receptive field
# ----------------------------------------------------------------------------

def erf_map(model: Module, stage_index: int, probe_batch) -> np.ndarray:
    """Input-gradient magnitude of the centre unit of one stage output.

    ``stage_index`` is 1-based for full models and ignored for plain modules
    (their output is probed directly). Gradients are summed over output
    channels at the centre position, then ``|grad|`` is averaged over the
    batch and input channels and scaled to max 1.
    """
    model.eval()
    x = probe_batch if isinstance(probe_batch, Tensor) else Tensor(np.asarray(probe_batch))
    x = Tensor(x.data, requires_grad=True)
    if isinstance(model, Model):
        if not 1 <= stage_index <= 4:
            raise DimensionError(f"stage_index must be in 1..4, got {stage_index}")
        y = model.forward_features(x)[stage_index - 1]
    else:
        y = model(x)
    hc, wc = y.shape[2] // 2, y.shape[3] // 2
    centre = y[:, :, hc, wc]
    backward(centre.sum(), inputs=[x])
    model.zero_grad()
    g = np.abs(x.grad).mean(axis=(0, 1))
    peak = g.max()
    return (g / peak if peak > 0 else g).astype(np.float64)


def erf_support(grid: np.ndarray, threshold: float = 1e-3) -> int:
    return int(np.count_nonzero(grid > threshold))


def write_pgm(path, grid: np.ndarray):
    """Binary 8-bit PGM of a [0, 1] map."""
    img = np.clip(np.rint(np.asarray(grid) * 255), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        f.write(img.tobytes())
