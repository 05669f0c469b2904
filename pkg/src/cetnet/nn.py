"""Minimal module system: parameter registry, train/eval switch, basic layers."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import ops
from .errors import DimensionError
from .tensor import Tensor


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Module:
    """Base class; parameters, buffers and children register on assignment."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray):
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    # -- traversal ---------------------------------------------------------------
    def named_children(self):
        return self._children.items()

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._children.items():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for mod_name, mod in self.named_modules(prefix):
            for name, p in mod._params.items():
                yield (f"{mod_name}.{name}" if mod_name else name), p

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for mod_name, mod in self.named_modules(prefix):
            for name, b in mod._buffers.items():
                yield (f"{mod_name}.{name}" if mod_name else name), b

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((n, p.data) for n, p in self.named_parameters())
        state.update((n, b) for n, b in self.named_buffers())
        return state

    def _buffer_owners(self):
        for mod_name, mod in self.named_modules():
            for name in mod._buffers:
                yield (f"{mod_name}.{name}" if mod_name else name), mod, name

    def load_state_dict(self, state):
        """Copy ``state`` in. Everything is validated before anything is written.

        Arrays keep the precision they arrive with.
        """
        params = dict(self.named_parameters())
        buffers = {full: (mod, name) for full, mod, name in self._buffer_owners()}
        for name, value in state.items():
            if name in params:
                target = params[name].data
            elif name in buffers:
                mod, attr = buffers[name]
                target = mod._buffers[attr]
            else:
                raise KeyError(f"unexpected entry {name!r}")
            if target.shape != np.shape(value):
                raise DimensionError(f"tensor {name!r}: shape {np.shape(value)} does not match {target.shape}")
        missing = [n for n in list(params) + list(buffers) if n not in state]
        if missing:
            raise KeyError(f"state is missing {missing[0]!r} ({len(missing)} entries total)")
        for name, value in state.items():
            arr = np.array(value, copy=True)
            if name in params:
                params[name].data = arr
                params[name].grad = None
            else:
                mod, attr = buffers[name]
                mod._buffers[attr] = arr
                object.__setattr__(mod, attr, arr)

    # -- modes --------------------------------------------------------------------
    def train(self, mode: bool = True):
        for _, m in self.named_modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def to(self, dtype):
        """Cast parameters and buffers in place to ``float32``/``float64``."""
        dtype = np.dtype(dtype)
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for mod_name, mod in self.named_modules():
            for name, b in list(mod._buffers.items()):
                nb = b.astype(dtype)
                mod._buffers[name] = nb
                object.__setattr__(mod, name, nb)
        return self


class Sequential(Module):
    def __init__(self, *layers):
        super().__init__()
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)
        object.__setattr__(self, "layers", list(layers))

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, i):
        return self.layers[i]

    def cost(self, shape):
        total = 0
        for layer in self.layers:
            if hasattr(layer, "cost"):
                shape, macs = layer.cost(shape)
                total += macs
        return shape, total


# ----------------------------------------------------------------------------
# initialisation
# ----------------------------------------------------------------------------

def trunc_normal(rng, shape, std=0.02):
    if rng is None:
        return np.zeros(shape, dtype=np.float32)
    return np.clip(rng.standard_normal(shape) * std, -2 * std, 2 * std).astype(np.float32)


def kaiming_normal(rng, shape, fan_out):
    if rng is None:
        return np.zeros(shape, dtype=np.float32)
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_out)).astype(np.float32)


# ----------------------------------------------------------------------------
# layers
# ----------------------------------------------------------------------------

class Linear(Module):
    def __init__(self, cin: int, cout: int, bias: bool = True, rng=None):
        super().__init__()
        self.in_features, self.out_features = cin, cout
        self.weight = parameter(trunc_normal(rng, (cout, cin)))
        self.bias = parameter(np.zeros(cout, dtype=np.float32)) if bias else None

    def forward(self, x):
        return ops.linear(x, self.weight, self.bias)

    def macs(self, tokens: int) -> int:
        return tokens * self.in_features * self.out_features


class Conv2d(Module):
    def __init__(self, cin, cout, kernel, stride=1, pad=0, groups=1, bias=True, rng=None):
        super().__init__()
        self.cin, self.cout, self.kernel = cin, cout, kernel
        self.stride, self.pad, self.groups = stride, pad, groups
        fan_out = kernel * kernel * cout // groups
        self.weight = parameter(kaiming_normal(rng, (cout, cin // groups, kernel, kernel), fan_out))
        self.bias = parameter(np.zeros(cout, dtype=np.float32)) if bias else None

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.pad, self.groups)

    def out_hw(self, h, w):
        return (ops.conv_output_size(h, self.kernel, self.stride, self.pad),
                ops.conv_output_size(w, self.kernel, self.stride, self.pad))

    def macs(self, h, w) -> int:
        ho, wo = self.out_hw(h, w)
        return self.cin // self.groups * self.cout * self.kernel ** 2 * ho * wo

    def cost(self, shape):
        _, h, w = shape
        return (self.cout, *self.out_hw(h, w)), self.macs(h, w)


class LayerNorm(Module):
    """LayerNorm over the last axis."""

    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.dim, self.eps = dim, eps
        self.weight = parameter(np.ones(dim, dtype=np.float32))
        self.bias = parameter(np.zeros(dim, dtype=np.float32))

    def forward(self, x):
        return ops.layer_norm(x, self.weight, self.bias, self.eps)


class ChannelLayerNorm(LayerNorm):
    """LayerNorm over the channel axis of an NCHW map."""

    def forward(self, x):
        y = ops.layer_norm(ops.permute(x, (0, 2, 3, 1)), self.weight, self.bias, self.eps)
        return ops.permute(y, (0, 3, 1, 2))


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.weight = parameter(np.ones(channels, dtype=np.float32))
        self.bias = parameter(np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float32))

    def forward(self, x):
        return ops.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                              self.training, self.momentum, self.eps)


class Activation(Module):
    def __init__(self, kind: str):
        super().__init__()
        self.kind = kind

    def forward(self, x):
        return ops.activation(x, self.kind)


class Identity(Module):
    def forward(self, x):
        return x
