"""Small module system on top of the tensor engine.

Modules auto-register parameters (Tensor attributes) and submodules, expose
dotted parameter names for the weight manifest, and append (name, shape, macs)
entries to an active trace during forward. He-style fan-in init is driven by
an explicit RNG so builds are bit-reproducible.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .tensor import BatchNormParams, ConvSpec, Tensor

_trace_log = None
_stats_frozen = False


@contextmanager
def trace():
    """Collect (node name, output shape, macs) for every traced layer."""
    global _trace_log
    prev = _trace_log
    _trace_log = []
    try:
        yield _trace_log
    finally:
        _trace_log = prev


@contextmanager
def frozen_stats():
    """Suspend batch-norm running-stat updates; train-mode forwards become
    pure functions, which finite-difference verification requires."""
    global _stats_frozen
    prev = _stats_frozen
    _stats_frozen = True
    try:
        yield
    finally:
        _stats_frozen = prev


def _trace_entry(name, shape, macs):
    if _trace_log is not None:
        _trace_log.append((name, tuple(int(s) for s in shape), int(macs)))


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)
        object.__setattr__(self, "qualname", "")

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_child(self, name, module):
        self._children[name] = module
        object.__setattr__(self, name, module)

    def named_params(self, prefix=""):
        for name, p in self._params.items():
            yield (f"{prefix}{name}", p)
        for name, child in self._children.items():
            yield from child.named_params(f"{prefix}{name}.")

    def named_state(self, prefix=""):
        """Params plus persistent buffers (batch-norm running stats)."""
        for name, p in self._params.items():
            yield (f"{prefix}{name}", p.data)
        for name, buf in self.buffers().items():
            yield (f"{prefix}{name}", buf)
        for name, child in self._children.items():
            yield from child.named_state(f"{prefix}{name}.")

    def buffers(self):
        return {}

    def params(self):
        return [p for _, p in self.named_params()]

    def param_count(self):
        return sum(p.size for p in self.params())

    def set_mode(self, training):
        object.__setattr__(self, "training", bool(training))
        for child in self._children.values():
            child.set_mode(training)

    def finalize_names(self, prefix=""):
        object.__setattr__(self, "qualname", prefix.rstrip("."))
        for name, child in self._children.items():
            child.finalize_names(f"{prefix}{name}.")

    def zero_grads(self):
        for p in self.params():
            p.grad = None


class Conv2d(Module):
    def __init__(self, rng, spec: ConvSpec, dtype=np.float64, bias_init=0.0):
        super().__init__()
        self.spec = spec
        fan_in = (spec.in_channels // spec.groups) * spec.kernel_h * spec.kernel_w
        wshape = (spec.out_channels, spec.in_channels // spec.groups, spec.kernel_h, spec.kernel_w)
        self.w = Tensor(
            (rng.standard_normal(wshape) * np.sqrt(2.0 / fan_in)).astype(dtype),
            requires_grad=True,
        )
        if spec.has_bias:
            self.b = Tensor(np.full(spec.out_channels, bias_init, dtype=dtype), requires_grad=True)
        else:
            object.__setattr__(self, "b", None)

    def forward(self, x):
        out = T.conv2d(x, self.w, self.b, self.spec)
        n, _, ho, wo = out.shape
        s = self.spec
        macs = n * s.out_channels * ho * wo * (s.in_channels // s.groups) * s.kernel_h * s.kernel_w
        _trace_entry(self.qualname, out.shape, macs)
        return out

    __call__ = forward


class BatchNorm2d(Module):
    def __init__(self, channels, dtype=np.float64):
        super().__init__()
        bn = BatchNormParams.create(channels, dtype=dtype)
        self.gamma = bn.gamma
        self.beta = bn.beta
        object.__setattr__(self, "bn", bn)

    def buffers(self):
        return {"running_mean": self.bn.running_mean, "running_var": self.bn.running_var}

    def load_buffers(self, mean, var):
        self.bn.running_mean[...] = mean
        self.bn.running_var[...] = var

    def forward(self, x):
        out = T.batch_norm(
            x,
            self.bn,
            "train" if self.training else "infer",
            update_running=not _stats_frozen,
        )
        _trace_entry(self.qualname, out.shape, 0)
        return out

    __call__ = forward


class ConvBlock(Module):
    """conv + batch norm + activation, the standard fused cell."""

    def __init__(self, rng, in_c, out_c, kernel=3, stride=1, act="silu", dtype=np.float64):
        super().__init__()
        pad = (kernel - 1) // 2
        self.conv = Conv2d(
            rng,
            ConvSpec(in_c, out_c, kernel, kernel, stride=stride, padding=pad, has_bias=False),
            dtype=dtype,
        )
        self.norm = BatchNorm2d(out_c, dtype=dtype)
        object.__setattr__(self, "act", act)

    def forward(self, x):
        return T.activation(self.norm(self.conv(x)), self.act)

    __call__ = forward


class Sequential(Module):
    def __init__(self, *mods):
        super().__init__()
        for i, m in enumerate(mods):
            self.register_child(str(i), m)

    def forward(self, x):
        for m in self._children.values():
            x = m(x)
        return x

    __call__ = forward


def load_state(model, named_arrays):
    """Copy a {name: array} mapping into a model's params and buffers."""
    state = dict(model.named_state())
    missing = [k for k in state if k not in named_arrays]
    if missing:
        raise DimensionError(f"load_state: missing entries {missing[:4]}...")
    for name, arr in named_arrays.items():
        if name not in state:
            continue
        target = state[name]
        if tuple(target.shape) != tuple(np.shape(arr)):
            raise DimensionError(
                f"load_state: {name} has shape {np.shape(arr)}, expected {target.shape}"
            )
        target[...] = np.asarray(arr, dtype=target.dtype)
