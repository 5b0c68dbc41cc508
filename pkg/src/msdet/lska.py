"""Large separable-kernel attention.

A k x k depthwise spatial kernel is approximated by a cascade of four 1-d
depthwise convolutions: a horizontal/vertical local pair of size 2d-1 and a
horizontal/vertical dilated pair of size ceil(k/d) with dilation d, followed
by a 1x1 pointwise mix. The resulting map multiplicatively reweights the
input, so the block preserves shape and costs O(k/d + d) taps per channel
instead of O(k^2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .nn import Module, _trace_entry
from .tensor import ConvSpec, Tensor


@dataclass(frozen=True)
class LskaSpec:
    channels: int
    k: int = 11
    d: int = 3

    def __post_init__(self):
        if self.channels < 1:
            raise ConfigurationError("lska: channels must be >= 1")
        if self.k < 3 or self.k % 2 == 0:
            raise ConfigurationError(f"lska: k must be odd and >= 3, got {self.k}")
        if not 1 <= self.d <= self.k:
            raise ConfigurationError(f"lska: need 1 <= d <= k, got d={self.d}")
        # cascade must cover the k x k receptive field
        rf = (self.local_k - 1) + self.d * (self.dilated_k - 1) + 1
        if rf < self.k:
            raise ConfigurationError(
                f"lska: receptive field {rf} < k={self.k} for d={self.d}"
            )

    @property
    def local_k(self):
        return 2 * self.d - 1

    @property
    def dilated_k(self):
        return math.ceil(self.k / self.d)


def lska_param_count(spec: LskaSpec):
    """(separable depthwise taps, naive k x k depthwise taps, pointwise taps);
    biases excluded from the comparison."""
    dw = spec.channels * (2 * spec.local_k + 2 * spec.dilated_k)
    naive = spec.channels * spec.k * spec.k
    pointwise = spec.channels * spec.channels
    return dw, naive, pointwise


def _dw_spec(c, kh, kw, dilation=1):
    # symmetric "same" padding; even effective extents are padded explicitly
    eh = dilation * (kh - 1) + 1
    ew = dilation * (kw - 1) + 1
    ph = (eh - 1) // 2 if eh % 2 == 1 else 0
    pw = (ew - 1) // 2 if ew % 2 == 1 else 0
    return ConvSpec(c, c, kh, kw, padding=(ph, pw), dilation=dilation, groups=c)


class LskaBlock(Module):
    """Attention path (h5 -> v5 -> hd -> vd -> pw) times the input.

    Parameter names are fixed by the weight-manifest interface: h5/v5 are the
    local horizontal/vertical 1-d kernels, hd/vd the dilated pair, pw the
    pointwise mix.
    """

    def __init__(self, rng, spec: LskaSpec, dtype=np.float64):
        super().__init__()
        object.__setattr__(self, "lska_spec", spec)
        c, lk, dk, d = spec.channels, spec.local_k, spec.dilated_k, spec.d

        object.__setattr__(self, "_spec_h5", _dw_spec(c, 1, lk))
        object.__setattr__(self, "_spec_v5", _dw_spec(c, lk, 1))
        object.__setattr__(self, "_spec_hd", _dw_spec(c, 1, dk, dilation=d))
        object.__setattr__(self, "_spec_vd", _dw_spec(c, dk, 1, dilation=d))
        object.__setattr__(self, "_spec_pw", ConvSpec(c, c, 1, 1))

        def dw_weight(kh, kw):
            fan = kh * kw
            return Tensor(
                (rng.standard_normal((c, 1, kh, kw)) * np.sqrt(2.0 / fan)).astype(dtype),
                requires_grad=True,
            )

        self.h5 = dw_weight(1, lk)
        self.h5_bias = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
        self.v5 = dw_weight(lk, 1)
        self.v5_bias = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
        self.hd = dw_weight(1, dk)
        self.hd_bias = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
        self.vd = dw_weight(dk, 1)
        self.vd_bias = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
        self.pw = Tensor(
            (rng.standard_normal((c, c, 1, 1)) * np.sqrt(2.0 / c)).astype(dtype),
            requires_grad=True,
        )
        self.pw_bias = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)

        # asymmetric "same" pads for even effective extents (dilated pair)
        d_ext = spec.d * (dk - 1) + 1
        if d_ext % 2 == 0:
            lo = (d_ext - 1) // 2
            hi = d_ext - 1 - lo
            object.__setattr__(self, "_pad_hd", (0, 0, lo, hi))
            object.__setattr__(self, "_pad_vd", (lo, hi, 0, 0))
        else:
            object.__setattr__(self, "_pad_hd", None)
            object.__setattr__(self, "_pad_vd", None)

    def _conv(self, x, w, b, spec, tag, pads):
        if pads is not None:
            x = T.pad2d(x, pads)
        out = T.conv2d(x, w, b, spec)
        n, co, ho, wo = out.shape
        macs = n * co * ho * wo * (spec.in_channels // spec.groups) * spec.kernel_h * spec.kernel_w
        _trace_entry(f"{self.qualname}.{tag}" if self.qualname else f"lska.{tag}", out.shape, macs)
        return out

    def attention_map(self, x):
        if x.shape[1] != self.lska_spec.channels:
            raise DimensionError(
                f"lska: input has C={x.shape[1]}, block expects {self.lska_spec.channels}"
            )
        a = self._conv(x, self.h5, self.h5_bias, self._spec_h5, "h5", None)
        a = self._conv(a, self.v5, self.v5_bias, self._spec_v5, "v5", None)
        a = self._conv(a, self.hd, self.hd_bias, self._spec_hd, "hd", self._pad_hd)
        a = self._conv(a, self.vd, self.vd_bias, self._spec_vd, "vd", self._pad_vd)
        return self._conv(a, self.pw, self.pw_bias, self._spec_pw, "pw", None)

    def forward(self, x):
        return T.elementwise(self.attention_map(x), x, "hadamard")

    __call__ = forward


def lska_forward(x, block: LskaBlock):
    """Functional entry point: attention map times input, shape-preserving."""
    return block(x)


def attach_lska(backbone, stage_index, spec: LskaSpec, rng, dtype=np.float64):
    """Route the named backbone stage's output through a new LSKA block.

    The backbone keeps all other taps unchanged; returns the backbone for
    chaining. Raises ConfigurationError for an unknown stage.
    """
    block = LskaBlock(rng, spec, dtype=dtype)
    backbone.attach(stage_index, block)
    return backbone
