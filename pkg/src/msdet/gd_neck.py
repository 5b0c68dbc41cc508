"""Gather-and-distribute neck.

All pyramid levels are aligned to one resolution and fused into a global
descriptor (gather: alignment + fusion trunk), which is then injected back
into individual levels through gated pointwise mixing (distribute). A low
branch aligned at the second-shallowest level feeds the stride-8/16 outputs;
a high branch aligned at the deepest level refines the stride-16/32 outputs
from the low results plus the deepest backbone tap. Lightweight adjacent
fusion (LAF) mixes each inject target with its pooled/upsampled neighbors
first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .nn import Conv2d, ConvBlock, Module
from .tensor import ConvSpec


class FeaturePyramid:
    """Ordered shallow-to-deep feature maps; each deeper level halves H and W."""

    def __init__(self, levels):
        if not levels:
            raise DimensionError("FeaturePyramid: no levels")
        for i in range(1, len(levels)):
            ph, pw = levels[i - 1].shape[2:]
            h, w = levels[i].shape[2:]
            if ph != 2 * h or pw != 2 * w:
                raise DimensionError(
                    f"FeaturePyramid: level {i} is {h}x{w}, expected half of {ph}x{pw}"
                )
        self.levels = list(levels)

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i):
        return self.levels[i]


@dataclass(frozen=True)
class GdSpec:
    low_align_index: int = 1
    high_align_index: int = 2
    fuse_channels: int = 64
    out_channels: int = 64

    def __post_init__(self):
        if self.fuse_channels < 1 or self.out_channels < 1:
            raise ConfigurationError("gd: channel widths must be >= 1")


def fam(levels, align_index):
    """Feature alignment: bring every level to the align level's H x W
    (avg-pool larger maps, nearest-resize smaller ones) and concatenate."""
    if not 0 <= align_index < len(levels):
        raise ConfigurationError(f"fam: align index {align_index} out of range")
    th, tw = levels[align_index].shape[2:]
    aligned = []
    for i, lv in enumerate(levels):
        h, w = lv.shape[2:]
        if h == th and w == tw:
            aligned.append(lv)
        elif h >= th and w >= tw:
            if h % th or w % tw:
                raise DimensionError(
                    f"fam: level {i} ({h}x{w}) not divisible by target {th}x{tw}"
                )
            aligned.append(T.pool(lv, "avg", window=(h // th, w // tw)))
        else:
            aligned.append(T.resize_nearest(lv, th, tw))
    return T.concat_channels(aligned)


class Ifm(Module):
    """Information fusion trunk: two conv+norm+activation blocks."""

    def __init__(self, rng, in_c, fuse_c, dtype=np.float64):
        super().__init__()
        self.block1 = ConvBlock(rng, in_c, fuse_c, dtype=dtype)
        self.block2 = ConvBlock(rng, fuse_c, fuse_c, dtype=dtype)

    def forward(self, x):
        return self.block2(self.block1(x))

    __call__ = forward


class Inject(Module):
    """Gated injection of a branch-global descriptor into one level:
    refine(pointwise(local) * sigmoid(gate(g)) + pointwise(g)) where g is the
    descriptor resized to the local grid."""

    def __init__(self, rng, local_c, global_c, out_c, dtype=np.float64):
        super().__init__()
        self.local_pw = Conv2d(rng, ConvSpec(local_c, out_c, 1, 1), dtype=dtype)
        self.gate_pw = Conv2d(rng, ConvSpec(global_c, out_c, 1, 1), dtype=dtype)
        self.global_pw = Conv2d(rng, ConvSpec(global_c, out_c, 1, 1), dtype=dtype)
        self.refine = ConvBlock(rng, out_c, out_c, dtype=dtype)

    def forward(self, local, global_info):
        h, w = local.shape[2:]
        g = T.resize_nearest(global_info, h, w)
        gate = T.sigmoid(self.gate_pw(g))
        mixed = self.local_pw(local) * gate + self.global_pw(g)
        return self.refine(mixed)

    __call__ = forward


class _InjectPair(Module):
    """Low- and high-branch injections sharing one target level."""

    def __init__(self, low, high):
        super().__init__()
        self.low = low
        self.high = high


class Laf(Module):
    """Lightweight adjacent fusion: pooled shallower + current + upsampled
    deeper, each neighbor mapped to the current width by a 1x1 conv, then one
    1x1 fuse conv back to the current width."""

    def __init__(self, rng, cur_c, shallow_c=None, deep_c=None, dtype=np.float64):
        super().__init__()
        cat_c = cur_c
        if shallow_c is not None:
            self.shallow_pw = Conv2d(rng, ConvSpec(shallow_c, cur_c, 1, 1), dtype=dtype)
            cat_c += cur_c
        else:
            object.__setattr__(self, "shallow_pw", None)
        if deep_c is not None:
            self.deep_pw = Conv2d(rng, ConvSpec(deep_c, cur_c, 1, 1), dtype=dtype)
            cat_c += cur_c
        else:
            object.__setattr__(self, "deep_pw", None)
        self.fuse = Conv2d(rng, ConvSpec(cat_c, cur_c, 1, 1), dtype=dtype)

    def forward(self, shallower, current, deeper):
        h, w = current.shape[2:]
        parts = []
        if shallower is not None:
            if self.shallow_pw is None:
                raise ConfigurationError("laf: built without a shallow branch")
            if shallower.shape[2] != 2 * h or shallower.shape[3] != 2 * w:
                raise DimensionError(
                    f"laf: shallower {shallower.shape[2:]} is not one octave above {h}x{w}"
                )
            parts.append(self.shallow_pw(T.pool(shallower, "avg", window=2)))
        parts.append(current)
        if deeper is not None:
            if self.deep_pw is None:
                raise ConfigurationError("laf: built without a deep branch")
            if 2 * deeper.shape[2] != h or 2 * deeper.shape[3] != w:
                raise DimensionError(
                    f"laf: deeper {deeper.shape[2:]} is not one octave below {h}x{w}"
                )
            parts.append(self.deep_pw(T.resize_nearest(deeper, h, w)))
        return self.fuse(T.concat_channels(parts))

    __call__ = forward


def laf(module, shallower, current, deeper):
    return module(shallower, current, deeper)


class GdNeck(Module):
    """Full gather-and-distribute data flow over four backbone taps
    (strides 4/8/16/32), producing three head levels (strides 8/16/32)."""

    def __init__(self, rng, widths, spec: GdSpec, dtype=np.float64):
        super().__init__()
        if len(widths) != 4:
            raise ConfigurationError(f"gd: need 4 tap widths, got {len(widths)}")
        object.__setattr__(self, "gd_spec", spec)
        c2, c3, c4, c5 = widths
        fc, oc = spec.fuse_channels, spec.out_channels

        self.low = Ifm(rng, sum(widths), fc, dtype=dtype)

        laf_box = Module()
        laf_box.register_child("p3", Laf(rng, c3, shallow_c=c2, deep_c=c4, dtype=dtype))
        laf_box.register_child("p4", Laf(rng, c4, shallow_c=c3, deep_c=c5, dtype=dtype))
        self.laf = laf_box

        inject_box = Module()
        inject_box.register_child("p3", Inject(rng, c3, fc, oc, dtype=dtype))
        inject_box.register_child(
            "p4",
            _InjectPair(
                Inject(rng, c4, fc, oc, dtype=dtype),
                Inject(rng, oc, fc, oc, dtype=dtype),
            ),
        )
        inject_box.register_child("p5", Inject(rng, c5, fc, oc, dtype=dtype))
        self.inject = inject_box

        self.high = Ifm(rng, oc + oc + c5, fc, dtype=dtype)

    def gather(self, levels, branch):
        if branch == "low":
            return self.low(fam(levels, self.gd_spec.low_align_index))
        if branch == "high":
            return self.high(fam(levels, self.gd_spec.high_align_index))
        raise ConfigurationError(f"gather: unknown branch {branch!r}")

    def forward(self, pyramid):
        levels = pyramid.levels if isinstance(pyramid, FeaturePyramid) else list(pyramid)
        if len(levels) != 4:
            raise DimensionError(f"gd: expected 4 pyramid levels, got {len(levels)}")
        c2, c3, c4, c5 = levels

        low_desc = self.gather(levels, "low")
        p3 = self.inject.p3(self.laf.p3(c2, c3, c4), low_desc)
        p4_mid = self.inject.p4.low(self.laf.p4(c3, c4, c5), low_desc)

        high_desc = self.gather([p3, p4_mid, c5], "high")
        p4 = self.inject.p4.high(p4_mid, high_desc)
        p5 = self.inject.p5(c5, high_desc)
        return [p3, p4, p5]

    __call__ = forward


def gd_neck_forward(pyramid, neck: GdNeck):
    return neck(pyramid)
