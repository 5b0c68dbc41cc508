"""Multi-patch mixing detection head, box decoding and NMS.

Each head level runs a multi-branch channel/spatial mixing block (CSMM at
several patch granularities, summed, then exponentially reweighted per
channel from a pooled bottleneck, plus a residual input add) followed by two
sibling conv stacks: one emits class logits, the other box regression (4
channels: left/top/right/bottom distances from the cell center, in stride
units) plus a 1-channel objectness logit. Raw output channel order is
[ltrb(4), obj(1), classes...].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .boxes import DetBox, iou
from .errors import ConfigurationError, DimensionError
from .nn import Conv2d, ConvBlock, BatchNorm2d, Module
from .tensor import ConvSpec, Tensor


@dataclass(frozen=True)
class SeamSpec:
    channels: int
    patch_sizes: tuple = (1, 2, 3)
    hidden_ratio: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "patch_sizes", tuple(int(p) for p in self.patch_sizes))
        if not self.patch_sizes or min(self.patch_sizes) < 1:
            raise ConfigurationError(f"seam: patch sizes must be >= 1, got {self.patch_sizes}")
        if self.hidden_channels < 1:
            raise ConfigurationError("seam: hidden bottleneck collapsed to zero")

    @property
    def hidden_channels(self):
        return max(1, int(round(self.channels * self.hidden_ratio)))


@dataclass(frozen=True)
class HeadSpec:
    num_classes: int
    strides: tuple = (8, 16, 32)
    conf_threshold: float = 0.05
    iou_threshold_nms: float = 0.5

    def __post_init__(self):
        if self.num_classes < 1:
            raise ConfigurationError("head: num_classes must be >= 1")
        if not 0.0 <= self.conf_threshold <= 1.0 or not 0.0 <= self.iou_threshold_nms <= 1.0:
            raise ConfigurationError("head: thresholds must lie in [0,1]")


class Csmm(Module):
    """Channel/spatial mixing at one patch granularity: depthwise patch
    embedding (kernel = stride = patch), norm + activation, pointwise channel
    mix, then nearest-resize back to the input grid."""

    def __init__(self, rng, channels, patch, act="relu", dtype=np.float64):
        super().__init__()
        object.__setattr__(self, "patch", int(patch))
        object.__setattr__(self, "act", act)
        self.dw = Conv2d(
            rng,
            ConvSpec(channels, channels, patch, patch, stride=patch, groups=channels, has_bias=False),
            dtype=dtype,
        )
        self.norm = BatchNorm2d(channels, dtype=dtype)
        self.pw = Conv2d(rng, ConvSpec(channels, channels, 1, 1), dtype=dtype)

    def forward(self, x):
        h, w = x.shape[2:]
        if h % self.patch or w % self.patch:
            raise DimensionError(
                f"csmm: input {h}x{w} not divisible by patch {self.patch}"
            )
        y = T.activation(self.norm(self.dw(x)), self.act)
        y = self.pw(y)
        return T.resize_nearest(y, h, w)

    __call__ = forward


def csmm(x, module: Csmm):
    return module(x)


class MultiSeam(Module):
    """Sum of CSMM branches with exponential channel reweighting and a
    residual input add: out = y * exp(fc2(act(fc1(gap(y))))) + x.

    Inputs whose grid is not divisible by a branch's patch are zero-padded to
    the next multiple for that branch and cropped back, so any grid works.
    """

    def __init__(self, rng, spec: SeamSpec, act="relu", dtype=np.float64):
        super().__init__()
        object.__setattr__(self, "seam_spec", spec)
        object.__setattr__(self, "act", act)
        c = spec.channels
        branches = Module()
        for p in spec.patch_sizes:
            branches.register_child(f"p{p}", Csmm(rng, c, p, act=act, dtype=dtype))
        self.branches = branches
        self.fc1 = Conv2d(rng, ConvSpec(c, spec.hidden_channels, 1, 1), dtype=dtype)
        self.fc2 = Conv2d(rng, ConvSpec(spec.hidden_channels, c, 1, 1), dtype=dtype)

    def _branch_sum(self, x):
        h, w = x.shape[2:]
        y = None
        for p, branch in zip(self.seam_spec.patch_sizes, self.branches._children.values()):
            if h % p or w % p:
                hp = math.ceil(h / p) * p
                wp = math.ceil(w / p) * p
                yp = T.crop2d(branch(T.pad2d(x, (0, hp - h, 0, wp - w))), h, w)
            else:
                yp = branch(x)
            y = yp if y is None else y + yp
        return y

    def _weights_of(self, y):
        return T.texp(self.fc2(T.activation(self.fc1(T.pool(y, "global_avg")), self.act)))

    def forward(self, x):
        if x.shape[1] != self.seam_spec.channels:
            raise DimensionError(
                f"multiseam: input C={x.shape[1]}, block expects {self.seam_spec.channels}"
            )
        y = self._branch_sum(x)
        return y * self._weights_of(y) + x

    def channel_weights(self, x):
        """The strictly positive per-channel reweighting factors for ``x``."""
        return self._weights_of(self._branch_sum(x))

    __call__ = forward


def multiseam(x, module: MultiSeam):
    return module(x)


class LevelHead(Module):
    """Two sibling stacks on one pyramid level: class logits and box+obj."""

    def __init__(self, rng, in_c, num_classes, dtype=np.float64):
        super().__init__()
        object.__setattr__(self, "num_classes", num_classes)
        self.cls_conv = ConvBlock(rng, in_c, in_c, dtype=dtype)
        self.cls_out = Conv2d(rng, ConvSpec(in_c, num_classes, 1, 1), dtype=dtype, bias_init=-4.0)
        self.reg_conv = ConvBlock(rng, in_c, in_c, dtype=dtype)
        self.reg_out = Conv2d(rng, ConvSpec(in_c, 5, 1, 1), dtype=dtype)
        self.reg_out.b.data[4] = -4.0  # objectness starts pessimistic

    def forward(self, x):
        return T.concat_channels([self.reg_out(self.reg_conv(x)), self.cls_out(self.cls_conv(x))])

    __call__ = forward


class PlainHead(Module):
    def __init__(self, rng, in_c, num_classes, dtype=np.float64):
        super().__init__()
        self.p3 = LevelHead(rng, in_c, num_classes, dtype=dtype)
        self.p4 = LevelHead(rng, in_c, num_classes, dtype=dtype)
        self.p5 = LevelHead(rng, in_c, num_classes, dtype=dtype)

    def forward(self, levels):
        if len(levels) != 3:
            raise ConfigurationError(f"head: expected 3 levels, got {len(levels)}")
        return [self.p3(levels[0]), self.p4(levels[1]), self.p5(levels[2])]

    __call__ = forward


class _SeamLevel(Module):
    def __init__(self, rng, in_c, num_classes, seam_spec, dtype=np.float64):
        super().__init__()
        self.seam = MultiSeam(rng, seam_spec, dtype=dtype)
        self.out = LevelHead(rng, in_c, num_classes, dtype=dtype)

    def forward(self, x):
        return self.out(self.seam(x))

    __call__ = forward


class MultiSeamHead(Module):
    def __init__(self, rng, in_c, num_classes, patch_sizes=(1, 2, 3), hidden_ratio=0.25, dtype=np.float64):
        super().__init__()
        spec = SeamSpec(in_c, patch_sizes, hidden_ratio)
        self.p3 = _SeamLevel(rng, in_c, num_classes, spec, dtype=dtype)
        self.p4 = _SeamLevel(rng, in_c, num_classes, spec, dtype=dtype)
        self.p5 = _SeamLevel(rng, in_c, num_classes, spec, dtype=dtype)

    def forward(self, levels):
        if len(levels) != 3:
            raise ConfigurationError(f"head: expected 3 levels, got {len(levels)}")
        return [self.p3(levels[0]), self.p4(levels[1]), self.p5(levels[2])]

    __call__ = forward


def head_forward(levels, head):
    return head(levels)


# ---------------------------------------------------------------------------
# decoding


def _np_sigmoid(z):
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[np.logical_not(pos)])
    out[np.logical_not(pos)] = ez / (1.0 + ez)
    return out


def _np_softplus(z):
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def decode(raw, stride, conf_threshold, image_hw):
    """Decode one level's raw map (C, H, W) for a single image.

    score = sigmoid(obj) * sigmoid(class logit); box corners grow from the
    cell center (col+0.5, row+0.5)*stride by softplus(raw ltrb)*stride and
    are clamped to the image bounds.
    """
    arr = raw.data if isinstance(raw, Tensor) else np.asarray(raw)
    if arr.ndim != 3:
        raise DimensionError(f"decode: expected (C, H, W) raw map, got {arr.shape}")
    nc = arr.shape[0] - 5
    if nc < 1:
        raise DimensionError(f"decode: {arr.shape[0]} channels leaves no class logits")
    img_h, img_w = image_hw
    gh, gw = arr.shape[1:]

    ltrb = _np_softplus(arr[0:4].astype(np.float64)) * stride
    obj = _np_sigmoid(arr[4].astype(np.float64))
    cls = _np_sigmoid(arr[5:].astype(np.float64))
    scores = obj[None, :, :] * cls  # (nc, gh, gw)

    cx = (np.arange(gw) + 0.5) * stride
    cy = (np.arange(gh) + 0.5) * stride

    dets = []
    cs, ys, xs = np.nonzero(scores > conf_threshold)
    for c, i, j in zip(cs.tolist(), ys.tolist(), xs.tolist()):
        l, t, r, b = ltrb[:, i, j]
        x0 = max(0.0, cx[j] - l)
        y0 = max(0.0, cy[i] - t)
        x1 = min(float(img_w), cx[j] + r)
        y1 = min(float(img_h), cy[i] + b)
        if x0 < x1 and y0 < y1:
            dets.append(DetBox(int(c), float(scores[c, i, j]), (x0, y0, x1, y1)))
    return dets


def nms(dets, iou_threshold):
    """Greedy per-class suppression: keep the highest-scoring box, drop any
    same-class box overlapping a kept one with IoU > threshold. Output is
    sorted by descending score, ties broken by class id then box coords."""
    order = sorted(dets, key=lambda d: (-d.score, d.class_id, d.box))
    kept = []
    kept_by_class = {}
    for d in order:
        ok = True
        for k in kept_by_class.get(d.class_id, ()):
            if iou(d.box, k.box) > iou_threshold:
                ok = False
                break
        if ok:
            kept.append(d)
            kept_by_class.setdefault(d.class_id, []).append(d)
    return kept


def decode_all(raw_levels, head_spec: HeadSpec, image_hw):
    """Decode every level of one image and apply NMS."""
    dets = []
    for raw, stride in zip(raw_levels, head_spec.strides):
        dets.extend(decode(raw, stride, head_spec.conf_threshold, image_hw))
    return nms(dets, head_spec.iou_threshold_nms)
