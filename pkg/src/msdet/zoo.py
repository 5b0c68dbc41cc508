"""Model assembly: shared backbone, pluggable neck/head, cost accounting.

Six ablation variants share one residual backbone so that parameter and
metric deltas isolate the attention block, the gather-distribute neck and
the multi-patch head:

    baseline   plain FPN neck + plain head
    lska_only  baseline + large-kernel attention on the deepest stage
    gd_only    gather-distribute neck + plain head
    seam_only  plain FPN neck + multi-patch mixing head
    lska_gd    attention + gather-distribute neck + plain head
    gd_seam    gather-distribute neck + multi-patch mixing head
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigurationError, ValidationError
from .gd_neck import FeaturePyramid, GdNeck, GdSpec
from .lska import LskaBlock, LskaSpec
from .nn import Conv2d, ConvBlock, Module, trace
from .seam_head import HeadSpec, MultiSeamHead, PlainHead
from .tensor import ConvSpec, Tensor

VARIANTS = ("baseline", "lska_only", "gd_only", "seam_only", "lska_gd", "gd_seam")


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 256
    widths: tuple = (16, 32, 64, 128)
    num_classes: int = 15  # DOTA category count; synthetic runs override to 2
    seed: int = 0
    lska_k: int = 11
    lska_d: int = 3
    patch_sizes: tuple = (1, 2, 3)
    fuse_channels: int = 64
    neck_channels: int = 64
    conf_threshold: float = 0.05
    iou_threshold_nms: float = 0.5
    dtype: str = "float64"

    def __post_init__(self):
        if self.input_size < 64 or self.input_size % 32:
            raise ConfigurationError(
                f"config: input_size must be >= 64 and divisible by 32, got {self.input_size}"
            )
        if len(self.widths) != 4 or min(self.widths) < 1:
            raise ConfigurationError(f"config: need 4 positive widths, got {self.widths}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"config: dtype must be float32/float64, got {self.dtype}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def head_spec(self):
        return HeadSpec(
            num_classes=self.num_classes,
            conf_threshold=self.conf_threshold,
            iou_threshold_nms=self.iou_threshold_nms,
        )


_CONFIG_KEYS = (
    "input_size",
    "widths",
    "variant",
    "num_classes",
    "seed",
    "k",
    "d",
    "patch_sizes",
    "thresholds",
)


def parse_config(text):
    """Flat `key = value` model config; returns (ModelConfig, variant or None).

    Recognized keys: input_size, widths (comma ints), variant, num_classes,
    seed, k, d, patch_sizes (comma ints), thresholds (conf,nms). Unknown keys
    are rejected.
    """
    kwargs = {}
    variant = None
    for ln, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"config line {ln}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _CONFIG_KEYS:
            raise ValidationError(f"config line {ln}: unknown key {key!r}")
        if key == "variant":
            if value not in VARIANTS:
                raise ValidationError(f"config line {ln}: unknown variant {value!r}")
            variant = value
        elif key == "widths":
            kwargs["widths"] = tuple(int(v) for v in value.split(","))
        elif key == "patch_sizes":
            kwargs["patch_sizes"] = tuple(int(v) for v in value.split(","))
        elif key == "thresholds":
            conf, nms_t = (float(v) for v in value.split(","))
            kwargs["conf_threshold"] = conf
            kwargs["iou_threshold_nms"] = nms_t
        elif key == "k":
            kwargs["lska_k"] = int(value)
        elif key == "d":
            kwargs["lska_d"] = int(value)
        else:
            kwargs[key] = int(value)
    return ModelConfig(**kwargs), variant


class _ResidualBlock(Module):
    def __init__(self, rng, channels, dtype):
        super().__init__()
        self.conv1 = ConvBlock(rng, channels, channels, dtype=dtype)
        self.conv2 = Conv2d(
            rng, ConvSpec(channels, channels, 3, 3, padding=1, has_bias=False), dtype=dtype
        )
        self.norm2 = nn.BatchNorm2d(channels, dtype=dtype)

    def forward(self, x):
        return T.activation(x + self.norm2(self.conv2(self.conv1(x))), "silu")

    __call__ = forward


class _Stage(Module):
    """stride-2 entry conv followed by two residual blocks."""

    def __init__(self, rng, in_c, out_c, dtype):
        super().__init__()
        self.down = ConvBlock(rng, in_c, out_c, stride=2, dtype=dtype)
        self.block1 = _ResidualBlock(rng, out_c, dtype)
        self.block2 = _ResidualBlock(rng, out_c, dtype)

    def forward(self, x):
        return self.block2(self.block1(self.down(x)))

    __call__ = forward


class Backbone(Module):
    """Stem to stride 4 plus three stages, tapping strides 4/8/16/32.

    A large-kernel attention block may be attached behind any stage tap via
    ``attach``; the block itself is registered at model level (under the
    name "lska") so its manifest entries keep their canonical names.
    """

    def __init__(self, rng, widths, dtype=np.float64):
        super().__init__()
        w0 = widths[0]
        self.stem = nn.Sequential(
            ConvBlock(rng, 3, max(w0 // 2, 4), stride=2, dtype=dtype),
            ConvBlock(rng, max(w0 // 2, 4), w0, stride=2, dtype=dtype),
        )
        self.stage1 = _Stage(rng, widths[0], widths[1], dtype)
        self.stage2 = _Stage(rng, widths[1], widths[2], dtype)
        self.stage3 = _Stage(rng, widths[2], widths[3], dtype)
        object.__setattr__(self, "attached_block", None)
        object.__setattr__(self, "attached_stage", None)

    def attach(self, stage_index, block):
        if stage_index not in (0, 1, 2, 3):
            raise ConfigurationError(
                f"backbone: no stage {stage_index!r}; taps are 0..3 (strides 4/8/16/32)"
            )
        object.__setattr__(self, "attached_block", block)
        object.__setattr__(self, "attached_stage", stage_index)

    def set_mode(self, training):
        super().set_mode(training)
        if self.attached_block is not None:
            self.attached_block.set_mode(training)

    def forward(self, x):
        c2 = self.stem(x)
        c3 = self.stage1(c2)
        c4 = self.stage2(c3)
        c5 = self.stage3(c4)
        taps = [c2, c3, c4, c5]
        if self.attached_block is not None:
            taps[self.attached_stage] = self.attached_block(taps[self.attached_stage])
        return taps

    __call__ = forward


class FpnNeck(Module):
    """Plain top-down pyramid: lateral 1x1 to a common width, nearest
    upsampling sums, one smoothing block per output level."""

    def __init__(self, rng, widths, out_c, dtype=np.float64):
        super().__init__()
        _, c3, c4, c5 = widths
        self.lat3 = Conv2d(rng, ConvSpec(c3, out_c, 1, 1), dtype=dtype)
        self.lat4 = Conv2d(rng, ConvSpec(c4, out_c, 1, 1), dtype=dtype)
        self.lat5 = Conv2d(rng, ConvSpec(c5, out_c, 1, 1), dtype=dtype)
        self.smooth3 = ConvBlock(rng, out_c, out_c, dtype=dtype)
        self.smooth4 = ConvBlock(rng, out_c, out_c, dtype=dtype)
        self.smooth5 = ConvBlock(rng, out_c, out_c, dtype=dtype)

    def forward(self, pyramid):
        levels = pyramid.levels if isinstance(pyramid, FeaturePyramid) else list(pyramid)
        _, c3, c4, c5 = levels
        p5 = self.lat5(c5)
        p4 = self.lat4(c4) + T.resize_nearest(p5, *c4.shape[2:])
        p3 = self.lat3(c3) + T.resize_nearest(p4, *c3.shape[2:])
        return [self.smooth3(p3), self.smooth4(p4), self.smooth5(p5)]

    __call__ = forward


class DetectionModel(Module):
    def __init__(self, variant, config):
        super().__init__()
        object.__setattr__(self, "variant", variant)
        object.__setattr__(self, "config", config)

    def forward(self, x):
        taps = self.backbone(x)
        levels = self.neck(FeaturePyramid(taps))
        return self.head(levels)

    __call__ = forward

    def grids(self, input_size):
        return [(input_size // s, input_size // s) for s in (8, 16, 32)]


def build(variant, config: ModelConfig):
    """Assemble one ablation variant with deterministic He-style init."""
    if variant not in VARIANTS:
        raise ConfigurationError(f"build: unknown variant {variant!r}; pick from {VARIANTS}")
    rng = np.random.default_rng(config.seed)
    dtype = config.np_dtype

    model = DetectionModel(variant, config)
    backbone = Backbone(rng, config.widths, dtype=dtype)
    model.backbone = backbone

    if variant in ("lska_only", "lska_gd"):
        spec = LskaSpec(config.widths[3], config.lska_k, config.lska_d)
        block = LskaBlock(rng, spec, dtype=dtype)
        backbone.attach(3, block)
        model.register_child("lska", block)

    if variant in ("gd_only", "lska_gd", "gd_seam"):
        gd = GdNeck(
            rng,
            config.widths,
            GdSpec(fuse_channels=config.fuse_channels, out_channels=config.neck_channels),
            dtype=dtype,
        )
        model.register_child("gd", gd)
        object.__setattr__(model, "neck", gd)
    else:
        fpn = FpnNeck(rng, config.widths, config.neck_channels, dtype=dtype)
        model.register_child("fpn", fpn)
        object.__setattr__(model, "neck", fpn)

    if variant in ("seam_only", "gd_seam"):
        head = MultiSeamHead(
            rng, config.neck_channels, config.num_classes, config.patch_sizes, dtype=dtype
        )
    else:
        head = PlainHead(rng, config.neck_channels, config.num_classes, dtype=dtype)
    model.register_child("head", head)

    model.finalize_names()
    model.set_mode(True)
    return model


# ---------------------------------------------------------------------------
# accounting


def count_params(model):
    """Exact per-top-level-module parameter counts; returns (table, total)."""
    groups = {}
    for name, p in model.named_params():
        group = name.split(".", 1)[0]
        groups[group] = groups.get(group, 0) + p.size
    return groups, sum(groups.values())


def _traced_forward(model, input_size, batch):
    prev = model.training
    model.set_mode(False)
    x = Tensor(np.zeros((batch, 3, input_size, input_size), dtype=model.config.np_dtype))
    with trace() as log, T.no_grad():
        model(x)
    model.set_mode(prev)
    return log


def trace_shapes(model, input_size, batch=1):
    """Forward a dummy input and log (node name, output shape) in call order."""
    return [(name, shape) for name, shape, _ in _traced_forward(model, input_size, batch)]


def estimate_macs(model, input_size, batch=1):
    """Analytic multiply-accumulate counts for every conv/fc node of one
    forward pass; pooling, resize and norms are not counted. Returns
    (per-node table, total)."""
    log = _traced_forward(model, input_size, batch)
    table = [(name, shape, macs) for name, shape, macs in log if macs > 0]
    return table, sum(m for _, _, m in table)


def save_model(model, prefix):
    T.save_weights(list(model.named_state()), prefix)


def load_model(model, prefix):
    nn.load_state(model, T.load_weights(prefix))
    return model
