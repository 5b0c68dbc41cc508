"""Gradient verification suite: every differentiable op and each composite
block is compared against central finite differences (float64, h = 1e-3).

The relative error of a case is max|analytic - numeric| / max(|numeric|_inf,
1e-6); the suite passes at 1e-4. Shapes are kept tiny so the whole suite
runs in seconds.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .boxes import GtBox
from .gd_neck import GdNeck, GdSpec, Inject, Laf, fam
from .lska import LskaBlock, LskaSpec
from .nn import frozen_stats
from .seam_head import Csmm, LevelHead, MultiSeam, SeamSpec
from .tensor import BatchNormParams, ConvSpec, Tensor
from .train import assign_targets, loss

H_STEP = 1e-3
TOLERANCE = 1e-4


def _rel_err(analytic, numeric):
    scale = max(np.abs(numeric).max(), 1e-6)
    return float(np.abs(analytic - numeric).max() / scale)


def check_case(f, tensors):
    """Max relative error between backward() and finite differences over all
    listed tensors, for the scalar-valued closure ``f``."""
    for t in tensors:
        t.grad = None
    out = f()
    T.backward(out)
    analytic = {id(t): t.grad.copy() for t in tensors}
    worst = 0.0
    for t in tensors:
        fd = T.finite_diff_grad(lambda _t: f(), t, h=H_STEP)
        worst = max(worst, _rel_err(analytic[id(t)], fd.data))
    return worst


def _rand(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _probe(rng, shape):
    return Tensor(rng.standard_normal(shape))


def _weighted_sum(out, probe):
    return (out * probe).sum()


# --- op-level cases ---------------------------------------------------------


def _case_conv(seed):
    rng = np.random.default_rng(seed)
    cfgs = [
        ConvSpec(3, 4, 3, 3, padding=1),
        ConvSpec(4, 4, 3, 3, stride=2, padding=1, groups=4),
        ConvSpec(2, 4, 3, 3, padding=2, dilation=2),
        ConvSpec(4, 2, 1, 1),
        ConvSpec(3, 3, 1, 5, padding=(0, 2), groups=3),
    ]
    spec = cfgs[seed % len(cfgs)]
    x = _rand(rng, 2, spec.in_channels, 6, 6)
    w = _rand(rng, spec.out_channels, spec.in_channels // spec.groups, spec.kernel_h, spec.kernel_w)
    b = _rand(rng, spec.out_channels)
    ho, wo = spec.out_size(6, 6)
    probe = _probe(rng, (2, spec.out_channels, ho, wo))
    return lambda: _weighted_sum(T.conv2d(x, w, b, spec), probe), [x, w, b]


def _case_elementwise(seed):
    rng = np.random.default_rng(seed)
    x = _rand(rng, 2, 3, 4, 4)
    if seed % 3 == 0:
        y = _rand(rng, 2, 3, 4, 4)
    else:
        y = _rand(rng, 1, 3, 1, 1)  # per-channel broadcast
    probe = _probe(rng, (2, 3, 4, 4))
    kind = "add" if seed % 2 else "hadamard"
    return lambda: _weighted_sum(T.elementwise(x, y, kind), probe), [x, y]


def _case_divide(seed):
    rng = np.random.default_rng(seed)
    x = _rand(rng, 2, 3, 3, 3)
    y = Tensor(rng.uniform(0.5, 2.0, (2, 3, 3, 3)), requires_grad=True)
    probe = _probe(rng, (2, 3, 3, 3))
    return lambda: _weighted_sum(x / y, probe), [x, y]


def _case_concat_split(seed):
    rng = np.random.default_rng(seed)
    a = _rand(rng, 1, 2, 4, 4)
    b = _rand(rng, 1, 3, 4, 4)
    probe = _probe(rng, (1, 3, 4, 4))

    def f():
        cat = T.concat_channels([a, b])
        _, back = T.split_channels(cat, [2, 3])
        return _weighted_sum(back, probe)

    return f, [a, b]


def _case_pool(seed):
    rng = np.random.default_rng(seed)
    kind = ("avg", "max", "global_avg")[seed % 3]
    # well-separated values keep max-pool argmaxes stable across the probe step
    vals = rng.permutation(np.arange(2 * 3 * 6 * 6)) * 0.13
    x = Tensor(vals.reshape(2, 3, 6, 6) + 0.01 * rng.standard_normal((2, 3, 6, 6)),
               requires_grad=True)
    if kind == "global_avg":
        probe = _probe(rng, (2, 3, 1, 1))
        return lambda: _weighted_sum(T.pool(x, kind), probe), [x]
    probe = _probe(rng, (2, 3, 3, 3))
    return lambda: _weighted_sum(T.pool(x, kind, window=2), probe), [x]


def _case_resize(seed):
    rng = np.random.default_rng(seed)
    x = _rand(rng, 1, 3, 4, 4)
    th, tw = ((8, 8), (2, 2), (6, 3))[seed % 3]
    probe = _probe(rng, (1, 3, th, tw))
    return lambda: _weighted_sum(T.resize_nearest(x, th, tw), probe), [x]


def _case_pad_crop(seed):
    rng = np.random.default_rng(seed)
    x = _rand(rng, 1, 2, 4, 5)
    probe = _probe(rng, (1, 2, 3, 4))

    def f():
        p = T.pad2d(x, (1, 2, 0, 1))
        return _weighted_sum(T.crop2d(p, 3, 4, top=2, left=1), probe)

    return f, [x]


def _case_activation(seed):
    rng = np.random.default_rng(seed)
    kinds = ("sigmoid", "silu", "relu", "gelu_tanh_approx", "softplus")
    kind = kinds[seed % len(kinds)]
    x = _rand(rng, 2, 3, 4, 4)
    probe = _probe(rng, (2, 3, 4, 4))
    return lambda: _weighted_sum(T.activation(x, kind), probe), [x]


def _case_exp_log(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.uniform(0.5, 2.0, (2, 3, 3, 3)), requires_grad=True)
    probe = _probe(rng, (2, 3, 3, 3))
    if seed % 2:
        return lambda: _weighted_sum(T.texp(x), probe), [x]
    return lambda: _weighted_sum(T.tlog(x), probe), [x]


def _case_batch_norm(seed):
    rng = np.random.default_rng(seed)
    x = _rand(rng, 3, 4, 5, 5)
    params = BatchNormParams.create(4)
    params.running_mean[:] = rng.standard_normal(4)
    params.running_var[:] = rng.uniform(0.5, 2.0, 4)
    params.gamma.data[:] = rng.standard_normal(4)
    params.beta.data[:] = rng.standard_normal(4)
    mode = "train" if seed % 2 else "infer"
    probe = _probe(rng, (3, 4, 5, 5))
    f = lambda: _weighted_sum(T.batch_norm(x, params, mode, update_running=False), probe)
    return f, [x, params.gamma, params.beta]


def _case_reduce(seed):
    rng = np.random.default_rng(seed)
    x = _rand(rng, 2, 3, 4, 4)
    if seed % 2:
        return lambda: (x.mean(axis=(0, 2, 3)) * Tensor(np.arange(3.0))).sum(), [x]
    return lambda: x.sum(), [x]


# --- composite blocks -------------------------------------------------------


def _case_lska(seed):
    rng = np.random.default_rng(seed)
    spec = (LskaSpec(3, 7, 2), LskaSpec(2, 11, 3), LskaSpec(4, 9, 2))[seed % 3]
    block = LskaBlock(rng, spec)
    x = _rand(rng, 1, spec.channels, 6, 6)
    probe = _probe(rng, (1, spec.channels, 6, 6))
    tensors = [x, block.h5, block.v5, block.hd, block.vd, block.pw, block.pw_bias]
    return lambda: _weighted_sum(block(x), probe), tensors


def _case_gather(seed):
    rng = np.random.default_rng(seed)
    neck = GdNeck(rng, (2, 2, 2, 2), GdSpec(fuse_channels=3, out_channels=3))
    levels = [_rand(rng, 1, 2, 8, 8), _rand(rng, 1, 2, 4, 4), _rand(rng, 1, 2, 2, 2), _rand(rng, 1, 2, 1, 1)]
    probe = _probe(rng, (1, 3, 4, 4))
    params = [neck.low.block1.conv.w, neck.low.block1.norm.gamma, neck.low.block2.conv.w]

    def f():
        with frozen_stats():
            return _weighted_sum(neck.gather(levels, "low"), probe)

    return f, levels[:2] + params


def _case_inject(seed):
    rng = np.random.default_rng(seed)
    inj = Inject(rng, 3, 2, 3)
    local = _rand(rng, 1, 3, 4, 4)
    glob = _rand(rng, 1, 2, 2, 2)
    probe = _probe(rng, (1, 3, 4, 4))
    params = [inj.local_pw.w, inj.gate_pw.w, inj.gate_pw.b, inj.global_pw.w, inj.refine.conv.w]

    def f():
        with frozen_stats():
            return _weighted_sum(inj(local, glob), probe)

    return f, [local, glob] + params


def _case_laf(seed):
    rng = np.random.default_rng(seed)
    mod = Laf(rng, 3, shallow_c=2, deep_c=4)
    sh = _rand(rng, 1, 2, 8, 8)
    cur = _rand(rng, 1, 3, 4, 4)
    dp = _rand(rng, 1, 4, 2, 2)
    probe = _probe(rng, (1, 3, 4, 4))
    params = [mod.shallow_pw.w, mod.deep_pw.w, mod.fuse.w, mod.fuse.b]
    return lambda: _weighted_sum(mod(sh, cur, dp), probe), [sh, cur, dp] + params


def _case_csmm(seed):
    rng = np.random.default_rng(seed)
    patch = (1, 2, 3)[seed % 3]
    mod = Csmm(rng, 3, patch)
    x = _rand(rng, 2, 3, 6, 6)
    probe = _probe(rng, (2, 3, 6, 6))
    params = [mod.dw.w, mod.pw.w, mod.pw.b, mod.norm.gamma]

    def f():
        with frozen_stats():
            return _weighted_sum(mod(x), probe)

    return f, [x] + params


def _case_multiseam(seed):
    rng = np.random.default_rng(seed)
    mod = MultiSeam(rng, SeamSpec(3, (1, 2), 0.5))
    side = 4 if seed % 2 else 3  # odd side exercises the pad-to-patch path
    x = _rand(rng, 1, 3, side, side)
    probe = _probe(rng, (1, 3, side, side))
    params = [mod.fc1.w, mod.fc2.w, mod.fc2.b, mod.branches.p1.pw.w, mod.branches.p2.dw.w]

    def f():
        with frozen_stats():
            return _weighted_sum(mod(x), probe)

    return f, [x] + params


def _case_loss(seed):
    rng = np.random.default_rng(seed)
    grids = [(4, 4), (2, 2), (1, 1)]
    gts = [
        GtBox(0, (3.0, 4.0, 14.0, 13.0)),
        GtBox(1, (5.0, 6.0, 31.0, 30.0)),
    ]
    targets, _, _, _ = assign_targets(gts, grids, 2)
    stacked = [
        {k: t[k][None].astype(np.float64) for k in ("obj", "cls", "ltrb")} for t in targets
    ]
    preds = [_rand(rng, 1, 7, *g) for g in grids]
    # keep predicted box edges overlapping their targets but clearly offset
    # from them, so the IoU min/max kinks stay outside the probe step
    for p, t in zip(preds, stacked):
        pos = t["obj"][:, 0] > 0
        if pos.any():
            want = np.log(np.expm1(np.maximum(t["ltrb"][0][:, pos[0]], 0.2)))
            offset = rng.choice([-1.0, 1.0], size=want.shape) * rng.uniform(
                0.05, 0.15, size=want.shape
            )
            p.data[0, 0:4][:, pos[0]] = want + offset

    def f():
        total, _, _, _ = loss(preds, stacked, (5.0, 10.0, 1.0))
        return total

    return f, preds


def _case_loss_params(seed):
    rng = np.random.default_rng(seed)
    head = LevelHead(rng, 3, 2)
    x = _probe(rng, (1, 3, 4, 4))
    x.data *= 0.5
    gts = [GtBox(0, (3.0, 4.0, 14.0, 13.0))]
    targets, _, _, _ = assign_targets(gts, [(4, 4)], 2, strides=(8,))
    stacked = [{k: targets[0][k][None].astype(np.float64) for k in ("obj", "cls", "ltrb")}]
    params = [head.reg_out.w, head.reg_out.b, head.cls_out.w, head.cls_conv.conv.w]

    def f():
        with frozen_stats():
            total, _, _, _ = loss([head(Tensor(x.data))], stacked, (5.0, 10.0, 1.0))
            return total

    return f, params


SUITE = (
    ("conv2d", _case_conv),
    ("elementwise", _case_elementwise),
    ("divide", _case_divide),
    ("concat_split", _case_concat_split),
    ("pool", _case_pool),
    ("resize_nearest", _case_resize),
    ("pad_crop", _case_pad_crop),
    ("activation", _case_activation),
    ("exp_log", _case_exp_log),
    ("batch_norm", _case_batch_norm),
    ("reduce", _case_reduce),
    ("lska_block", _case_lska),
    ("gd_gather", _case_gather),
    ("gd_inject", _case_inject),
    ("gd_laf", _case_laf),
    ("csmm", _case_csmm),
    ("multiseam", _case_multiseam),
    ("detection_loss", _case_loss),
    ("loss_head_params", _case_loss_params),
)


def run_suite(instances=5, seed0=0):
    """Max relative error per suite entry over ``instances`` seeded cases."""
    results = []
    for name, factory in SUITE:
        worst = 0.0
        for k in range(instances):
            f, tensors = factory(seed0 + k)
            worst = max(worst, check_case(f, tensors))
        results.append((name, worst))
    return results
