"""Desk-scale supervised training.

Anchor-free single-positive assignment: each ground-truth box goes to one
level by size (longer side <= 24 px -> stride 8, <= 96 -> stride 16, else
stride 32) and to the cell containing its center; collisions keep the larger
box. The loss combines 1-IoU box regression on positive cells with
binary-cross-entropy objectness (normalized by cell count) and class terms
(normalized by positive count). SGD uses momentum 0.9 with a 3-epoch linear
warmup and constant rate afterwards; early stopping tracks validation mAP50.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .boxes import box_area
from .errors import NumericError
from .evaluation import evaluate
from .seam_head import decode_all
from .tensor import Tensor, make_velocities, sgd_step

STRIDES = (8, 16, 32)
LEVEL_SIZE_BOUNDS = (24.0, 96.0)  # longer-side cutoffs for strides 8 and 16


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 8
    seed: int = 0
    early_stop_patience: int = 10
    loss_weights: tuple = (5.0, 10.0, 1.0)  # box, obj, cls
    warmup_epochs: int = 3


def assign_targets(gts, grids, num_classes, strides=STRIDES, dtype=np.float64):
    """Per-level dense target maps for one image.

    Returns (targets, n_pos, collisions): targets is a list over levels of
    dicts with obj (1,h,w), cls (nc,h,w), ltrb (4,h,w) in stride units, and
    area (h,w) used for collision resolution.
    """
    targets = []
    for gh, gw in grids:
        targets.append(
            {
                "obj": np.zeros((1, gh, gw), dtype=dtype),
                "cls": np.zeros((num_classes, gh, gw), dtype=dtype),
                "ltrb": np.zeros((4, gh, gw), dtype=dtype),
                "area": np.zeros((gh, gw), dtype=dtype),
            }
        )
    n_pos = 0
    collisions = 0
    unassigned = 0
    for g in gts:
        x0, y0, x1, y1 = g.box
        longer = max(x1 - x0, y1 - y0)
        if longer <= LEVEL_SIZE_BOUNDS[0]:
            lvl = 0
        elif longer <= LEVEL_SIZE_BOUNDS[1]:
            lvl = 1
        else:
            lvl = 2
        stride = strides[lvl]
        gh, gw = grids[lvl]
        cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
        j, i = int(cx // stride), int(cy // stride)
        if not (0 <= i < gh and 0 <= j < gw):
            unassigned += 1
            continue
        area = box_area(g.box)
        tgt = targets[lvl]
        if tgt["obj"][0, i, j] > 0:
            collisions += 1
            if area <= tgt["area"][i, j]:
                continue
            tgt["cls"][:, i, j] = 0.0
        else:
            n_pos += 1
        ccx, ccy = j + 0.5, i + 0.5  # cell center, stride units
        tgt["obj"][0, i, j] = 1.0
        tgt["cls"][g.class_id, i, j] = 1.0
        tgt["ltrb"][:, i, j] = (
            ccx - x0 / stride,
            ccy - y0 / stride,
            x1 / stride - ccx,
            y1 / stride - ccy,
        )
        tgt["area"][i, j] = area
    return targets, n_pos, collisions, unassigned


def _stack_targets(per_image, dtype):
    """Batch the per-image target dicts into arrays per level."""
    levels = []
    for lvl in range(len(per_image[0])):
        levels.append(
            {
                key: np.stack([img_t[lvl][key] for img_t in per_image]).astype(dtype)
                for key in ("obj", "cls", "ltrb")
            }
        )
    return levels


def _bce_logits(z, y):
    # softplus(z) - z*y, elementwise, stable for large |z|
    return T.softplus(z) - z * y


def _pair_max(a, b):
    return a + T.relu(b - a)


def _pair_min(a, b):
    return a - T.relu(a - b)


def loss(preds, targets, weights):
    """(total, box_term, obj_term, cls_term) for one batch.

    ``preds``: raw head outputs per level (N, nc+5, h, w); ``targets``: the
    stacked maps from ``_stack_targets``. Box and class terms are normalized
    by the positive count, objectness by the total cell count.
    """
    w_box, w_obj, w_cls = weights
    n_pos = sum(float(t["obj"].sum()) for t in targets)
    total_cells = sum(int(np.prod(t["obj"].shape)) for t in targets)

    box_sum = None
    obj_sum = None
    cls_sum = None
    for lvl, (pred, tgt) in enumerate(zip(preds, targets)):
        if not np.isfinite(pred.data).all():
            raise NumericError(f"loss: non-finite prediction at level {lvl}")
        n, c, gh, gw = pred.shape
        parts = T.split_channels(pred, [4, 1, c - 5])
        raw_ltrb, obj_logit, cls_logit = parts

        tobj = Tensor(tgt["obj"])
        obj_l = _bce_logits(obj_logit, tobj).sum()
        obj_sum = obj_l if obj_sum is None else obj_sum + obj_l

        mask = tgt["obj"]  # (N,1,h,w), 1 at positive cells
        if mask.any():
            tmask = Tensor(mask)
            cls_l = (_bce_logits(cls_logit, Tensor(tgt["cls"])) * tmask).sum()
            cls_sum = cls_l if cls_sum is None else cls_sum + cls_l

            # IoU between decoded and target boxes, in stride units
            dist = T.softplus(raw_ltrb)
            pl, pt, pr, pb = T.split_channels(dist, [1, 1, 1, 1])
            cx = Tensor(np.broadcast_to((np.arange(gw) + 0.5)[None, None, None, :], (n, 1, gh, gw)).copy())
            cy = Tensor(np.broadcast_to((np.arange(gh) + 0.5)[None, None, :, None], (n, 1, gh, gw)).copy())
            px0, py0 = cx - pl, cy - pt
            px1, py1 = cx + pr, cy + pb

            tl, tt, tr, tb = (tgt["ltrb"][:, k : k + 1] for k in range(4))
            ccx = (np.arange(gw) + 0.5)[None, None, None, :]
            ccy = (np.arange(gh) + 0.5)[None, None, :, None]
            tx0, ty0 = Tensor(ccx - tl), Tensor(ccy - tt)
            tx1, ty1 = Tensor(ccx + tr), Tensor(ccy + tb)
            t_area = (tgt["ltrb"][:, 0:1] + tgt["ltrb"][:, 2:3]) * (
                tgt["ltrb"][:, 1:2] + tgt["ltrb"][:, 3:4]
            )

            iw = T.relu(_pair_min(px1, tx1) - _pair_max(px0, tx0))
            ih = T.relu(_pair_min(py1, ty1) - _pair_max(py0, ty0))
            inter = iw * ih
            p_area = (pl + pr) * (pt + pb)
            union = p_area + Tensor(t_area) - inter
            iou_map = inter / (union + 1e-9)
            box_l = ((1.0 - iou_map) * tmask).sum()
            box_sum = box_l if box_sum is None else box_sum + box_l

    obj_term = obj_sum * (1.0 / total_cells)
    denom = max(n_pos, 1.0)
    box_term = box_sum * (1.0 / denom) if box_sum is not None else Tensor(0.0)
    cls_term = cls_sum * (1.0 / denom) if cls_sum is not None else Tensor(0.0)
    total = box_term * w_box + obj_term * w_obj + cls_term * w_cls
    return total, float(box_term.data), float(obj_term.data), float(cls_term.data)


@dataclass
class EpochRecord:
    epoch: int
    loss_total: float
    loss_box: float
    loss_obj: float
    loss_cls: float
    val_recall: float
    val_map50: float
    val_map5095: float


@dataclass
class History:
    records: list
    best_epoch: int
    best_map50: float
    stopped_early: bool
    seconds: float

    def to_csv(self):
        lines = ["epoch,loss_total,loss_box,loss_obj,loss_cls,val_recall,val_map50,val_map5095"]
        for r in self.records:
            lines.append(
                f"{r.epoch},{r.loss_total:.6f},{r.loss_box:.6f},{r.loss_obj:.6f},"
                f"{r.loss_cls:.6f},{r.val_recall:.6f},{r.val_map50:.6f},{r.val_map5095:.6f}"
            )
        return "\n".join(lines) + "\n"


def evaluate_model(model, dataset, head_spec, batch_size=8):
    """Run inference over a dataset and score it (infer mode, no autodiff)."""
    prev = model.training
    model.set_mode(False)
    dtype = model.config.np_dtype
    det_by_image = {}
    gt_by_image = {}
    with T.no_grad():
        for start in range(0, len(dataset), batch_size):
            chunk = list(range(start, min(start + batch_size, len(dataset))))
            batch = Tensor(np.stack([dataset.images[i] for i in chunk]).astype(dtype))
            raws = model(batch)
            for bi, idx in enumerate(chunk):
                per_level = [r.data[bi] for r in raws]
                h, w = dataset.images[idx].shape[1:]
                det_by_image[dataset.ids[idx]] = decode_all(per_level, head_spec, (h, w))
                gt_by_image[dataset.ids[idx]] = dataset.gts[idx]
    model.set_mode(prev)
    return evaluate(gt_by_image, det_by_image)


def train_loop(model, train_ds, val_ds, config: TrainConfig, head_spec=None):
    """Shuffled mini-batch SGD with per-epoch validation; keeps the weights
    of the best validation mAP50 epoch and stops after ``patience`` epochs
    without improvement. Aborts on divergence (loss > 1e6 or non-finite)."""
    if head_spec is None:
        head_spec = model.config.head_spec()
    t0 = time.time()
    rng = np.random.default_rng(config.seed)
    params = model.params()
    velocities = make_velocities(params)
    dtype = model.config.np_dtype
    size = train_ds.images[0].shape[1]
    grids = [(size // s, size // s) for s in STRIDES]

    per_image_targets = [
        assign_targets(gts, grids, model.config.num_classes, dtype=dtype)[0]
        for gts in train_ds.gts
    ]

    records = []
    best_map50 = -1.0
    best_epoch = -1
    best_state = None
    since_best = 0
    stopped = False

    for epoch in range(1, config.epochs + 1):
        model.set_mode(True)
        order = rng.permutation(len(train_ds))
        warm = min(1.0, epoch / max(config.warmup_epochs, 1))
        lr = config.lr * warm
        ep_loss = ep_box = ep_obj = ep_cls = 0.0
        n_batches = 0
        for start in range(0, len(order), config.batch_size):
            idxs = order[start : start + config.batch_size]
            batch = Tensor(np.stack([train_ds.images[i] for i in idxs]).astype(dtype))
            targets = _stack_targets([per_image_targets[i] for i in idxs], dtype)
            preds = model(batch)
            total, lb, lo, lc = loss(preds, targets, config.loss_weights)
            tval = float(total.data)
            if not np.isfinite(tval) or tval > 1e6:
                raise NumericError(
                    f"training diverged at epoch {epoch}, batch {n_batches}: loss={tval}"
                )
            model.zero_grads()
            T.backward(total)
            sgd_step(
                params,
                [p.grad for p in params],
                velocities,
                lr,
                momentum=config.momentum,
                weight_decay=config.weight_decay,
            )
            ep_loss += tval
            ep_box += lb
            ep_obj += lo
            ep_cls += lc
            n_batches += 1

        report = evaluate_model(model, val_ds, head_spec, batch_size=config.batch_size)
        val_map50 = report.map50 if report.map50 is not None else 0.0
        val_map5095 = report.map50_95 if report.map50_95 is not None else 0.0
        records.append(
            EpochRecord(
                epoch,
                ep_loss / max(n_batches, 1),
                ep_box / max(n_batches, 1),
                ep_obj / max(n_batches, 1),
                ep_cls / max(n_batches, 1),
                report.recall,
                val_map50,
                val_map5095,
            )
        )

        if val_map50 > best_map50:
            best_map50 = val_map50
            best_epoch = epoch
            best_state = [(name, arr.copy()) for name, arr in model.named_state()]
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.early_stop_patience:
                stopped = True
                break

    if best_state is not None:
        from .nn import load_state

        load_state(model, dict(best_state))
    return History(records, best_epoch, best_map50, stopped, time.time() - t0)
