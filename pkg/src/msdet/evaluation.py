"""Detection metrics: IoU matching, precision/recall, per-class AP, mAP.

AP integrates the all-point precision envelope of the PR curve (each
precision replaced by the maximum precision at equal-or-higher recall); no
11- or 101-point sampling. mAP50 averages AP at IoU 0.50 over classes;
mAP50-95 additionally averages over the ten thresholds 0.50:0.05:0.95.
Matching follows the usual greedy rule: detections in descending score order
claim the unmatched non-difficult ground-truth box of highest IoU >= t;
detections whose best overlap >= t lands on a difficult box are dropped from
scoring entirely.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .boxes import iou

IOU_THRESHOLDS = tuple(0.5 + 0.05 * i for i in range(10))

PR_CONF_CUTOFF = 0.25  # confidence cutoff for the reported dataset P/R
PR_IOU = 0.5


@dataclass
class MatchResult:
    """Per-detection outcomes for one (image, class) slice, in descending
    score order: 'tp', 'fp', or 'ignored' (difficult-box overlap)."""

    order: list  # indices into the input detection list
    flags: list
    tp: int
    fp: int
    fn: int


def match(gts, dets, t):
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    normal = [g for g in gts if not g.difficult]
    difficult = [g for g in gts if g.difficult]
    claimed = [False] * len(normal)
    flags = []
    tp = fp = 0
    for i in order:
        d = dets[i]
        best_iou, best_j = 0.0, -1
        for j, g in enumerate(normal):
            if claimed[j]:
                continue
            v = iou(d.box, g.box)
            if v > best_iou:
                best_iou, best_j = v, j
        best_diff = 0.0
        for g in difficult:
            v = iou(d.box, g.box)
            if v > best_diff:
                best_diff = v
        if best_diff >= t and best_diff > best_iou:
            flags.append("ignored")
            continue
        if best_j >= 0 and best_iou >= t:
            claimed[best_j] = True
            flags.append("tp")
            tp += 1
        else:
            flags.append("fp")
            fp += 1
    return MatchResult(order, flags, tp, fp, len(normal) - tp)


def precision_recall(tp, fp, fn):
    """P = TP/(TP+FP), R = TP/(TP+FN); 0/0 is defined as 0 for both."""
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return p, r


def average_precision(scored_flags, n_gt):
    """AP from the dataset-wide detection list of one class.

    ``scored_flags``: (score, is_tp) pairs; ``n_gt``: non-difficult GT count.
    Sorts by descending score, builds cumulative P(R) points, applies the
    monotone envelope, and sums precision over recall increments.
    """
    if n_gt == 0:
        return None
    pts = sorted(scored_flags, key=lambda sf: -sf[0])
    if not pts:
        return 0.0
    precisions = []
    recalls = []
    tp = fp = 0
    for _, is_tp in pts:
        if is_tp:
            tp += 1
        else:
            fp += 1
        precisions.append(tp / (tp + fp))
        recalls.append(tp / n_gt)
    # monotone envelope: precision at recall r becomes max precision at >= r
    for i in range(len(precisions) - 2, -1, -1):
        precisions[i] = max(precisions[i], precisions[i + 1])
    ap = 0.0
    prev_r = 0.0
    for p, r in zip(precisions, recalls):
        ap += (r - prev_r) * p
        prev_r = r
    return ap


@dataclass
class EvalReport:
    classes: list
    ap: dict  # class_id -> {iou_threshold: AP}
    counts: dict  # class_id -> (tp, fp, fn) at PR_IOU with PR_CONF_CUTOFF
    precision: float
    recall: float
    map50: float | None
    map50_95: float | None
    no_classes: bool = False
    conf_cutoff: float = PR_CONF_CUTOFF
    notes: list = field(default_factory=list)

    def to_kv(self):
        lines = ["interpolation=all_point_envelope"]
        lines.append(f"conf_cutoff={self.conf_cutoff}")
        if self.no_classes:
            lines.append("classes=none")
            return lines
        lines.append("classes=" + ",".join(str(c) for c in self.classes))
        lines.append(f"precision={self.precision:.6f}")
        lines.append(f"recall={self.recall:.6f}")
        if self.map50 is None:
            lines.append("map50=undefined")
            lines.append("map50_95=undefined")
        else:
            lines.append(f"map50={self.map50:.6f}")
            lines.append(f"map50_95={self.map50_95:.6f}")
        for c in self.classes:
            if c in self.ap:
                for t in IOU_THRESHOLDS:
                    lines.append(f"ap.{c}.{t:.2f}={self.ap[c][t]:.6f}")
            tp, fp, fn = self.counts[c]
            lines.append(f"counts.{c}={tp},{fp},{fn}")
        return lines

    def to_table(self):
        if self.no_classes:
            return "empty dataset: no classes to evaluate\n"
        rows = [f"{'class':>8} {'AP50':>8} {'AP50-95':>8} {'TP':>5} {'FP':>5} {'FN':>5}"]
        for c in self.classes:
            tp, fp, fn = self.counts[c]
            if c in self.ap:
                ap50 = self.ap[c][IOU_THRESHOLDS[0]]
                ap_all = sum(self.ap[c][t] for t in IOU_THRESHOLDS) / len(IOU_THRESHOLDS)
                rows.append(f"{c:>8} {ap50:8.4f} {ap_all:8.4f} {tp:5d} {fp:5d} {fn:5d}")
            else:
                rows.append(f"{c:>8} {'--':>8} {'--':>8} {tp:5d} {fp:5d} {fn:5d}")
        m50 = "undefined" if self.map50 is None else f"{self.map50:.4f}"
        m5095 = "undefined" if self.map50_95 is None else f"{self.map50_95:.4f}"
        rows.append(
            f"P={self.precision:.4f} R={self.recall:.4f} "
            f"mAP50={m50} mAP50-95={m5095} "
            f"(P/R at IoU {PR_IOU}, conf >= {self.conf_cutoff})"
        )
        return "\n".join(rows) + "\n"


def evaluate(gt_by_image, det_by_image, thresholds=IOU_THRESHOLDS, conf_cutoff=PR_CONF_CUTOFF):
    """Full dataset evaluation.

    ``gt_by_image``/``det_by_image`` map image id -> box lists. Classes with
    no ground truth are excluded from mAP averaging (their detections still
    count toward dataset precision). An empty dataset yields an explicit
    ``no_classes`` report, never a silent zero.
    """
    images = sorted(set(gt_by_image) | set(det_by_image))
    classes = sorted(
        {g.class_id for img in images for g in gt_by_image.get(img, [])}
        | {d.class_id for img in images for d in det_by_image.get(img, [])}
    )
    if not classes:
        return EvalReport([], {}, {}, 0.0, 0.0, None, None, no_classes=True,
                          conf_cutoff=conf_cutoff)

    ap = {}
    counts = {}
    total_tp = total_fp = total_fn = 0
    gt_classes = []
    for c in classes:
        n_gt = sum(
            1
            for img in images
            for g in gt_by_image.get(img, [])
            if g.class_id == c and not g.difficult
        )
        # AP at each threshold from per-image matching, pooled over the dataset
        per_t = {}
        for t in thresholds:
            scored = []
            for img in images:
                gts = [g for g in gt_by_image.get(img, []) if g.class_id == c]
                dets = [d for d in det_by_image.get(img, []) if d.class_id == c]
                res = match(gts, dets, t)
                for idx, flag in zip(res.order, res.flags):
                    if flag != "ignored":
                        scored.append((dets[idx].score, flag == "tp"))
            per_t[t] = average_precision(scored, n_gt)
        if n_gt > 0:
            ap[c] = per_t
            gt_classes.append(c)

        # dataset P/R counts at the documented cutoff
        ctp = cfp = cfn = 0
        for img in images:
            gts = [g for g in gt_by_image.get(img, []) if g.class_id == c]
            dets = [
                d
                for d in det_by_image.get(img, [])
                if d.class_id == c and d.score >= conf_cutoff
            ]
            res = match(gts, dets, PR_IOU)
            ctp += res.tp
            cfp += res.fp
            cfn += res.fn
        counts[c] = (ctp, cfp, cfn)
        total_tp += ctp
        total_fp += cfp
        total_fn += cfn

    precision, recall = precision_recall(total_tp, total_fp, total_fn)
    if gt_classes:
        map50 = sum(ap[c][thresholds[0]] for c in gt_classes) / len(gt_classes)
        map50_95 = sum(
            sum(ap[c][t] for t in thresholds) / len(thresholds) for c in gt_classes
        ) / len(gt_classes)
    else:
        map50 = map50_95 = None
    return EvalReport(
        classes, ap, counts, precision, recall, map50, map50_95,
        no_classes=False, conf_cutoff=conf_cutoff,
    )
