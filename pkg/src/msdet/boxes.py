"""Horizontal bounding boxes shared by the head, data layer and evaluator."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ValidationError


@dataclass(frozen=True)
class GtBox:
    class_id: int
    box: tuple  # (x_min, y_min, x_max, y_max)
    difficult: bool = False

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise ValidationError(f"GtBox: degenerate box {self.box}")


@dataclass(frozen=True)
class DetBox:
    class_id: int
    score: float
    box: tuple

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise ValidationError(f"DetBox: degenerate box {self.box}")
        if not 0.0 <= self.score <= 1.0:
            raise ValidationError(f"DetBox: score {self.score} outside [0,1]")


def box_area(box):
    return (box[2] - box[0]) * (box[3] - box[1])


def iou(a, b):
    """Intersection over union of two (x0, y0, x1, y1) boxes; 0 when disjoint."""
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (box_area(a) + box_area(b) - inter)


def format_detections(dets):
    """One line per detection: `class_id score x_min y_min x_max y_max`."""
    return [
        f"{d.class_id} {d.score:.4f} {d.box[0]:.4f} {d.box[1]:.4f} {d.box[2]:.4f} {d.box[3]:.4f}"
        for d in dets
    ]


def parse_detections(lines):
    out = []
    for line in lines:
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 6:
            raise ValidationError(f"detection line needs 6 fields: {line!r}")
        out.append(
            DetBox(int(parts[0]), float(parts[1]), tuple(float(v) for v in parts[2:]))
        )
    return out
