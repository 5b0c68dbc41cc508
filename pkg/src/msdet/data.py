"""Dataset plumbing: DOTA-style annotation ingestion, deterministic splits,
a seeded synthetic multi-scale scene generator, and raw/PPM image loading."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .boxes import GtBox, iou
from .errors import ConfigurationError, FormatError, ValidationError
from .tensor import Tensor

DOTA_CATEGORIES = (
    "plane", "ship", "storage-tank", "baseball-diamond", "tennis-court",
    "basketball-court", "ground-track-field", "harbor", "bridge",
    "large-vehicle", "small-vehicle", "helicopter", "roundabout",
    "soccer-ball-field", "swimming-pool",
)

_METADATA_PREFIXES = ("imagesource", "gsd")


@dataclass
class Annotation:
    image_id: str
    objects: list = field(default_factory=list)  # (quad 8 floats, category, difficult)
    warnings: int = 0

    def to_gt_boxes(self, class_map):
        out = []
        for quad, category, difficult in self.objects:
            xs, ys = quad[0::2], quad[1::2]
            out.append(
                GtBox(class_map[category], (min(xs), min(ys), max(xs), max(ys)), bool(difficult))
            )
        return out


def parse_dota(text, image_id=""):
    """Parse one annotation file: metadata lines (imagesource/gsd) are
    skipped; each object line is 8 quad coordinates, a category token and a
    0/1 difficult flag. Malformed or degenerate lines are counted, never
    fatal."""
    ann = Annotation(image_id)
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if any(line.lower().startswith(p) for p in _METADATA_PREFIXES):
            continue
        parts = line.split()
        if len(parts) != 10:
            ann.warnings += 1
            continue
        try:
            quad = [float(v) for v in parts[:8]]
            difficult = int(parts[9])
        except ValueError:
            ann.warnings += 1
            continue
        if difficult not in (0, 1) or not all(math.isfinite(v) for v in quad):
            ann.warnings += 1
            continue
        xs, ys = quad[0::2], quad[1::2]
        if min(xs) >= max(xs) or min(ys) >= max(ys):
            ann.warnings += 1  # degenerate quad, no valid horizontal hull
            continue
        ann.objects.append((quad, parts[8], difficult))
    return ann


def split(ids, seed):
    """Deterministic shuffled 8:1:1 partition: train gets floor(0.8 N),
    val the next floor(0.1 N), test the remainder."""
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise ValidationError("split: ids contain duplicates")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n = len(ids)
    n_train = int(0.8 * n)
    n_val = int(0.1 * n)
    return (
        shuffled[:n_train],
        shuffled[n_train : n_train + n_val],
        shuffled[n_train + n_val :],
    )


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class SceneSpec:
    """2-class multi-scale toy scenes: bright discs a few pixels wide and
    large dark squares, on low-frequency clutter."""

    image_size: int = 96
    classes: tuple = ("small-disc", "large-square")
    small_scale: tuple = (6, 12)
    large_scale: tuple = (40, 80)
    objects_per_image: tuple = (1, 4)
    clutter_amplitude: float = 0.12
    seed: int = 0

    def __post_init__(self):
        if min(self.small_scale + self.large_scale) <= 0:
            raise ConfigurationError("scene: scale ranges must be positive")
        if self.small_scale[1] >= self.large_scale[0]:
            raise ConfigurationError(
                "scene: small max must stay below large min (multi-scale property)"
            )

    @property
    def class_map(self):
        return {name: i for i, name in enumerate(self.classes)}


@dataclass
class SyntheticDataset:
    images: list  # float32 arrays (3, H, W) in [0, 1]
    gts: list  # list of GtBox lists
    ids: list
    class_names: tuple = ("small-disc", "large-square")
    forced_placements: int = 0

    def __len__(self):
        return len(self.images)


def _clutter(rng, size, amplitude):
    cells = -(-size // 8)
    coarse = rng.uniform(-1.0, 1.0, size=(3, cells, cells))
    img = np.kron(coarse, np.ones((8, 8)))[:, :size, :size]
    # two smoothing passes of a 3x3 box filter (edges clamped)
    for _ in range(2):
        p = np.pad(img, ((0, 0), (1, 1), (1, 1)), mode="edge")
        img = sum(
            p[:, 1 + di : 1 + di + size, 1 + dj : 1 + dj + size]
            for di in (-1, 0, 1)
            for dj in (-1, 0, 1)
        ) / 9.0
    return 0.5 + amplitude * img


def gen_synthetic(spec: SceneSpec, n_images):
    """Seeded scene generation; placements overlapping an existing box with
    IoU > 0.4 are resampled up to 100 times, then placed anyway (counted)."""
    rng = np.random.default_rng(spec.seed)
    size = spec.image_size
    images, gts, ids = [], [], []
    forced = 0
    for idx in range(n_images):
        img = _clutter(rng, size, spec.clutter_amplitude)
        boxes = []
        lo, hi = spec.objects_per_image
        for _ in range(int(rng.integers(lo, hi + 1))):
            cls = int(rng.integers(0, len(spec.classes)))
            scale = spec.small_scale if cls == 0 else spec.large_scale
            placed = None
            for attempt in range(101):
                s = int(rng.integers(scale[0], scale[1] + 1))
                s = min(s, size - 2)
                x0 = int(rng.integers(1, size - s))
                y0 = int(rng.integers(1, size - s))
                cand = (float(x0), float(y0), float(x0 + s), float(y0 + s))
                if all(iou(cand, b.box) <= 0.4 for b in boxes):
                    placed = (cand, s, x0, y0)
                    break
            if placed is None:
                forced += 1
                placed = (cand, s, x0, y0)
            cand, s, x0, y0 = placed
            color = rng.uniform(0.0, 1.0, size=3)
            if cls == 0:
                # bright warm disc
                color = np.array([0.85 + 0.15 * color[0], 0.15 * color[1], 0.15 * color[2]])
                yy, xx = np.mgrid[0:s, 0:s]
                r = s / 2.0
                mask = (yy - (s - 1) / 2.0) ** 2 + (xx - (s - 1) / 2.0) ** 2 <= r * r
            else:
                # dark cool square
                color = np.array([0.1 * color[0], 0.1 * color[1], 0.6 + 0.3 * color[2]])
                mask = np.ones((s, s), dtype=bool)
            region = img[:, y0 : y0 + s, x0 : x0 + s]
            region[:, mask] = color[:, None]
            boxes.append(GtBox(cls, cand))
        images.append(np.clip(img, 0.0, 1.0).astype(np.float32))
        gts.append(boxes)
        ids.append(f"synth_{spec.seed}_{idx:05d}")
    return SyntheticDataset(images, gts, ids, spec.classes, forced)


def toy_datasets(seed, n_total=250, image_size=96):
    """The standard toy protocol: one generated pool, split 8:1:1
    (250 -> 200/25/25)."""
    spec = SceneSpec(image_size=image_size, seed=seed)
    ds = gen_synthetic(spec, n_total)
    tr, va, te = split(list(range(n_total)), seed)

    def take(idxs):
        return SyntheticDataset(
            [ds.images[i] for i in idxs],
            [ds.gts[i] for i in idxs],
            [ds.ids[i] for i in idxs],
            ds.class_names,
        )

    return take(tr), take(va), take(te)


# ---------------------------------------------------------------------------
# image formats

RAW_MAGIC = b"MSDT"


def save_raw(path, array):
    """Planar float32 image: magic, u32 C/H/W little-endian, then C*H*W
    float32 values."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    if arr.ndim != 3:
        raise FormatError(f"save_raw: expected (C, H, W), got {arr.shape}")
    with open(path, "wb") as f:
        f.write(RAW_MAGIC)
        f.write(np.array(arr.shape, dtype="<u4").tobytes())
        f.write(arr.tobytes())


def load_image(path):
    """Load a P6 PPM or raw planar float image as a 1x3xHxW tensor in [0, 1]
    (raw payloads are returned bit-exactly as stored)."""
    with open(path, "rb") as f:
        payload = f.read()
    if payload[:4] == RAW_MAGIC:
        return _load_raw(payload, path)
    if payload[:2] == b"P6":
        return _load_ppm(payload, path)
    raise FormatError(f"{path}: unknown magic {payload[:4]!r} at byte offset 0")


def _load_raw(payload, path):
    if len(payload) < 16:
        raise FormatError(f"{path}: raw header needs 16 bytes, file has {len(payload)}")
    c, h, w = np.frombuffer(payload, dtype="<u4", count=3, offset=4)
    expected = 16 + 4 * int(c) * int(h) * int(w)
    if len(payload) != expected:
        raise FormatError(
            f"{path}: raw payload truncated, expected {expected} bytes, got {len(payload)}"
        )
    arr = np.frombuffer(payload, dtype="<f4", offset=16).reshape(int(c), int(h), int(w))
    return Tensor(arr[None].copy())


def _load_ppm(payload, path):
    # header: P6, whitespace-separated width/height/maxval, comments allowed
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(payload) and payload[pos : pos + 1].isspace():
            pos += 1
        if pos < len(payload) and payload[pos : pos + 1] == b"#":
            while pos < len(payload) and payload[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(payload) and not payload[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PPM header at byte offset {pos}")
        fields.append(payload[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(v) for v in fields)
    except ValueError:
        raise FormatError(f"{path}: non-numeric PPM header fields {fields}")
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PPM supported, maxval={maxval}")
    need = w * h * 3
    raw = payload[pos : pos + need]
    if len(raw) != need:
        raise FormatError(
            f"{path}: PPM pixel payload truncated, expected {need} bytes, got {len(raw)}"
        )
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1)
    return Tensor((arr / 255.0)[None])


# ---------------------------------------------------------------------------
# dataset directories (gen/train/eval interchange)


def save_dataset(ds: SyntheticDataset, out_dir):
    """Write images (raw planar format), a classes.txt ordering, and gt.txt
    lines `image_id class_name difficult x_min y_min x_max y_max`."""
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    with open(os.path.join(out_dir, "classes.txt"), "w") as f:
        f.writelines(name + "\n" for name in ds.class_names)
    with open(os.path.join(out_dir, "gt.txt"), "w") as gt_file:
        for img, boxes, image_id in zip(ds.images, ds.gts, ds.ids):
            save_raw(os.path.join(out_dir, "images", f"{image_id}.msdt"), img)
            for b in boxes:
                gt_file.write(
                    f"{image_id} {ds.class_names[b.class_id]} {int(b.difficult)} "
                    f"{b.box[0]:.2f} {b.box[1]:.2f} {b.box[2]:.2f} {b.box[3]:.2f}\n"
                )
    with open(os.path.join(out_dir, "ids.txt"), "w") as f:
        f.writelines(i + "\n" for i in ds.ids)


def load_dataset(path):
    with open(os.path.join(path, "classes.txt")) as f:
        class_names = tuple(line.strip() for line in f if line.strip())
    class_map = {name: i for i, name in enumerate(class_names)}
    with open(os.path.join(path, "ids.txt")) as f:
        ids = [line.strip() for line in f if line.strip()]
    gt_map = {i: [] for i in ids}
    with open(os.path.join(path, "gt.txt")) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 7:
                raise ValidationError(f"gt line needs 7 fields: {line!r}")
            image_id, name, diff = parts[0], parts[1], int(parts[2])
            if name not in class_map:
                raise ValidationError(f"gt references unknown class {name!r}")
            box = tuple(float(v) for v in parts[3:])
            gt_map.setdefault(image_id, []).append(GtBox(class_map[name], box, bool(diff)))
    images = []
    for image_id in ids:
        t = load_image(os.path.join(path, "images", f"{image_id}.msdt"))
        images.append(t.data[0].astype(np.float32))
    return SyntheticDataset(images, [gt_map[i] for i in ids], ids, class_names)
