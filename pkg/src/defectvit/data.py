"""Synthetic metal-surface defect corpus, dataset I/O, preprocessing and augmentation.

Images are single-channel float32 in [0, 1], quantised to multiples of 1/255
so that the 8-bit PNG files on disk reproduce them exactly.

On-disk layout::

    <root>/<split>/images/<id>.png
    <root>/<split>/annotations.json
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib.path import Path as PolyPath
from PIL import Image

from .anchors import BBox
from .tensor import Tensor

DEFECT_CLASSES = (
    "scratch",
    "welding_line",
    "inclusion",
    "water_spot",
    "oil_spot",
    "crescent_gap",
    "texture_variation",
    "color_variation",
)
SPLITS = ("train", "val", "test")
# per-split seed ranges never overlap
SPLIT_SEED_OFFSET = {"train": 0, "val": 1_000_000, "test": 2_000_000}
ALPHA_SUPPORT = 0.05
MIN_BOX_AREA = 9.0
MIN_BOX_SIDE = 3.0
MAX_BOX_ASPECT = 3.0

NORM_MEAN = 0.5
NORM_STD = 0.25


class DatasetError(ValueError):
    """Malformed or inconsistent dataset files."""


@dataclass
class GenConfig:
    image_size: int = 64
    classes: tuple[str, ...] = DEFECT_CLASSES[:3]
    defects_per_image: tuple[int, int] = (1, 4)
    overlap_allowed: bool = True
    max_overlap_iou: float = 0.3
    noise_level: float = 0.02
    seed: int = 0

    def __post_init__(self):
        self.classes = tuple(self.classes)
        self.defects_per_image = tuple(self.defects_per_image)
        unknown = [c for c in self.classes if c not in DEFECT_CLASSES]
        if unknown:
            raise ValueError(f"unknown defect classes {unknown}; choose from {list(DEFECT_CLASSES)}")
        lo, hi = self.defects_per_image
        if not 1 <= lo <= hi:
            raise ValueError(f"defects_per_image must satisfy 1 <= lo <= hi, got {self.defects_per_image}")

    @property
    def num_classes(self) -> int:
        """Model class count, background included."""
        return len(self.classes) + 1


@dataclass(eq=False)
class SampleRecord:
    image: np.ndarray
    boxes: list[BBox]
    seed: int | None = None
    split: str = "train"
    id: str = ""

    def __eq__(self, other):
        if not isinstance(other, SampleRecord):
            return NotImplemented
        return (self.id == other.id and self.split == other.split and self.seed == other.seed
                and self.boxes == other.boxes and self.image.shape == other.image.shape
                and self.image.dtype == other.image.dtype and np.array_equal(self.image, other.image))

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    def validate(self, num_defect_classes: int | None = None) -> None:
        h, w = self.image.shape
        for i, b in enumerate(self.boxes):
            where = f"sample {self.id!r} box {i}"
            if not b.is_valid() or b.area < MIN_BOX_AREA:
                raise DatasetError(f"{where}: degenerate box {b}")
            if b.x1 < 0 or b.y1 < 0 or b.x2 > w or b.y2 > h:
                raise DatasetError(f"{where}: box {b} outside {w}x{h} image")
            if num_defect_classes is not None and not (b.class_id is not None and 0 <= b.class_id < num_defect_classes):
                raise DatasetError(f"{where}: class {b.class_id} outside the {num_defect_classes} configured classes")


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _upsample(grid: np.ndarray, size: int) -> np.ndarray:
    """Separable bilinear upsampling of a small (gh, gw) grid to size x size."""
    gh, gw = grid.shape
    ys = np.linspace(0, gh - 1, size)
    xs = np.linspace(0, gw - 1, size)
    rows = np.stack([np.interp(xs, np.arange(gw), r) for r in grid])
    return np.stack([np.interp(ys, np.arange(gh), rows[:, j]) for j in range(size)], axis=1)


def metal_background(rng: np.random.Generator, size: int) -> np.ndarray:
    """Value-noise octaves plus horizontal brushed grain and a lighting ramp."""
    base = rng.uniform(0.45, 0.65)
    img = np.full((size, size), base)
    for cells, amp in ((3, 0.05), (6, 0.025), (12, 0.012)):
        img += amp * _upsample(rng.normal(size=(cells + 1, cells + 1)), size)
    grain = rng.normal(size=size)
    grain = np.convolve(grain, np.ones(3) / 3, mode="same")
    streak = _upsample(rng.normal(size=(size, 5)), size)
    img += 0.012 * grain[:, None] + 0.006 * streak
    gy, gx = rng.uniform(-0.04, 0.04, 2)
    lin = np.linspace(-1, 1, size)
    img += gy * lin[:, None] + gx * lin[None, :]
    return img


def _segment_distance(xx, yy, p0, p1):
    d = np.asarray(p1) - np.asarray(p0)
    t = ((xx - p0[0]) * d[0] + (yy - p0[1]) * d[1]) / max(float(d @ d), 1e-12)
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(xx - (p0[0] + t * d[0]), yy - (p0[1] + t * d[1])), t


def _line(rng, xx, yy, size, length, half_width):
    cx, cy = rng.uniform(6, size - 6, 2)
    theta = rng.uniform(0, math.pi)
    dx, dy = 0.5 * length * math.cos(theta), 0.5 * length * math.sin(theta)
    dist, t = _segment_distance(xx, yy, (cx - dx, cy - dy), (cx + dx, cy + dy))
    return np.clip(half_width + 0.5 - dist, 0.0, 1.0), t


def _render_scratch(rng, bg, xx, yy, size):
    alpha, _ = _line(rng, xx, yy, size, rng.uniform(14, 36), rng.uniform(0.5, 0.9))
    level = bg.mean()
    value = level - rng.uniform(0.3, 0.4) if rng.random() < 0.6 else level + rng.uniform(0.3, 0.35)
    return alpha, value


def _render_welding_line(rng, bg, xx, yy, size):
    alpha, t = _line(rng, xx, yy, size, rng.uniform(16, 40), rng.uniform(2.0, 3.2))
    length = 40.0
    value = 0.88 + 0.08 * np.sin(2 * math.pi * t * length / 3.0)
    return alpha, value


def _render_inclusion(rng, bg, xx, yy, size):
    n = int(rng.integers(5, 10))
    r = rng.uniform(4, 9)
    cx, cy = rng.uniform(r + 2, size - r - 2, 2)
    ang = np.sort(rng.uniform(0, 2 * math.pi, n))
    rad = r * rng.uniform(0.55, 1.0, n)
    poly = np.stack([cx + rad * np.cos(ang), cy + rad * np.sin(ang)], axis=1)
    path = PolyPath(poly)
    # 4x supersampling for anti-aliased edges
    offs = (np.arange(4) + 0.5) / 4
    alpha = np.zeros_like(xx)
    for oy in offs:
        for ox in offs:
            pts = np.stack([(xx - 0.5 + ox).ravel(), (yy - 0.5 + oy).ravel()], axis=1)
            alpha += path.contains_points(pts).reshape(xx.shape)
    return alpha / 16.0, rng.uniform(0.04, 0.14)


def _ellipse(rng, xx, yy, size, rmin, rmax):
    rx, ry = rng.uniform(rmin, rmax, 2)
    cx = rng.uniform(rx + 1, size - rx - 1)
    cy = rng.uniform(ry + 1, size - ry - 1)
    return np.sqrt(((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2)


def _render_water_spot(rng, bg, xx, yy, size):
    rho = _ellipse(rng, xx, yy, size, 4, 11)
    alpha = np.clip((1.0 - rho) * 4.0, 0.0, 1.0)
    ring = np.exp(-((rho - 0.85) / 0.12) ** 2)
    return alpha, bg.mean() + 0.18 + 0.15 * ring


def _render_oil_spot(rng, bg, xx, yy, size):
    rho = _ellipse(rng, xx, yy, size, 5, 13)
    alpha = np.clip((1.0 - rho) * 2.5, 0.0, 1.0)
    return alpha, bg.mean() - rng.uniform(0.28, 0.36)


def _render_crescent_gap(rng, bg, xx, yy, size):
    radius = rng.uniform(8, 15)
    cx, cy = rng.uniform(radius + 2, size - radius - 2, 2)
    start = rng.uniform(0, 2 * math.pi)
    span = rng.uniform(math.radians(70), math.radians(160))
    rho = np.hypot(xx - cx, yy - cy)
    phi = np.mod(np.arctan2(yy - cy, xx - cx) - start, 2 * math.pi)
    hw = rng.uniform(1.0, 1.8)
    radial = np.clip(hw + 0.5 - np.abs(rho - radius), 0.0, 1.0)
    along = np.clip(np.minimum(phi, span - phi) * radius + 0.5, 0.0, 1.0)
    return radial * along, rng.uniform(0.05, 0.15)


def _rect_mask(rng, xx, yy, size, lo, hi):
    w, h = rng.uniform(lo, hi, 2)
    x0 = rng.uniform(1, size - w - 1)
    y0 = rng.uniform(1, size - h - 1)
    ax = np.clip(np.minimum(xx + 0.5 - x0, x0 + w - (xx + 0.5)) + 0.5, 0, 1)
    ay = np.clip(np.minimum(yy + 0.5 - y0, y0 + h - (yy + 0.5)) + 0.5, 0, 1)
    return ax * ay


def _render_texture_variation(rng, bg, xx, yy, size):
    alpha = _rect_mask(rng, xx, yy, size, 10, 22)
    checker = np.sign(np.sin(xx * 1.6) * np.sin(yy * 1.6))
    return alpha, bg + 0.22 * checker + 0.05 * rng.normal(size=bg.shape)


def _render_color_variation(rng, bg, xx, yy, size):
    alpha = _rect_mask(rng, xx, yy, size, 10, 24)
    shift = rng.choice([-1.0, 1.0]) * rng.uniform(0.22, 0.3)
    return alpha, bg + shift


RENDERERS = {
    "scratch": _render_scratch,
    "welding_line": _render_welding_line,
    "inclusion": _render_inclusion,
    "water_spot": _render_water_spot,
    "oil_spot": _render_oil_spot,
    "crescent_gap": _render_crescent_gap,
    "texture_variation": _render_texture_variation,
    "color_variation": _render_color_variation,
}


def support_box(alpha: np.ndarray, threshold: float = ALPHA_SUPPORT) -> BBox | None:
    """Tight pixel-edge box around ``alpha >= threshold``; None if empty."""
    ys, xs = np.nonzero(alpha >= threshold)
    if len(xs) == 0:
        return None
    return BBox(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def _acceptable(box: BBox | None) -> bool:
    if box is None or box.width < MIN_BOX_SIDE or box.height < MIN_BOX_SIDE or box.area < MIN_BOX_AREA:
        return False
    return max(box.width / box.height, box.height / box.width) <= MAX_BOX_ASPECT


def render_layers(cfg: GenConfig, rng: np.random.Generator):
    """Background, composite (both noisy, unquantised) and annotation boxes.

    Exposed separately from :func:`generate_sample` so audits can compare a
    defect-free render with the final image.
    """
    from .anchors import iou

    size = cfg.image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    bg = metal_background(rng, size)
    img = bg.copy()
    lo, hi = cfg.defects_per_image
    k = int(rng.integers(lo, hi + 1))
    boxes: list[BBox] = []
    while len(boxes) < k:
        cls = int(rng.integers(0, len(cfg.classes)))
        render = RENDERERS[cfg.classes[cls]]
        for _ in range(100):
            alpha, value = render(rng, bg, xx, yy, size)
            box = support_box(alpha)
            if not _acceptable(box):
                continue
            if boxes and not cfg.overlap_allowed and any(iou(box, b) > 0 for b in boxes):
                continue
            if boxes and cfg.overlap_allowed and any(iou(box, b) > cfg.max_overlap_iou for b in boxes):
                continue
            break
        else:
            continue
        img = img * (1.0 - alpha) + alpha * value
        boxes.append(BBox(box.x1, box.y1, box.x2, box.y2, cls))
    noise = rng.normal(0.0, cfg.noise_level, size=(size, size))
    return np.clip(bg + noise, 0, 1), np.clip(img + noise, 0, 1), boxes


def quantize(img: np.ndarray) -> np.ndarray:
    u8 = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return from_uint8(u8)


def from_uint8(u8: np.ndarray) -> np.ndarray:
    return u8.astype(np.float32) / np.float32(255.0)


def generate_sample(cfg: GenConfig, rng: np.random.Generator, *, seed: int | None = None,
                    split: str = "train", sample_id: str = "") -> SampleRecord:
    _, img, boxes = render_layers(cfg, rng)
    return SampleRecord(quantize(img), boxes, seed=seed, split=split, id=sample_id)


def sample_rng(cfg: GenConfig, sample_seed: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, sample_seed])


def worker_count() -> int:
    env = os.environ.get("DEFECTVIT_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def generate_split(cfg: GenConfig, split: str, count: int, workers: int | None = None) -> list[SampleRecord]:
    """``count`` records whose seeds come from the split's own seed range."""
    if split not in SPLIT_SEED_OFFSET:
        raise ValueError(f"unknown split {split!r}")

    def one(i: int) -> SampleRecord:
        s = SPLIT_SEED_OFFSET[split] + i
        return generate_sample(cfg, sample_rng(cfg, s), seed=s, split=split, sample_id=f"{split}_{i:05d}")

    workers = workers or worker_count()
    if workers <= 1 or count < 8:
        return [one(i) for i in range(count)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, range(count)))


def generate_corpus(cfg: GenConfig, counts: dict[str, int]) -> list[SampleRecord]:
    out: list[SampleRecord] = []
    for split in SPLITS:
        if counts.get(split, 0):
            out.extend(generate_split(cfg, split, counts[split]))
    return out


# ---------------------------------------------------------------------------
# dataset I/O
# ---------------------------------------------------------------------------

def _annotation_doc(records: Sequence[SampleRecord], classes: Sequence[str]) -> dict:
    samples = []
    for r in records:
        entry = {
            "id": r.id,
            "width": int(r.width),
            "height": int(r.height),
            "boxes": [{"x1": b.x1, "y1": b.y1, "x2": b.x2, "y2": b.y2, "class": int(b.class_id)} for b in r.boxes],
        }
        if r.seed is not None:
            entry["seed"] = int(r.seed)
        samples.append(entry)
    return {"classes": list(classes), "samples": samples}


def write_dataset(root: str | os.PathLike, records: Sequence[SampleRecord], classes: Sequence[str]) -> dict[str, int]:
    """Write records grouped by split; returns per-split counts."""
    root = Path(root)
    by_split: dict[str, list[SampleRecord]] = {}
    for r in records:
        r.validate(len(classes))
        if not r.id:
            raise DatasetError("every record needs a non-empty id")
        by_split.setdefault(r.split, []).append(r)
    for split, recs in by_split.items():
        img_dir = root / split / "images"
        img_dir.mkdir(parents=True, exist_ok=True)
        for r in recs:
            u8 = np.round(np.clip(r.image, 0, 1) * 255.0).astype(np.uint8)
            Image.fromarray(u8, mode="L").save(img_dir / f"{r.id}.png", optimize=False)
        doc = _annotation_doc(recs, classes)
        (root / split / "annotations.json").write_text(json.dumps(doc, indent=1) + "\n")
    return {s: len(v) for s, v in by_split.items()}


def available_splits(root: str | os.PathLike) -> list[str]:
    root = Path(root)
    if not root.is_dir():
        return []
    return sorted(p.name for p in root.iterdir() if (p / "annotations.json").is_file())


def _field(d: dict, key: str, kind, where: str, path: Path):
    if key not in d:
        raise DatasetError(f"{path}: {where}: missing field {key!r}")
    v = d[key]
    if kind is float:
        ok = isinstance(v, (int, float)) and not isinstance(v, bool)
    else:
        ok = isinstance(v, kind) and not (kind is int and isinstance(v, bool))
    if not ok:
        raise DatasetError(f"{path}: {where}.{key}: expected {kind.__name__}, got {type(v).__name__}")
    return v


def load_split(root: str | os.PathLike, split: str, classes: Sequence[str] | None = None) -> tuple[list[str], list[SampleRecord]]:
    """Load one split. Returns ``(class names, records)``.

    With ``classes`` given, the file's class list must match it exactly.
    """
    path = Path(root) / split / "annotations.json"
    if not path.is_file():
        raise DatasetError(f"split {split!r} not found under {root}; available: {available_splits(root)}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise DatasetError(f"{path}: top level must be an object")
    file_classes = _field(doc, "classes", list, "top level", path)
    if not all(isinstance(c, str) for c in file_classes):
        raise DatasetError(f"{path}: classes must be strings")
    if classes is not None and list(classes) != list(file_classes):
        raise DatasetError(f"{path}: classes {file_classes} do not match configured {list(classes)}")
    samples = _field(doc, "samples", list, "top level", path)
    out = []
    for i, s in enumerate(samples):
        where = f"samples[{i}]"
        if not isinstance(s, dict):
            raise DatasetError(f"{path}: {where}: expected object")
        sid = _field(s, "id", str, where, path)
        width = _field(s, "width", int, where, path)
        height = _field(s, "height", int, where, path)
        boxes = []
        for j, b in enumerate(_field(s, "boxes", list, where, path)):
            bw = f"{where}.boxes[{j}]"
            if not isinstance(b, dict):
                raise DatasetError(f"{path}: {bw}: expected object")
            coords = [float(_field(b, k, float, bw, path)) for k in ("x1", "y1", "x2", "y2")]
            cls = _field(b, "class", int, bw, path)
            if not 0 <= cls < len(file_classes):
                raise DatasetError(f"{path}: {bw}.class: {cls} outside the {len(file_classes)} declared classes")
            boxes.append(BBox(*coords, cls))
        seed = s.get("seed")
        img_path = Path(root) / split / "images" / f"{sid}.png"
        try:
            with Image.open(img_path) as im:
                u8 = np.asarray(im.convert("L"))
        except OSError as exc:
            raise DatasetError(f"{img_path}: cannot read image ({exc})") from exc
        if u8.shape != (height, width):
            raise DatasetError(f"{path}: {where}: image is {u8.shape[1]}x{u8.shape[0]}, annotation says {width}x{height}")
        rec = SampleRecord(from_uint8(u8), boxes, seed=seed, split=split, id=sid)
        try:
            rec.validate(len(file_classes))
        except DatasetError as exc:
            raise DatasetError(f"{path}: {where}: {exc}") from exc
        out.append(rec)
    return list(file_classes), out


def load_dataset(root: str | os.PathLike, classes: Sequence[str] | None = None) -> list[SampleRecord]:
    """All records under ``root``, split by split; an empty directory gives []."""
    out: list[SampleRecord] = []
    for split in available_splits(root):
        out.extend(load_split(root, split, classes)[1])
    return out


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape
    if h == 0 or w == 0:
        raise ValueError("cannot resize an empty image")
    if (h, w) == (size, size):
        return img.astype(np.float32)
    out = Image.fromarray(img.astype(np.float32), mode="F").resize((size, size), Image.BILINEAR)
    return np.asarray(out, dtype=np.float32)


def normalize(img: np.ndarray) -> np.ndarray:
    return ((np.clip(img, 0.0, 1.0) - NORM_MEAN) / NORM_STD).astype(np.float32)


def scale_boxes(boxes: Sequence[BBox], sx: float, sy: float) -> list[BBox]:
    return [BBox(b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy, b.class_id) for b in boxes]


def preprocess(image: np.ndarray, target_size: int) -> Tensor:
    """Grayscale (h, w) image -> (1, target, target) standardised tensor."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 3:
        img = img.mean(axis=-1)
    if img.size == 0:
        raise ValueError("cannot preprocess a zero-size image")
    return Tensor(normalize(resize_bilinear(img, target_size))[None])


def preprocess_sample(record: SampleRecord, target_size: int) -> tuple[Tensor, list[BBox]]:
    sx = target_size / record.width
    sy = target_size / record.height
    boxes = record.boxes if (sx, sy) == (1.0, 1.0) else scale_boxes(record.boxes, sx, sy)
    return preprocess(record.image, target_size), boxes


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def hflip(record: SampleRecord) -> SampleRecord:
    w = record.width
    boxes = [BBox(w - b.x2, b.y1, w - b.x1, b.y2, b.class_id) for b in record.boxes]
    return SampleRecord(record.image[:, ::-1].copy(), boxes, record.seed, record.split, record.id)


def vflip(record: SampleRecord) -> SampleRecord:
    h = record.height
    boxes = [BBox(b.x1, h - b.y2, b.x2, h - b.y1, b.class_id) for b in record.boxes]
    return SampleRecord(record.image[::-1, :].copy(), boxes, record.seed, record.split, record.id)


def rot90(record: SampleRecord) -> SampleRecord:
    """Quarter turn counter-clockwise (square images)."""
    w = record.width
    boxes = [BBox(b.y1, w - b.x2, b.y2, w - b.x1, b.class_id) for b in record.boxes]
    return SampleRecord(np.rot90(record.image).copy(), boxes, record.seed, record.split, record.id)


def rescale(record: SampleRecord, factor: float) -> SampleRecord:
    """Zoom about the centre by ``factor``, keeping the canvas size; boxes clipped."""
    size = record.width
    new = max(1, int(round(size * factor)))
    s = new / size
    img = resize_bilinear(record.image, new)
    if new >= size:
        o = (new - size) // 2
        img = img[o : o + size, o : o + size]
        shift = -o
    else:
        o = (size - new) // 2
        canvas = np.full((size, size), float(np.median(record.image)), dtype=np.float32)
        canvas[o : o + new, o : o + new] = img
        img = canvas
        shift = o
    boxes = []
    for b in record.boxes:
        c = np.clip(np.array([b.x1, b.y1, b.x2, b.y2]) * s + shift, 0, size)
        boxes.append(BBox(*map(float, c), b.class_id))
    return SampleRecord(quantize(img), boxes, record.seed, record.split, record.id)


def augment(record: SampleRecord, rng: np.random.Generator, *, scale_jitter: float = 0.1,
            max_tries: int = 10) -> SampleRecord:
    """Random flips, quarter turns and +-10% zoom; redraws if a box degenerates."""
    for _ in range(max_tries):
        out = record
        if rng.random() < 0.5:
            out = hflip(out)
        if rng.random() < 0.5:
            out = vflip(out)
        for _ in range(int(rng.integers(0, 4))):
            out = rot90(out)
        factor = 1.0 + rng.uniform(-scale_jitter, scale_jitter)
        if factor != 1.0:
            out = rescale(out, factor)
        if all(_box_ok(b) for b in out.boxes):
            return out
    return record


def _box_ok(b: BBox) -> bool:
    return b.is_valid() and b.area >= MIN_BOX_AREA
