"""Anchor grid, IoU, target assignment, offset coding, min-max scaling and NMS.

Boxes travel as ``(n, 4)`` float arrays in corner form ``x1, y1, x2, y2``
(pixels, origin top-left). :class:`BBox` is the single-box view used at API
edges.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

BACKGROUND, ASSIGNED, DISCARDED = 0, 1, 2
STATE_NAMES = {BACKGROUND: "background", ASSIGNED: "assigned", DISCARDED: "discarded"}


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float
    class_id: int | None = None

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return max(0.0, self.width) * max(0.0, self.height)

    def is_valid(self) -> bool:
        return self.x1 < self.x2 and self.y1 < self.y2

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    def xywh(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.width, self.height)

    @classmethod
    def from_array(cls, a, class_id: int | None = None) -> "BBox":
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]), class_id)


def boxes_to_array(boxes: Sequence[BBox]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 4))
    return np.array([[b.x1, b.y1, b.x2, b.y2] for b in boxes], dtype=np.float64)


# ---------------------------------------------------------------------------
# IoU
# ---------------------------------------------------------------------------

def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (n, 4) and (m, 4) corner-form arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(inter > 0, inter / union, 0.0)
    return out


# ---------------------------------------------------------------------------
# anchor grid
# ---------------------------------------------------------------------------

@dataclass
class AnchorGrid:
    boxes: np.ndarray
    image_size: int
    grid_stride: int
    scales: list[float]
    aspect_ratios: list[float]

    def __len__(self) -> int:
        return len(self.boxes)

    @property
    def anchors(self) -> list[BBox]:
        return [BBox.from_array(b) for b in self.boxes]

    def params(self) -> dict:
        return {
            "image_size": self.image_size,
            "stride": self.grid_stride,
            "scales": list(self.scales),
            "ratios": list(self.aspect_ratios),
        }


def build_anchor_grid(image_size: int, stride: int, scales: Sequence[float],
                      ratios: Sequence[float]) -> AnchorGrid:
    """One anchor per (cell, scale, ratio), centred on cell centres and clipped.

    A ratio is width / height; an anchor of scale ``s`` keeps area ``s**2``
    before clipping.
    """
    if stride <= 0 or image_size % stride:
        raise ValueError(f"stride {stride} must divide image_size {image_size}")
    if not scales or not ratios:
        raise ValueError("scales and ratios must be non-empty")
    cells = image_size // stride
    rows = []
    for cy in range(cells):
        for cx in range(cells):
            xc = (cx + 0.5) * stride
            yc = (cy + 0.5) * stride
            for s in scales:
                for r in ratios:
                    if r <= 0 or s <= 0:
                        raise ValueError(f"scale {s} / ratio {r} must be positive")
                    w = s * math.sqrt(r)
                    h = s / math.sqrt(r)
                    rows.append([xc - w / 2, yc - h / 2, xc + w / 2, yc + h / 2])
    boxes = np.clip(np.array(rows, dtype=np.float64), 0.0, float(image_size))
    bad = (boxes[:, 2] <= boxes[:, 0]) | (boxes[:, 3] <= boxes[:, 1])
    if bad.any():
        raise ValueError(f"anchor {int(np.argmax(bad))} has zero area after clipping")
    return AnchorGrid(boxes, image_size, stride, [float(s) for s in scales], [float(r) for r in ratios])


# ---------------------------------------------------------------------------
# offsets
# ---------------------------------------------------------------------------

def encode_offsets(anchor, gt) -> np.ndarray:
    """Corner displacements divided by anchor width/height.

    Works on single boxes (``BBox`` or length-4 arrays) or row-aligned
    ``(n, 4)`` arrays.
    """
    a = anchor.as_array() if isinstance(anchor, BBox) else np.asarray(anchor, dtype=np.float64)
    g = gt.as_array() if isinstance(gt, BBox) else np.asarray(gt, dtype=np.float64)
    aw = a[..., 2] - a[..., 0]
    ah = a[..., 3] - a[..., 1]
    d = g - a
    return np.stack([d[..., 0] / aw, d[..., 1] / ah, d[..., 2] / aw, d[..., 3] / ah], axis=-1)


def decode_offsets(anchor, offsets) -> np.ndarray:
    """Exact inverse of :func:`encode_offsets`. Returns corner-form array(s)."""
    a = anchor.as_array() if isinstance(anchor, BBox) else np.asarray(anchor, dtype=np.float64)
    o = np.asarray(offsets, dtype=np.float64)
    aw = a[..., 2] - a[..., 0]
    ah = a[..., 3] - a[..., 1]
    return np.stack([a[..., 0] + o[..., 0] * aw, a[..., 1] + o[..., 1] * ah,
                     a[..., 2] + o[..., 2] * aw, a[..., 3] + o[..., 3] * ah], axis=-1)


def decode_box(anchor: BBox, offsets) -> BBox | None:
    """Decode one box; ``None`` flags a degenerate result the caller should drop."""
    box = BBox.from_array(decode_offsets(anchor, offsets))
    return box if box.is_valid() else None


@dataclass
class MinMaxScaler:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        self.min = np.asarray(self.min, dtype=np.float64).reshape(4)
        self.max = np.asarray(self.max, dtype=np.float64).reshape(4)
        for i in range(4):
            if not self.max[i] > self.min[i]:
                raise ValueError(f"scaler channel {i} has max {self.max[i]} <= min {self.min[i]}")

    @classmethod
    def fit(cls, all_offsets) -> "MinMaxScaler":
        x = np.asarray(all_offsets, dtype=np.float64).reshape(-1, 4)
        if len(x) == 0:
            raise ValueError("cannot fit scaler on an empty offset set")
        lo, hi = x.min(axis=0), x.max(axis=0)
        for i in range(4):
            if hi[i] == lo[i]:
                raise ValueError(f"offset channel {i} is constant ({lo[i]}); cannot fit min-max scaler")
        return cls(lo, hi)

    def apply(self, offsets) -> np.ndarray:
        x = np.asarray(offsets, dtype=np.float64)
        return np.clip((x - self.min) / (self.max - self.min), 0.0, 1.0)

    def invert(self, scaled) -> np.ndarray:
        return np.asarray(scaled, dtype=np.float64) * (self.max - self.min) + self.min

    def to_dict(self) -> dict:
        return {"min": self.min.tolist(), "max": self.max.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "MinMaxScaler":
        return cls(np.array(d["min"]), np.array(d["max"]))


def fit_scaler(all_offsets) -> MinMaxScaler:
    return MinMaxScaler.fit(all_offsets)


# ---------------------------------------------------------------------------
# target assignment
# ---------------------------------------------------------------------------

@dataclass
class AnchorTargets:
    class_onehot: np.ndarray
    offsets: np.ndarray
    state: np.ndarray
    gt_index: np.ndarray = field(default=None)

    @property
    def num_assigned(self) -> int:
        return int(np.sum(self.state == ASSIGNED))


def match_anchors(anchors: np.ndarray, gts: np.ndarray, upper: float, lower: float):
    """Per-anchor state and matched GT index (-1 where none).

    Threshold rule: IoU > upper assigns, IoU < lower is background, anything
    in between is discarded. Every GT then claims its best anchor (lowest
    anchor index on ties) even below ``upper``; when two GTs claim one
    anchor the larger IoU wins, then the lower GT index.
    """
    if not 0.0 <= lower < upper <= 1.0:
        raise ValueError(f"need 0 <= lower < upper <= 1, got lower={lower}, upper={upper}")
    n = len(anchors)
    if len(gts) == 0:
        return np.full(n, BACKGROUND, dtype=np.int8), np.full(n, -1, dtype=np.int64)
    ious = iou_matrix(anchors, gts)
    best = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best]
    state = np.where(best_iou > upper, ASSIGNED, np.where(best_iou < lower, BACKGROUND, DISCARDED)).astype(np.int8)
    gt_index = np.where(state == ASSIGNED, best, -1).astype(np.int64)
    forced: dict[int, int] = {}
    for g in range(ious.shape[1]):
        a = int(ious[:, g].argmax())
        if ious[a, g] <= 0:
            continue
        if a not in forced or ious[a, g] > ious[a, forced[a]]:
            forced[a] = g
    for a, g in forced.items():
        state[a] = ASSIGNED
        gt_index[a] = g
    return state, gt_index


def assign_targets(grid: AnchorGrid | np.ndarray, gts: Sequence[BBox], upper: float, lower: float,
                   num_classes: int, scaler: MinMaxScaler | None) -> AnchorTargets:
    """Training targets for one image.

    ``num_classes`` includes background, which is the last index. With
    ``scaler=None`` the offsets are left raw (used to fit the scaler).
    """
    anchors = grid.boxes if isinstance(grid, AnchorGrid) else np.asarray(grid, dtype=np.float64)
    gt_arr = boxes_to_array(list(gts))
    state, gt_index = match_anchors(anchors, gt_arr, upper, lower)
    n = len(anchors)
    onehot = np.zeros((n, num_classes), dtype=np.float32)
    offsets = np.zeros((n, 4), dtype=np.float32)
    bg = num_classes - 1
    onehot[:, bg] = 1.0
    idx = np.flatnonzero(state == ASSIGNED)
    if len(idx):
        classes = [gts[g].class_id for g in gt_index[idx]]
        bad = [c for c in classes if c is None or not 0 <= c < bg]
        if bad:
            raise ValueError(f"ground-truth class ids must lie in [0, {bg}), got {bad[0]!r}")
        onehot[idx, bg] = 0.0
        onehot[idx, np.array(classes, dtype=np.int64)] = 1.0
        raw = encode_offsets(anchors[idx], gt_arr[gt_index[idx]])
        offsets[idx] = raw if scaler is None else scaler.apply(raw)
    return AnchorTargets(onehot, offsets, state, gt_index)


# ---------------------------------------------------------------------------
# NMS
# ---------------------------------------------------------------------------

def nms_indices(boxes: np.ndarray, classes: np.ndarray, scores: np.ndarray,
                iou_threshold: float, score_threshold: float) -> np.ndarray:
    """Indices kept by class-wise greedy NMS, sorted by descending score.

    Equal scores resolve to the lower input index.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    classes = np.asarray(classes)
    scores = np.asarray(scores, dtype=np.float64)
    cand = np.flatnonzero(scores >= score_threshold)
    order = cand[np.lexsort((cand, -scores[cand]))]
    kept: list[int] = []
    for c in np.unique(classes[order]):
        members = order[classes[order] == c]
        if len(members) == 0:
            continue
        ious = iou_matrix(boxes[members], boxes[members])
        alive = np.ones(len(members), dtype=bool)
        for i in range(len(members)):
            if not alive[i]:
                continue
            kept.append(int(members[i]))
            alive[i + 1:] &= ~(ious[i, i + 1:] > iou_threshold)
    kept_arr = np.array(kept, dtype=np.int64)
    return kept_arr[np.lexsort((kept_arr, -scores[kept_arr]))] if len(kept_arr) else kept_arr


def nms(boxes: Sequence[tuple[BBox, int, float]], iou_threshold: float,
        score_threshold: float) -> list[tuple[BBox, int, float]]:
    """Class-wise non-maximum suppression over ``(box, class_id, score)`` triples."""
    if not boxes:
        return []
    arr = boxes_to_array([b for b, _, _ in boxes])
    cls = np.array([c for _, c, _ in boxes])
    sc = np.array([s for _, _, s in boxes], dtype=np.float64)
    return [boxes[i] for i in nms_indices(arr, cls, sc, iou_threshold, score_threshold)]
