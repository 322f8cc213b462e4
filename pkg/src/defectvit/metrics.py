"""Detection metrics: foreground accuracy, box MAE, mean IoU, and the
evaluation report that aggregates them.

Metrics with nothing to average over return ``None`` ("undefined") rather
than a number.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .anchors import BBox, iou, iou_matrix, boxes_to_array
from .losses import _ordered_sum, foreground_mask

MATCH_IOU_FLOOR = 0.3


def accuracy_counts(y_true, y_pred) -> tuple[int, int]:
    """(correct, total) over anchors whose true class is not background."""
    t = np.asarray(y_true)
    p = np.asarray(y_pred.data if hasattr(y_pred, "data") else y_pred)
    if t.shape != p.shape:
        raise ValueError(f"shape mismatch: {t.shape} vs {p.shape}")
    k = t.shape[-1]
    t = t.reshape(-1, k)
    p = p.reshape(-1, k)
    fg = foreground_mask(t)
    correct = int(np.sum(np.argmax(p[fg], axis=1) == np.argmax(t[fg], axis=1)))
    return correct, int(fg.sum())


def modified_accuracy(y_true, y_pred) -> float | None:
    correct, total = accuracy_counts(y_true, y_pred)
    return correct / total if total else None


def _xywh(boxes: np.ndarray) -> np.ndarray:
    return np.stack([boxes[:, 0], boxes[:, 1], boxes[:, 2] - boxes[:, 0], boxes[:, 3] - boxes[:, 1]], axis=1)


def pair_abs_errors(pairs: Sequence[tuple[BBox, BBox]]) -> np.ndarray:
    """|dx| + |dy| + |dw| + |dh| for each (true, predicted) pair, top-left xywh."""
    if not pairs:
        return np.zeros(0)
    t = _xywh(boxes_to_array([a for a, _ in pairs]))
    p = _xywh(boxes_to_array([b for _, b in pairs]))
    d = np.abs(p - t)
    return ((d[:, 0] + d[:, 1]) + d[:, 2]) + d[:, 3]


def modified_mae(pairs: Sequence[tuple[BBox, BBox]]) -> float | None:
    if not pairs:
        return None
    return _ordered_sum(pair_abs_errors(pairs)) / len(pairs)


def mean_iou(pairs: Sequence[tuple[BBox, BBox]]) -> float | None:
    if not pairs:
        return None
    return sum(iou(a, b) for a, b in pairs) / len(pairs)


def match_boxes(gts: Sequence[BBox], preds: Sequence[BBox], floor: float = MATCH_IOU_FLOOR):
    """Greedy one-to-one matching by descending IoU, ignoring pairs below ``floor``.

    Returns ``(pairs, unmatched_gt_indices, unmatched_pred_indices)`` where
    each pair is ``(gt_index, pred_index)``. Ties go to the lower GT index,
    then the lower prediction index.
    """
    if not gts or not preds:
        return [], list(range(len(gts))), list(range(len(preds)))
    m = iou_matrix(boxes_to_array(gts), boxes_to_array(preds))
    pairs = []
    used_g, used_p = set(), set()
    flat = np.argsort(-m, axis=None, kind="stable")
    for f in flat:
        g, p = divmod(int(f), m.shape[1])
        if m[g, p] < floor:
            break
        if g in used_g or p in used_p:
            continue
        pairs.append((g, p))
        used_g.add(g)
        used_p.add(p)
    return (pairs, [g for g in range(len(gts)) if g not in used_g],
            [p for p in range(len(preds)) if p not in used_p])


@dataclass
class ClassCounts:
    gt_boxes: int = 0
    pred_boxes: int = 0
    matched: int = 0
    matched_same_class: int = 0
    anchors: int = 0
    anchors_correct: int = 0

    def add(self, other: "ClassCounts") -> None:
        for k in vars(self):
            setattr(self, k, getattr(self, k) + getattr(other, k))


@dataclass
class EvalReport:
    """Count-based evaluation summary; merges by adding counts."""

    class_names: list[str]
    correct: int = 0
    total: int = 0
    abs_error_sum: float = 0.0
    iou_sum: float = 0.0
    pairs: int = 0
    unmatched_gt: int = 0
    unmatched_pred: int = 0
    images: int = 0
    per_class: dict[str, ClassCounts] = field(default_factory=dict)

    def __post_init__(self):
        for name in self.class_names:
            self.per_class.setdefault(name, ClassCounts())

    @property
    def accuracy(self) -> float | None:
        return self.correct / self.total if self.total else None

    @property
    def mae(self) -> float | None:
        return self.abs_error_sum / self.pairs if self.pairs else None

    @property
    def mean_iou(self) -> float | None:
        return self.iou_sum / self.pairs if self.pairs else None

    def merge(self, other: "EvalReport") -> "EvalReport":
        out = EvalReport(list(self.class_names))
        for r in (self, other):
            out.correct += r.correct
            out.total += r.total
            out.abs_error_sum += r.abs_error_sum
            out.iou_sum += r.iou_sum
            out.pairs += r.pairs
            out.unmatched_gt += r.unmatched_gt
            out.unmatched_pred += r.unmatched_pred
            out.images += r.images
            for name, c in r.per_class.items():
                out.per_class.setdefault(name, ClassCounts()).add(c)
        return out

    def add_image(self, cls_true, cls_pred, gts: Sequence[BBox], preds: Sequence[BBox]) -> None:
        """Fold one image in: anchor-level accuracy plus box matching."""
        t = np.asarray(cls_true).reshape(-1, np.asarray(cls_true).shape[-1])
        p = np.asarray(cls_pred).reshape(t.shape)
        fg = foreground_mask(t)
        tc = np.argmax(t[fg], axis=1)
        pc = np.argmax(p[fg], axis=1)
        self.correct += int(np.sum(tc == pc))
        self.total += int(fg.sum())
        for i, name in enumerate(self.class_names):
            cc = self.per_class[name]
            cc.anchors += int(np.sum(tc == i))
            cc.anchors_correct += int(np.sum((tc == i) & (pc == i)))
            cc.gt_boxes += sum(1 for g in gts if g.class_id == i)
            cc.pred_boxes += sum(1 for b in preds if b.class_id == i)
        pairs, ug, up = match_boxes(gts, preds)
        matched = [(gts[g], preds[q]) for g, q in pairs]
        self.abs_error_sum += float(np.sum(pair_abs_errors(matched)))
        self.iou_sum += float(sum(iou(a, b) for a, b in matched))
        self.pairs += len(matched)
        self.unmatched_gt += len(ug)
        self.unmatched_pred += len(up)
        self.images += 1
        for a, b in matched:
            if a.class_id is not None and 0 <= a.class_id < len(self.class_names):
                cc = self.per_class[self.class_names[a.class_id]]
                cc.matched += 1
                cc.matched_same_class += int(a.class_id == b.class_id)

    # -- serialisation -------------------------------------------------------
    def metric_values(self) -> dict[str, float | str]:
        def v(x):
            return "undefined" if x is None else x

        return {"accuracy": v(self.accuracy), "mae": v(self.mae), "mean_iou": v(self.mean_iou)}

    def to_dict(self) -> dict:
        return {
            **self.metric_values(),
            "counts": {
                "images": self.images,
                "correct_anchors": self.correct,
                "foreground_anchors": self.total,
                "matched_pairs": self.pairs,
                "unmatched_gt": self.unmatched_gt,
                "unmatched_pred": self.unmatched_pred,
                "abs_error_sum": self.abs_error_sum,
                "iou_sum": self.iou_sum,
            },
            "per_class": {name: vars(c).copy() for name, c in self.per_class.items()},
            "class_names": list(self.class_names),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        c = d["counts"]
        r = cls(list(d["class_names"]), correct=c["correct_anchors"], total=c["foreground_anchors"],
                abs_error_sum=c["abs_error_sum"], iou_sum=c["iou_sum"], pairs=c["matched_pairs"],
                unmatched_gt=c["unmatched_gt"], unmatched_pred=c["unmatched_pred"], images=c["images"])
        r.per_class = {k: ClassCounts(**v) for k, v in d["per_class"].items()}
        return r

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def csv_rows(self) -> list[tuple[str, str, str]]:
        """(section, key, value) rows; floats use repr so they re-parse exactly."""
        rows = [("metric", k, repr(v) if isinstance(v, float) else str(v)) for k, v in self.metric_values().items()]
        for k, v in self.to_dict()["counts"].items():
            rows.append(("count", k, repr(v)))
        for name, cc in self.per_class.items():
            for k, v in vars(cc).items():
                rows.append((f"class:{name}", k, str(v)))
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["section", "key", "value"])
        w.writerows(self.csv_rows())
        return buf.getvalue()

    def same_as(self, other: "EvalReport") -> bool:
        return self.to_dict() == other.to_dict()
