"""Background-skipping classification and regression losses.

Both losses ignore anchors whose ground truth is background, so the huge
background population cannot swamp the handful of anchors sitting on a
defect. Accumulation runs in float64 in a fixed order (row by row, class by
class) so that padding a batch with extra background rows cannot perturb a
single bit of the result.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor

LOG_FLOOR = 1e-7


def _ordered_sum(values: np.ndarray) -> float:
    # cumsum is strictly left-to-right, unlike np.sum's pairwise scheme
    return float(np.cumsum(values)[-1]) if len(values) else 0.0


def foreground_mask(y_true: np.ndarray) -> np.ndarray:
    """True where the argmax of a one-hot row is not the last (background) class."""
    k = y_true.shape[-1]
    return np.argmax(y_true, axis=-1) != k - 1


def modified_cce(y_true, y_pred: Tensor, *, normalize: bool = False, floor: float = LOG_FLOOR) -> Tensor:
    """Summed cross-entropy over non-background anchors.

    ``y_true`` and ``y_pred`` are (batch, anchors, classes). With
    ``normalize`` the sum is divided by the number of contributing anchors.
    """
    t = np.asarray(y_true, dtype=np.float64)
    if t.shape != y_pred.shape or t.ndim != 3:
        raise ShapeError(f"modified_cce expects matching (batch, anchors, classes) shapes, got {t.shape} and {y_pred.shape}")
    k = t.shape[-1]
    t_rows = t.reshape(-1, k)
    p_rows = y_pred.data.reshape(-1, k).astype(np.float64)
    fg = np.flatnonzero(foreground_mask(t_rows))
    ts, ps = t_rows[fg], np.maximum(p_rows[fg], floor)
    logp = np.log(ps)
    acc = np.zeros(len(fg))
    for c in range(k):
        acc = acc + ts[:, c] * logp[:, c]
    loss = _ordered_sum(-acc)
    scale = 1.0 / len(fg) if (normalize and len(fg)) else 1.0
    out = Tensor._make(np.array(loss * scale), (y_pred,), "modified_cce")

    def _bw(g):
        grad = np.zeros_like(p_rows)
        live = p_rows[fg] > floor
        grad[fg] = np.where(live, -ts / ps, 0.0) * scale
        return ((y_pred, float(g) * grad.reshape(y_pred.shape)),)

    out._backward = _bw
    return out


def modified_mse(y_true, y_pred: Tensor) -> Tensor:
    """Squared error summed over rows whose true offsets are not all zero,
    divided by the number of such rows; 0 when there are none.

    Inputs are (rows, 4) or (batch, anchors, 4); the latter is flattened.
    """
    t = np.asarray(y_true, dtype=np.float64)
    if t.shape != y_pred.shape or t.shape[-1] != 4:
        raise ShapeError(f"modified_mse expects matching (..., 4) shapes, got {t.shape} and {y_pred.shape}")
    t_rows = t.reshape(-1, 4)
    p_rows = y_pred.data.reshape(-1, 4).astype(np.float64)
    row_sum = np.zeros(len(t_rows))
    for m in range(4):
        row_sum = row_sum + t_rows[:, m]
    live = np.flatnonzero(row_sum != 0)
    diff = p_rows[live] - t_rows[live]
    acc = np.zeros(len(live))
    for m in range(4):
        acc = acc + (t_rows[live, m] - p_rows[live, m]) ** 2
    count = len(live)
    loss = _ordered_sum(acc) / count if count else 0.0
    out = Tensor._make(np.array(loss), (y_pred,), "modified_mse")

    def _bw(g):
        grad = np.zeros_like(p_rows)
        if count:
            grad[live] = 2.0 * diff / count
        return ((y_pred, float(g) * grad.reshape(y_pred.shape)),)

    out._backward = _bw
    return out


def plain_mse(y_true, y_pred: Tensor) -> float:
    """Row-summed squared error averaged over every row, no skipping."""
    t = np.asarray(y_true, dtype=np.float64).reshape(-1, 4)
    p = y_pred.data.reshape(-1, 4).astype(np.float64)
    return float(np.sum((t - p) ** 2) / len(t))


@dataclass
class LossReport:
    cce: float
    mse: float
    total: float
    matched_anchor_count: int
    mse_rows: int
    weight: float = 1.0

    @property
    def mse_defined(self) -> bool:
        return self.mse_rows > 0


def detection_loss(cls_true, cls_pred: Tensor, off_true, off_pred: Tensor, *, weight: float = 1.0,
                   normalize_cce: bool = False) -> tuple[Tensor, LossReport]:
    """cce + weight * mse, plus a report of the parts."""
    cce = modified_cce(cls_true, cls_pred, normalize=normalize_cce)
    mse = modified_mse(off_true, off_pred)
    total = cce + mse * weight
    rows = np.asarray(off_true).reshape(-1, 4)
    report = LossReport(
        cce=float(cce.data),
        mse=float(mse.data),
        total=float(total.data),
        matched_anchor_count=int(np.sum(foreground_mask(np.asarray(cls_true)))),
        mse_rows=int(np.sum(rows.sum(axis=1) != 0)),
        weight=weight,
    )
    return total, report
