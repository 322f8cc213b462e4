"""Slow, loop-based references. Nothing here imports the code under test
beyond plain data containers."""

import math

import numpy as np


def raster_iou(a, b):
    """IoU by counting unit pixels on the integer grid."""
    xs = range(int(min(a.x1, b.x1)), int(max(a.x2, b.x2)))
    ys = range(int(min(a.y1, b.y1)), int(max(a.y2, b.y2)))
    inter = union = 0
    for y in ys:
        for x in xs:
            ina = a.x1 <= x < a.x2 and a.y1 <= y < a.y2
            inb = b.x1 <= x < b.x2 and b.y1 <= y < b.y2
            inter += ina and inb
            union += ina or inb
    return inter / union if union else 0.0


def scalar_iou(a, b):
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter)


def brute_assign(anchors, gts, upper, lower):
    """States 0 background / 1 assigned / 2 discarded and GT index per anchor."""
    n = len(anchors)
    state = [0] * n
    gidx = [-1] * n
    table = [[scalar_iou(a, g) for g in gts] for a in anchors]
    for i in range(n):
        if not gts:
            continue
        best_j, best_v = 0, table[i][0]
        for j in range(1, len(gts)):
            if table[i][j] > best_v:
                best_j, best_v = j, table[i][j]
        if best_v > upper:
            state[i], gidx[i] = 1, best_j
        elif best_v < lower:
            state[i] = 0
        else:
            state[i] = 2
    claims = {}
    for j in range(len(gts)):
        best_i, best_v = 0, table[0][j]
        for i in range(1, n):
            if table[i][j] > best_v:
                best_i, best_v = i, table[i][j]
        if best_v <= 0:
            continue
        if best_i not in claims or best_v > table[best_i][claims[best_i]]:
            claims[best_i] = j
    for i, j in claims.items():
        state[i], gidx[i] = 1, j
    return np.array(state), np.array(gidx)


def brute_nms(dets, iou_threshold, score_threshold):
    order = sorted(
        (i for i, d in enumerate(dets) if d[2] >= score_threshold),
        key=lambda i: (-dets[i][2], i),
    )
    kept = []
    for i in order:
        box, cls, _ = dets[i]
        if all(not (dets[k][1] == cls and scalar_iou(dets[k][0], box) > iou_threshold) for k in kept):
            kept.append(i)
    kept.sort(key=lambda i: (-dets[i][2], i))
    return [dets[i] for i in kept]


# -- losses and metrics, written straight from the pseudocode ------------------

def loop_cce(y_true, y_pred, floor=1e-7):
    n, m, k = y_true.shape
    bg = k - 1
    loss = 0.0
    for i in range(n):
        for j in range(m):
            if int(np.argmax(y_true[i][j])) != bg:
                acc = 0.0
                for c in range(k):
                    acc += float(y_true[i][j][c]) * math.log(max(float(y_pred[i][j][c]), floor))
                loss += -acc
    return loss


def loop_mse(y_true, y_pred):
    loss = 0.0
    count = 0
    for i in range(len(y_true)):
        s = 0.0
        for v in y_true[i]:
            s += float(v)
        if s != 0:
            acc = 0.0
            for t, p in zip(y_true[i], y_pred[i]):
                acc += (float(t) - float(p)) ** 2
            loss += acc
            count += 1
    return loss / count if count else 0.0


def loop_accuracy(y_true, y_pred):
    n, m, k = y_true.shape
    correct = total = 0
    for i in range(n):
        for j in range(m):
            t = int(np.argmax(y_true[i][j]))
            if t != k - 1:
                total += 1
                correct += int(np.argmax(y_pred[i][j])) == t
    return correct / total if total else None


def loop_mae(pairs):
    if not pairs:
        return None
    total = 0.0
    for t, p in pairs:
        tx, ty, tw, th = t.x1, t.y1, t.x2 - t.x1, t.y2 - t.y1
        px, py, pw, ph = p.x1, p.y1, p.x2 - p.x1, p.y2 - p.y1
        total += abs(px - tx) + abs(py - ty) + abs(pw - tw) + abs(ph - th)
    return total / len(pairs)


def loop_mean_iou(pairs):
    if not pairs:
        return None
    return sum(scalar_iou(t, p) for t, p in pairs) / len(pairs)
