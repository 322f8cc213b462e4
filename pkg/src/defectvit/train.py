"""Training loop, split evaluation and run artifacts."""

from __future__ import annotations

import csv
import io
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .anchors import AnchorGrid, BBox, MinMaxScaler, assign_targets, build_anchor_grid
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint, weights_to_tensors
from .config import RunConfig, dump_toml
from .data import SampleRecord, augment, load_split, preprocess_sample, worker_count
from .losses import detection_loss
from .metrics import EvalReport
from .model import Detector, PredictParams, decode_predictions
from .optim import Adam
from .tensor import Tensor
from .vit import ConfigError

HISTORY_FIELDS = [
    "epoch",
    "train_loss", "train_cce", "train_mse", "train_accuracy", "train_mae", "train_mean_iou",
    "val_loss", "val_cce", "val_mse", "val_accuracy", "val_mae", "val_mean_iou",
    "running_loss", "step",
]


class TrainingError(RuntimeError):
    pass


@dataclass
class PreparedSplit:
    """Preprocessed images and anchor targets for a list of records."""

    records: list[SampleRecord]
    images: np.ndarray  # (n, 1, s, s)
    boxes: list[list[BBox]]  # in model-input pixels
    cls: np.ndarray  # (n, anchors, classes)
    off: np.ndarray  # (n, anchors, 4) scaled

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class SplitLoss:
    cce_sum: float = 0.0
    fg: int = 0
    sse: float = 0.0
    rows: int = 0
    images: int = 0

    def add(self, cce_raw: float, fg: int, mse: float, rows: int, images: int) -> None:
        self.cce_sum += cce_raw
        self.fg += fg
        self.sse += mse * rows
        self.rows += rows
        self.images += images

    def merge(self, other: "SplitLoss") -> None:
        self.cce_sum += other.cce_sum
        self.fg += other.fg
        self.sse += other.sse
        self.rows += other.rows
        self.images += other.images

    def parts(self, normalize_cce: bool, weight: float) -> tuple[float, float, float]:
        if normalize_cce:
            cce = self.cce_sum / self.fg if self.fg else 0.0
        else:
            cce = self.cce_sum / self.images if self.images else 0.0
        mse = self.sse / self.rows if self.rows else 0.0
        return cce + weight * mse, cce, mse


def grid_from_params(p: dict) -> AnchorGrid:
    return build_anchor_grid(p["image_size"], p["stride"], p["scales"], p["ratios"])


def raw_offsets(boxes_per_image: Sequence[Sequence[BBox]], grid: AnchorGrid, cfg: RunConfig) -> np.ndarray:
    a = cfg.anchors
    out = []
    for boxes in boxes_per_image:
        t = assign_targets(grid, boxes, a.upper, a.lower, cfg.num_classes, None)
        out.append(t.offsets[t.state == 1])
    return np.concatenate(out) if out else np.zeros((0, 4))


def prepare(records: Sequence[SampleRecord], cfg: RunConfig, grid: AnchorGrid,
            scaler: MinMaxScaler | None) -> PreparedSplit:
    size = cfg.data.image_size
    k, n_a = cfg.num_classes, len(grid)
    n = len(records)
    images = np.zeros((n, 1, size, size), np.float32)
    cls = np.zeros((n, n_a, k), np.float32)
    off = np.zeros((n, n_a, 4), np.float32)
    boxes = []
    for i, rec in enumerate(records):
        x, b = preprocess_sample(rec, size)
        images[i] = x.data
        boxes.append(b)
        if scaler is not None:
            t = assign_targets(grid, b, cfg.anchors.upper, cfg.anchors.lower, k, scaler)
            cls[i], off[i] = t.class_onehot, t.offsets
    return PreparedSplit(list(records), images, boxes, cls, off)


def build_model(cfg: RunConfig, weights: dict[str, np.ndarray] | None = None) -> Detector:
    w = weights_to_tensors(weights) if weights is not None else None
    return Detector(cfg.vit_config(), cfg.head_config(), seed=cfg.seed, encoder=cfg.model.encoder, weights=w)


def _eval_shard(model: Detector, split: PreparedSplit, lo: int, hi: int, cfg: RunConfig, grid: AnchorGrid,
                scaler: MinMaxScaler, class_names: list[str]):
    rep = EvalReport(list(class_names))
    loss = SplitLoss()
    params = PredictParams(cfg.anchors.score_threshold, cfg.anchors.nms_iou)
    if hi <= lo:
        return rep, loss, params.diagnostics["invalid_boxes"]
    out = model.forward(Tensor(split.images[lo:hi]), training=False)
    cp, op = out.class_probs.data, out.offsets.data
    _, lr = detection_loss(split.cls[lo:hi], out.class_probs, split.off[lo:hi], out.offsets)
    loss.add(lr.cce, lr.matched_anchor_count, lr.mse, lr.mse_rows, hi - lo)
    for j in range(hi - lo):
        dets = decode_predictions(cp[j], op[j], grid, scaler, params)
        rep.add_image(split.cls[lo + j], cp[j], split.boxes[lo + j], [d.box for d in dets])
    return rep, loss, params.diagnostics["invalid_boxes"]


def evaluate(model: Detector, split: PreparedSplit, cfg: RunConfig, grid: AnchorGrid, scaler: MinMaxScaler,
             class_names: list[str], workers: int | None = None) -> tuple[EvalReport, SplitLoss]:
    """Eval-mode pass over a split.

    Shards are fixed by ``batch_size`` and merged in order, so the result does
    not depend on how many worker threads ran them.
    """
    bs = cfg.optim.batch_size
    bounds = [(lo, min(lo + bs, len(split))) for lo in range(0, len(split), bs)]
    workers = worker_count() if workers is None else workers

    def run(b):
        return _eval_shard(model, split, b[0], b[1], cfg, grid, scaler, class_names)

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, bounds))
    else:
        parts = [run(b) for b in bounds]
    report, loss = EvalReport(list(class_names)), SplitLoss()
    for rep, part, _ in parts:
        report = report.merge(rep)
        loss.merge(part)
    return report, loss


def _fmt(v) -> str:
    if v is None:
        return "undefined"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def history_csv(history: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_FIELDS)
    for row in history:
        w.writerow([_fmt(row.get(k)) for k in HISTORY_FIELDS])
    return buf.getvalue()


def _better(acc, loss, best) -> bool:
    if best is None:
        return True
    a = -1.0 if acc is None else acc
    b = -1.0 if best["accuracy"] is None else best["accuracy"]
    return a > b or (a == b and loss < best["loss"])


@dataclass
class TrainResult:
    model: Detector
    scaler: MinMaxScaler
    grid: AnchorGrid
    history: list[dict]
    class_names: list[str]
    output_dir: Path
    seconds: float


def train(cfg: RunConfig, *, train_records: Sequence[SampleRecord] | None = None,
          val_records: Sequence[SampleRecord] | None = None, class_names: Sequence[str] | None = None,
          resume: str | Path | None = None, output_dir: str | Path | None = None,
          log: Callable[[str], None] | None = None, write_artifacts: bool = True) -> TrainResult:
    """Run (or resume) training and write checkpoints, history and plots.

    Records default to the ``train`` / ``val`` splits under ``cfg.data.root``.
    """
    log = log or (lambda s: print(s, file=sys.stderr))
    start_time = time.perf_counter()
    out_dir = Path(output_dir or cfg.output_dir)
    if train_records is None:
        class_names, train_records = load_split(cfg.data.root, "train", cfg.data.classes)
    if val_records is None:
        _, val_records = load_split(cfg.data.root, "val", cfg.data.classes)
    class_names = list(class_names or cfg.data.classes)
    if len(class_names) + 1 != cfg.num_classes:
        raise ConfigError(f"dataset has {len(class_names)} classes but the model expects {cfg.num_classes - 1}")
    if not train_records:
        raise TrainingError("training split is empty")
    grid = cfg.grid()

    history: list[dict] = []
    best = None
    start_epoch = 0
    if resume is not None:
        ck = load_checkpoint(resume)
        model = build_model(cfg, ck.weights)
        scaler = ck.scaler
        history = list(ck.history)
        start_epoch = ck.epoch
        best = ck.extra.get("best")
        opt = Adam(model.weights, cfg.optim.lr, tuple(cfg.optim.betas), cfg.optim.eps)
        if ck.optimizer is not None:
            opt.state.step = ck.optimizer.step
            opt.state.m = {k: v.copy() for k, v in ck.optimizer.m.items()}
            opt.state.v = {k: v.copy() for k, v in ck.optimizer.v.items()}
        log(f"resumed from {resume} at epoch {start_epoch}")
    else:
        model = build_model(cfg)
        probe = prepare(train_records, cfg, grid, None)
        scaler = MinMaxScaler.fit(raw_offsets(probe.boxes, grid, cfg))
        opt = Adam(model.weights, cfg.optim.lr, tuple(cfg.optim.betas), cfg.optim.eps)

    tr = prepare(train_records, cfg, grid, scaler)
    va = prepare(val_records, cfg, grid, scaler)
    bs = cfg.optim.batch_size
    lw, norm = cfg.loss.weight, cfg.loss.normalize_cce
    step = opt.state.step

    def checkpoint(epoch: int) -> Checkpoint:
        return Checkpoint(weights={k: t.data for k, t in model.weights.items()}, config=cfg.to_dict(),
                          scaler=scaler, grid=grid.params(), epoch=epoch, history=history, optimizer=opt.state,
                          extra={"best": best, "class_names": class_names})

    if write_artifacts:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.toml").write_text(dump_toml(cfg))

    for epoch in range(start_epoch, cfg.optim.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(tr))
        running = []
        for bi, lo in enumerate(range(0, len(tr), bs)):
            idx = order[lo:lo + bs]
            if cfg.data.augment:
                recs = [augment(tr.records[i], np.random.default_rng([cfg.seed, epoch, int(i)])) for i in idx]
                batch = prepare(recs, cfg, grid, scaler)
                x, ct, ot = batch.images, batch.cls, batch.off
            else:
                x, ct, ot = tr.images[idx], tr.cls[idx], tr.off[idx]
            out = model.forward(Tensor(x), training=True, key=(cfg.seed, step))
            total, rep = detection_loss(ct, out.class_probs, ot, out.offsets, weight=lw, normalize_cce=norm)
            if not math.isfinite(rep.total):
                raise TrainingError(f"non-finite loss at epoch {epoch + 1}, batch {bi} (step {step}): "
                                    f"cce={rep.cce} mse={rep.mse} lr={opt.lr}")
            opt.zero_grad()
            total.backward()
            opt.step()
            step += 1
            running.append(rep.total)

        tr_rep, tr_loss = evaluate(model, tr, cfg, grid, scaler, class_names)
        va_rep, va_loss = evaluate(model, va, cfg, grid, scaler, class_names)
        row = {"epoch": epoch + 1, "step": step, "running_loss": float(np.mean(running))}
        for prefix, rep_, loss_ in (("train", tr_rep, tr_loss), ("val", va_rep, va_loss)):
            tot, c, m = loss_.parts(norm, lw)
            row.update({f"{prefix}_loss": tot, f"{prefix}_cce": c, f"{prefix}_mse": m,
                        f"{prefix}_accuracy": rep_.accuracy, f"{prefix}_mae": rep_.mae,
                        f"{prefix}_mean_iou": rep_.mean_iou})
        history.append(row)
        log(f"epoch {epoch + 1}/{cfg.optim.epochs} loss {row['train_loss']:.4f}/{row['val_loss']:.4f} "
            f"acc {_fmt(row['train_accuracy'])}/{_fmt(row['val_accuracy'])} "
            f"miou {_fmt(row['val_mean_iou'])} mae {_fmt(row['val_mae'])}")
        if _better(row["val_accuracy"], row["val_loss"], best):
            best = {"epoch": epoch + 1, "accuracy": row["val_accuracy"], "loss": row["val_loss"]}
            if write_artifacts:
                save_checkpoint(out_dir / "best.ckpt", checkpoint(epoch + 1))

    final_epoch = max(start_epoch, cfg.optim.epochs)
    if write_artifacts:
        save_checkpoint(out_dir / "final.ckpt", checkpoint(final_epoch))
        (out_dir / "history.csv").write_text(history_csv(history))
        from .plotting import plot_history

        plot_history(history, out_dir)
    return TrainResult(model, scaler, grid, history, class_names, out_dir, time.perf_counter() - start_time)


@dataclass
class LoadedModel:
    model: Detector
    cfg: RunConfig
    scaler: MinMaxScaler
    grid: AnchorGrid
    class_names: list[str]


def load_model(path: str | Path) -> LoadedModel:
    """Rebuild a detector from a checkpoint alone, validating names and shapes."""
    ck = load_checkpoint(path)
    cfg = RunConfig.from_dict(ck.config)
    grid = grid_from_params(ck.grid)
    if len(grid) != cfg.head_config().num_anchors:
        raise ConfigError(f"{path}: anchor grid in checkpoint does not match its config")
    model = build_model(cfg, ck.weights)
    names = ck.extra.get("class_names") or list(cfg.data.classes)
    return LoadedModel(model, cfg, ck.scaler, grid, list(names))
