"""Encoder ablation: the ViT encoder against raw-patch passthrough.

Both runs share data, seed and optimisation budget. The reported gap is
train minus val modified accuracy, averaged over the last ``tail`` epochs so a
single noisy epoch does not decide the comparison.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .config import RunConfig
from .data import SampleRecord, generate_corpus
from .train import TrainResult, train

FIELDS = ["encoder", "epochs", "train_accuracy", "val_accuracy", "gap", "tail_gap", "seconds"]


@dataclass
class AblationResult:
    rows: list[dict]
    runs: dict[str, TrainResult]

    @property
    def gap_difference(self) -> float:
        by = {r["encoder"]: r for r in self.rows}
        return by["passthrough"]["tail_gap"] - by["vit"]["tail_gap"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(FIELDS)
        for r in self.rows:
            w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in FIELDS])
        return buf.getvalue()


def _acc(v) -> float:
    return float(v) if isinstance(v, (int, float)) else 0.0


def summarize(encoder: str, res: TrainResult, tail: int) -> dict:
    h = res.history
    gaps = [_acc(r["train_accuracy"]) - _acc(r["val_accuracy"]) for r in h]
    last = h[-1]
    return {
        "encoder": encoder,
        "epochs": len(h),
        "train_accuracy": _acc(last["train_accuracy"]),
        "val_accuracy": _acc(last["val_accuracy"]),
        "gap": gaps[-1],
        "tail_gap": sum(gaps[-tail:]) / len(gaps[-tail:]),
        "seconds": round(res.seconds, 1),
        "gaps": gaps,
    }


def run_ablation(cfg: RunConfig, out_dir: str | Path | None = None, *,
                 train_records: Sequence[SampleRecord] | None = None,
                 val_records: Sequence[SampleRecord] | None = None, tail: int = 5, log=None,
                 reuse: dict[str, TrainResult] | None = None) -> AblationResult:
    """Train both encoders; ``reuse`` supplies an already finished run per encoder."""
    if train_records is None or val_records is None:
        counts = {"train": cfg.data.counts.get("train", 0), "val": cfg.data.counts.get("val", 0)}
        recs = generate_corpus(cfg.gen_config(), counts)
        train_records = [r for r in recs if r.split == "train"]
        val_records = [r for r in recs if r.split == "val"]
    rows, runs = [], {}
    for enc in ("vit", "passthrough"):
        c = cfg.replace(model__encoder=enc)
        if reuse and enc in reuse:
            runs[enc] = reuse[enc]
            rows.append(summarize(enc, reuse[enc], tail))
            continue
        res = train(c, train_records=train_records, val_records=val_records, class_names=cfg.data.classes,
                    write_artifacts=False, log=log or (lambda s: None))
        runs[enc] = res
        rows.append(summarize(enc, res, tail))
    result = AblationResult(rows, runs)
    if out_dir is not None:
        from .plotting import plot_ablation

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.csv").write_text(result.to_csv())
        plot_ablation([{"label": r["encoder"], "epochs": list(range(1, r["epochs"] + 1)), "gaps": r["gaps"]}
                       for r in rows], out / "ablation_gap.svg")
    return result
