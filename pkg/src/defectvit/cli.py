"""``defectvit generate|train|eval|predict|ablate``.

Exit codes: 0 success, 1 runtime error, 2 usage error or refusal.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError
from .config import RunConfig, load_config
from .data import SPLITS, DatasetError, generate_corpus, load_split, preprocess, write_dataset
from .vit import ConfigError

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class Refusal(Exception):
    pass


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def cmd_generate(args) -> int:
    cfg = _config(args)
    root = Path(args.out or cfg.data.root)
    if root.exists() and any(root.iterdir()):
        if not args.force:
            raise Refusal(f"{root} exists and is not empty; pass --force to overwrite")
        for split in SPLITS:
            if (root / split).is_dir():
                shutil.rmtree(root / split)
    records = generate_corpus(cfg.gen_config(), cfg.data.counts)
    counts = write_dataset(root, records, cfg.data.classes)
    for split in SPLITS:
        if split in cfg.data.counts:
            print(f"{split}: {counts.get(split, 0)}")
    print(f"wrote {root}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import train

    cfg = _config(args)
    out = Path(args.out or cfg.output_dir)
    if args.checkpoint is None and (out / "final.ckpt").exists() and not args.force:
        raise Refusal(f"{out} already holds a trained run; pass --force to overwrite or --checkpoint to resume")
    res = train(cfg, resume=args.checkpoint, output_dir=out)
    last = res.history[-1] if res.history else {}
    print(f"trained {len(res.history)} epochs in {res.seconds:.1f}s; "
          f"val accuracy {last.get('val_accuracy', 'undefined')}")
    print(f"wrote {out}/final.ckpt, {out}/best.ckpt, {out}/history.csv")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import evaluate, load_model, prepare

    if args.checkpoint is None:
        raise Refusal("eval needs --checkpoint")
    lm = load_model(args.checkpoint)
    cfg = lm.cfg
    if args.config is not None:
        cfg = cfg.replace(data__root=load_config(args.config).data.root)
    split = args.split or "test"
    names, records = load_split(cfg.data.root, split, lm.class_names)
    prepared = prepare(records, cfg, lm.grid, lm.scaler)
    report, _ = evaluate(lm.model, prepared, cfg, lm.grid, lm.scaler, names)
    out = Path(args.out or Path(cfg.output_dir) / f"eval_{split}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "report.csv").write_text(report.to_csv())
    for k, v in report.metric_values().items():
        print(f"{k}: {v}")
    print(f"wrote {out}/report.json, {out}/report.csv")
    return EXIT_OK


def load_image(path: str | Path) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.float32) / 255.0
    except (OSError, UnidentifiedImageError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc


def predict_image(lm, image: np.ndarray) -> list[dict]:
    from .model import PredictParams, predict

    h, w = image.shape
    size = lm.cfg.data.image_size
    x = preprocess(image, size).data
    params = PredictParams(lm.cfg.anchors.score_threshold, lm.cfg.anchors.nms_iou)
    dets = predict(lm.model, x, lm.scaler, lm.grid, params, scale=(w / size, h / size))
    return [{"x1": d.box.x1, "y1": d.box.y1, "x2": d.box.x2, "y2": d.box.y2, "class": d.class_id,
             "score": d.score} for d in dets]


def cmd_predict(args) -> int:
    from .plotting import plot_detections
    from .train import load_model

    if args.checkpoint is None:
        raise Refusal("predict needs --checkpoint")
    image = load_image(args.image)
    lm = load_model(args.checkpoint)
    boxes = predict_image(lm, image)
    out = Path(args.out or Path(args.image).with_suffix(".pred.json"))
    out.parent.mkdir(parents=True, exist_ok=True)
    doc = {"image": str(args.image), "width": image.shape[1], "height": image.shape[0],
           "classes": lm.class_names, "boxes": boxes}
    out.write_text(json.dumps(doc, indent=1) + "\n")
    svg = out.with_suffix(".svg")
    plot_detections(image, boxes, svg, lm.class_names)
    print(f"{len(boxes)} detections; wrote {out} and {svg}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .ablation import run_ablation

    cfg = _config(args)
    out = Path(args.out or Path(cfg.output_dir) / "ablation")
    if (out / "ablation.csv").exists() and not args.force:
        raise Refusal(f"{out}/ablation.csv exists; pass --force to overwrite")
    res = run_ablation(cfg, out)
    for row in res.rows:
        print(f"{row['encoder']}: train {row['train_accuracy']} val {row['val_accuracy']} gap {row['gap']}")
    print(f"wrote {out}/ablation.csv")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="defectvit", description="ViT + anchor-box defect detector")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, *, checkpoint=False, split=False):
        sp.add_argument("--config", help="TOML run config (defaults built in)")
        sp.add_argument("--out", help="output path")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")
        if checkpoint:
            sp.add_argument("--checkpoint", help="checkpoint file")
        if split:
            sp.add_argument("--split", help="dataset split (default: test)")

    common(sub.add_parser("generate", help="write a synthetic dataset"))
    common(sub.add_parser("train", help="train, or resume with --checkpoint"), checkpoint=True)
    common(sub.add_parser("eval", help="evaluate a checkpoint on a split"), checkpoint=True, split=True)
    sp = sub.add_parser("predict", help="detect defects in one image")
    common(sp, checkpoint=True)
    sp.add_argument("image")
    common(sub.add_parser("ablate", help="ViT vs raw-patch encoder overfitting comparison"))
    return p


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
            "ablate": cmd_ablate}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (Refusal, ConfigError) as exc:
        print(f"defectvit: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError, OSError, RuntimeError, ValueError) as exc:
        print(f"defectvit: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
