import json
from collections import Counter

import numpy as np
import pytest

from defectvit.anchors import BBox
from defectvit.data import (
    DEFECT_CLASSES,
    DatasetError,
    GenConfig,
    SampleRecord,
    augment,
    generate_corpus,
    generate_sample,
    generate_split,
    hflip,
    load_dataset,
    load_split,
    preprocess,
    preprocess_sample,
    render_layers,
    rot90,
    sample_rng,
    write_dataset,
)


def _local_sigma(bg):
    win = np.lib.stride_tricks.sliding_window_view(np.pad(bg, 2, mode="edge"), (5, 5))
    return float(np.std(bg - win.mean(axis=(-1, -2))))


def test_single_defect_count():
    cfg = GenConfig(classes=("scratch",), defects_per_image=(1, 1))
    for s in range(20):
        rec = generate_sample(cfg, sample_rng(cfg, s))
        assert len(rec.boxes) == 1
        assert rec.boxes[0].class_id == 0


def test_same_seed_bitwise_identical():
    cfg = GenConfig(classes=DEFECT_CLASSES)
    a = generate_sample(cfg, sample_rng(cfg, 5), seed=5)
    b = generate_sample(cfg, sample_rng(cfg, 5), seed=5)
    assert a == b
    assert a.image.tobytes() == b.image.tobytes()


def test_scratch_boxes_cover_deviating_pixels():
    cfg = GenConfig(classes=("scratch",), defects_per_image=(1, 1))
    fractions = []
    for s in range(100):
        bg, img, boxes = render_layers(cfg, sample_rng(cfg, s))
        sigma = _local_sigma(bg)
        dev = np.abs(img - bg) > 3 * sigma
        ys, xs = np.nonzero(dev)
        assert len(xs) > 0
        b = boxes[0]
        inside = (xs + 0.5 > b.x1) & (xs + 0.5 < b.x2) & (ys + 0.5 > b.y1) & (ys + 0.5 < b.y2)
        fractions.append(inside.mean())
        # tight to the support within 2 px per side
        assert b.x1 >= xs.min() - 2 and b.x2 <= xs.max() + 1 + 2
        assert b.y1 >= ys.min() - 2 and b.y2 <= ys.max() + 1 + 2
    assert min(fractions) >= 0.95


@pytest.mark.parametrize("cls", DEFECT_CLASSES)
def test_every_renderer_gives_tight_boxes(cls):
    cfg = GenConfig(classes=(cls,), defects_per_image=(1, 1))
    for s in range(15):
        bg, img, boxes = render_layers(cfg, sample_rng(cfg, s))
        dev = np.abs(img - bg) > 3 * _local_sigma(bg)
        ys, xs = np.nonzero(dev)
        b = boxes[0]
        inside = (xs + 0.5 > b.x1) & (xs + 0.5 < b.x2) & (ys + 0.5 > b.y1) & (ys + 0.5 < b.y2)
        assert inside.mean() >= 0.95


def test_records_satisfy_invariants():
    cfg = GenConfig(classes=DEFECT_CLASSES)
    for rec in generate_split(cfg, "train", 60, workers=1):
        assert rec.boxes
        rec.validate(len(DEFECT_CLASSES))
        assert rec.image.dtype == np.float32
        assert rec.image.min() >= 0 and rec.image.max() <= 1


def test_split_seeds_disjoint():
    cfg = GenConfig()
    recs = generate_corpus(cfg, {"train": 30, "val": 10, "test": 10})
    seeds = {s: {r.seed for r in recs if r.split == s} for s in ("train", "val", "test")}
    assert not (seeds["train"] & seeds["val"]) and not (seeds["train"] & seeds["test"]) and not (seeds["val"] & seeds["test"])
    assert len({r.id for r in recs}) == 50


def test_parallel_generation_matches_serial():
    cfg = GenConfig()
    assert generate_split(cfg, "val", 16, workers=1) == generate_split(cfg, "val", 16, workers=4)


# -- I/O --------------------------------------------------------------------------

def test_roundtrip_fifty_records(tmp_path):
    cfg = GenConfig(classes=DEFECT_CLASSES, seed=3)
    recs = generate_corpus(cfg, {"train": 30, "val": 10, "test": 10})
    write_dataset(tmp_path, recs, cfg.classes)
    back = load_dataset(tmp_path, cfg.classes)
    key = lambda r: (r.split, r.id)
    assert sorted(back, key=key) == sorted(recs, key=key)


def test_load_empty_directory(tmp_path):
    assert load_dataset(tmp_path) == []
    assert load_dataset(tmp_path / "missing") == []


def test_annotations_schema(tmp_path):
    cfg = GenConfig()
    write_dataset(tmp_path, generate_split(cfg, "train", 3, workers=1), cfg.classes)
    doc = json.loads((tmp_path / "train" / "annotations.json").read_text())
    assert doc["classes"] == list(cfg.classes)
    s = doc["samples"][0]
    assert {"id", "width", "height", "boxes"} <= set(s)
    assert set(s["boxes"][0]) == {"x1", "y1", "x2", "y2", "class"}
    assert (tmp_path / "train" / "images" / f"{s['id']}.png").is_file()


def test_class_outside_config_rejected(tmp_path):
    rec = SampleRecord(np.zeros((16, 16), np.float32), [BBox(1, 1, 6, 6, 3)], split="train", id="a")
    with pytest.raises(DatasetError):
        write_dataset(tmp_path, [rec], ["scratch", "inclusion"])
    ok = SampleRecord(np.zeros((16, 16), np.float32), [BBox(1, 1, 6, 6, 1)], split="train", id="a")
    write_dataset(tmp_path, [ok], ["scratch", "inclusion"])
    with pytest.raises(DatasetError, match="do not match"):
        load_dataset(tmp_path, ["scratch"])
    path = tmp_path / "train" / "annotations.json"
    doc = json.loads(path.read_text())
    doc["samples"][0]["boxes"][0]["class"] = 5
    path.write_text(json.dumps(doc))
    with pytest.raises(DatasetError, match=r"samples\[0\]\.boxes\[0\]\.class"):
        load_dataset(tmp_path)


def test_malformed_annotation_reports_path_and_line(tmp_path):
    (tmp_path / "val").mkdir()
    path = tmp_path / "val" / "annotations.json"
    path.write_text('{\n "classes": ["scratch"],\n "samples": [,]\n}')
    with pytest.raises(DatasetError, match=r"annotations\.json: line 3"):
        load_dataset(tmp_path)
    path.write_text(json.dumps({"classes": ["scratch"], "samples": [{"id": "a", "width": 4, "boxes": []}]}))
    with pytest.raises(DatasetError, match=r"samples\[0\].*'height'"):
        load_dataset(tmp_path)


def test_missing_split_lists_available(tmp_path):
    cfg = GenConfig()
    write_dataset(tmp_path, generate_split(cfg, "train", 2, workers=1), cfg.classes)
    with pytest.raises(DatasetError, match=r"available: \['train'\]"):
        load_split(tmp_path, "test")


def test_load_accepts_external_records_without_seed(tmp_path):
    (tmp_path / "test" / "images").mkdir(parents=True)
    from PIL import Image

    Image.fromarray(np.full((20, 30), 128, np.uint8), mode="L").save(tmp_path / "test" / "images" / "x.png")
    doc = {"classes": ["scratch"], "samples": [{"id": "x", "width": 30, "height": 20,
                                                "boxes": [{"x1": 1, "y1": 2.5, "x2": 10, "y2": 12, "class": 0}]}]}
    (tmp_path / "test" / "annotations.json").write_text(json.dumps(doc))
    [rec] = load_dataset(tmp_path)
    assert rec.seed is None and rec.boxes == [BBox(1.0, 2.5, 10.0, 12.0, 0)]


# -- preprocessing ---------------------------------------------------------------

def test_preprocess_identity_scale(rng):
    rec = SampleRecord(rng.random((64, 64)).astype(np.float32), [BBox(3, 4, 20, 30, 0)])
    x, boxes = preprocess_sample(rec, 64)
    assert x.shape == (1, 64, 64)
    assert boxes == rec.boxes


def test_preprocess_halves_boxes(rng):
    rec = SampleRecord(rng.random((128, 128)).astype(np.float32), [BBox(3, 4, 20, 30, 1)])
    x, boxes = preprocess_sample(rec, 64)
    assert x.shape == (1, 64, 64)
    assert boxes == [BBox(1.5, 2, 10, 15, 1)]


def test_preprocess_constant_image():
    out = preprocess(np.full((50, 50), 0.7, np.float32), 64).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, (0.7 - 0.5) / 0.25, atol=1e-5)
    assert np.ptp(out) < 1e-5


def test_preprocess_rejects_empty():
    with pytest.raises(ValueError):
        preprocess(np.zeros((0, 5)), 64)


# -- augmentation ----------------------------------------------------------------

def _rec():
    cfg = GenConfig(classes=DEFECT_CLASSES)
    return generate_sample(cfg, sample_rng(cfg, 11), seed=11, sample_id="r")


def test_hflip_involution_and_algebra():
    rec = _rec()
    assert hflip(hflip(rec)) == rec
    b = BBox(2, 3, 10, 12, 0)
    flipped = hflip(SampleRecord(np.zeros((64, 64), np.float32), [b]))
    assert flipped.boxes == [BBox(64 - 10, 3, 64 - 2, 12, 0)]


def test_rot90_four_times_identity():
    rec = _rec()
    out = rec
    for _ in range(4):
        out = rot90(out)
    assert out == rec


def test_rot90_moves_pixels_with_boxes():
    img = np.zeros((16, 16), np.float32)
    img[2:5, 9:14] = 1.0
    rec = SampleRecord(img, [BBox(9, 2, 14, 5, 0)])
    r = rot90(rec)
    ys, xs = np.nonzero(r.image)
    b = r.boxes[0]
    assert (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1) == (b.x1, b.y1, b.x2, b.y2)


def test_augment_preserves_annotations(rng):
    cfg = GenConfig(classes=DEFECT_CLASSES)
    for rec in generate_split(cfg, "train", 40, workers=1):
        out = augment(rec, rng)
        assert len(out.boxes) == len(rec.boxes)
        assert Counter(b.class_id for b in out.boxes) == Counter(b.class_id for b in rec.boxes)
        out.validate(len(DEFECT_CLASSES))
