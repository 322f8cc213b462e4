import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from defectvit.anchors import (
    ASSIGNED,
    BACKGROUND,
    DISCARDED,
    BBox,
    MinMaxScaler,
    assign_targets,
    build_anchor_grid,
    decode_box,
    decode_offsets,
    encode_offsets,
    iou,
    nms,
)

from oracles import brute_assign, brute_nms, raster_iou


# -- grid ---------------------------------------------------------------------

def test_grid_hand_example():
    g = build_anchor_grid(64, 32, [16], [1.0])
    np.testing.assert_allclose(
        g.boxes,
        [[8, 8, 24, 24], [40, 8, 56, 24], [8, 40, 24, 56], [40, 40, 56, 56]],
    )


def test_grid_count_law():
    assert len(build_anchor_grid(64, 8, [8, 16, 32], [0.5, 1, 2])) == 576
    assert len(build_anchor_grid(64, 16, [12, 24, 40], [0.5, 1.0, 2.0])) == 144


def test_grid_order_cell_then_scale_then_ratio():
    g = build_anchor_grid(32, 16, [4, 8], [0.5, 2.0])
    centres = (g.boxes[:, :2] + g.boxes[:, 2:]) / 2
    np.testing.assert_allclose(centres[:4], [[8, 8]] * 4)
    np.testing.assert_allclose(centres[4], [24, 8])
    w = g.boxes[:4, 2] - g.boxes[:4, 0]
    np.testing.assert_allclose(w, [4 * np.sqrt(0.5), 4 * np.sqrt(2), 8 * np.sqrt(0.5), 8 * np.sqrt(2)])


def test_grid_boxes_valid_after_clipping():
    g = build_anchor_grid(64, 16, [12, 24, 40], [0.5, 1.0, 2.0])
    b = g.boxes
    assert np.all(b[:, 0] < b[:, 2]) and np.all(b[:, 1] < b[:, 3])
    assert b.min() >= 0 and b.max() <= 64


def test_grid_rejects_bad_stride():
    with pytest.raises(ValueError):
        build_anchor_grid(64, 10, [8], [1.0])


# -- iou ----------------------------------------------------------------------

def test_iou_examples():
    a = BBox(0, 0, 2, 2)
    assert iou(a, a) == 1.0
    assert iou(a, BBox(5, 5, 6, 6)) == 0.0
    assert iou(a, BBox(1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-6)
    assert raster_iou(a, BBox(1, 1, 3, 3)) == pytest.approx(1 / 7)


int_box = st.tuples(st.integers(0, 20), st.integers(0, 20), st.integers(1, 12), st.integers(1, 12)).map(
    lambda t: BBox(t[0], t[1], t[0] + t[2], t[1] + t[3])
)


@settings(max_examples=200, deadline=None)
@given(int_box, int_box)
def test_iou_laws_and_raster_oracle(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == iou(b, a)
    assert iou(a, a) == 1.0
    assert abs(v - raster_iou(a, b)) < 1e-6


# -- offsets ------------------------------------------------------------------

def test_encode_examples():
    np.testing.assert_array_equal(encode_offsets(BBox(1, 2, 5, 9), BBox(1, 2, 5, 9)), [0, 0, 0, 0])
    np.testing.assert_allclose(encode_offsets(BBox(10, 10, 20, 20), BBox(12, 12, 22, 18)), [0.2, 0.2, 0.2, -0.2])


def test_decode_examples():
    np.testing.assert_allclose(decode_offsets(BBox(10, 10, 20, 20), [0, 0, 0, 0]), [10, 10, 20, 20])
    np.testing.assert_allclose(decode_offsets(BBox(10, 10, 20, 20), [0.2, 0.2, 0.2, -0.2]), [12, 12, 22, 18])
    assert decode_box(BBox(10, 10, 20, 20), [0.0, 0.0, -1.5, 0.0]) is None


def test_encode_translation_invariant(rng):
    a = np.array([3.0, 4.0, 19.0, 11.0])
    g = np.array([5.0, 2.0, 21.0, 14.0])
    shift = np.array([7.5, -3.25, 7.5, -3.25])
    np.testing.assert_allclose(encode_offsets(a, g), encode_offsets(a + shift, g + shift), atol=1e-12)


def _random_boxes(rng, n, lo=0.0, hi=64.0):
    xy = rng.uniform(lo, hi, size=(n, 2))
    wh = rng.uniform(1.0, 30.0, size=(n, 2))
    return np.concatenate([xy, xy + wh], axis=1)


def test_encode_decode_roundtrip(rng):
    anchors = _random_boxes(rng, 10_000)
    gts = _random_boxes(rng, 10_000)
    back = decode_offsets(anchors, encode_offsets(anchors, gts))
    assert np.max(np.abs(back - gts)) <= 1e-9


# -- scaler -------------------------------------------------------------------

def test_scaler_examples():
    s = MinMaxScaler.fit(np.array([[-1.0] * 4, [1.0] * 4]))
    np.testing.assert_allclose(s.apply(np.array([-1.0, 1.0, 0.0, 2.0])), [0.0, 1.0, 0.5, 1.0])


def test_scaler_roundtrip(rng):
    data = rng.normal(size=(500, 4))
    s = MinMaxScaler.fit(data)
    x = rng.uniform(data.min(axis=0), data.max(axis=0), size=(1000, 4))
    assert np.max(np.abs(s.invert(s.apply(x)) - x)) <= 1e-6


def test_scaler_constant_channel_names_channel():
    data = np.zeros((5, 4))
    data[:, [0, 1, 3]] = np.arange(5)[:, None]
    with pytest.raises(ValueError, match="channel 2"):
        MinMaxScaler.fit(data)


def test_scaler_invert_does_not_clamp():
    s = MinMaxScaler([0, 0, 0, 0], [1, 1, 1, 1])
    np.testing.assert_allclose(s.invert([1.2, -0.1, 0.5, 0.0]), [1.2, -0.1, 0.5, 0.0])


def test_full_pipeline_roundtrip(rng):
    anchors = _random_boxes(rng, 2000)
    gts = anchors + rng.uniform(-3, 3, size=(2000, 4))
    gts[:, 2:] = np.maximum(gts[:, 2:], gts[:, :2] + 0.5)
    raw = encode_offsets(anchors, gts)
    s = MinMaxScaler.fit(raw)
    back = decode_offsets(anchors, s.invert(s.apply(raw)))
    assert np.max(np.abs(back - gts)) <= 1e-5


# -- assignment ---------------------------------------------------------------

def test_assign_no_gts_all_background():
    g = build_anchor_grid(64, 16, [12, 24], [1.0])
    t = assign_targets(g, [], 0.6, 0.3, 4, None)
    assert np.all(t.state == BACKGROUND)
    assert np.all(t.offsets == 0)
    assert np.all(t.class_onehot[:, 3] == 1)


def test_assign_identity_match():
    g = build_anchor_grid(64, 32, [16], [1.0])
    s = MinMaxScaler([-1] * 4, [1] * 4)
    t = assign_targets(g, [BBox(8, 8, 24, 24, class_id=1)], 0.7, 0.3, 3, s)
    assert t.state[0] == ASSIGNED
    np.testing.assert_allclose(t.offsets[0], s.apply(np.zeros(4)))
    np.testing.assert_array_equal(t.class_onehot[0], [0, 1, 0])
    assert np.all(t.state[1:] == BACKGROUND)


def test_assign_thresholds_order():
    g = build_anchor_grid(64, 32, [16], [1.0])
    with pytest.raises(ValueError):
        assign_targets(g, [], 0.3, 0.6, 3, None)


def test_assign_row_invariants(rng):
    g = build_anchor_grid(64, 16, [12, 24, 40], [0.5, 1.0, 2.0])
    s = MinMaxScaler([-2] * 4, [2] * 4)
    for _ in range(50):
        gts = [BBox(*b, class_id=int(rng.integers(0, 3))) for b in _random_boxes(rng, 4, 0, 40)]
        t = assign_targets(g, gts, 0.6, 0.3, 4, s)
        np.testing.assert_array_equal(t.class_onehot.sum(axis=1), 1.0)
        nonzero = np.any(t.offsets != 0, axis=1)
        np.testing.assert_array_equal(nonzero, t.state == ASSIGNED)
        assert np.all(t.class_onehot[t.state == ASSIGNED, 3] == 0)
        assert set(np.unique(t.state)) <= {ASSIGNED, BACKGROUND, DISCARDED}


def test_assign_matches_bruteforce(rng):
    for _ in range(1000):
        anchors = _random_boxes(rng, 50)
        gts = [BBox(*b, class_id=int(rng.integers(0, 3))) for b in _random_boxes(rng, 5)]
        t = assign_targets(anchors, gts, 0.6, 0.3, 4, None)
        state, gidx = brute_assign([BBox.from_array(a) for a in anchors], gts, 0.6, 0.3)
        np.testing.assert_array_equal(t.state, state)
        np.testing.assert_array_equal(t.gt_index, gidx)


# -- nms ----------------------------------------------------------------------

def test_nms_examples():
    a = (BBox(0, 0, 10, 10), 0, 0.9)
    b = (BBox(0, 0, 10, 6.0), 0, 0.8)
    assert iou(a[0], b[0]) == pytest.approx(0.6)
    c = (BBox(30, 30, 40, 40), 0, 0.7)
    assert nms([a, b, c], 0.5, 0.1) == [a, c]
    assert nms([a], 0.5, 0.5) == [a]


def test_nms_classes_independent():
    a = (BBox(0, 0, 10, 10), 0, 0.9)
    b = (BBox(0, 0, 10, 10), 1, 0.9)
    assert nms([a, b], 0.5, 0.1) == [a, b]


def test_nms_score_threshold_and_ties():
    a = (BBox(0, 0, 10, 10), 0, 0.6)
    b = (BBox(1, 0, 11, 10), 0, 0.6)
    low = (BBox(50, 50, 60, 60), 0, 0.2)
    assert nms([a, b, low], 0.5, 0.3) == [a]
    assert nms([b, a], 0.5, 0.3) == [b]


def _random_dets(rng, n):
    boxes = _random_boxes(rng, n, 0, 40)
    return [(BBox.from_array(b), int(rng.integers(0, 3)), float(np.round(rng.random(), 2))) for b in boxes]


def test_nms_matches_reference_and_is_idempotent(rng):
    for _ in range(1000):
        dets = _random_dets(rng, int(rng.integers(0, 65)))
        out = nms(dets, 0.5, 0.3)
        assert out == brute_nms(dets, 0.5, 0.3)
        assert nms(out, 0.5, 0.3) == out
