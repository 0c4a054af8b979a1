import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tfnet.data import TransformRecord
from tfnet.postprocess import (
    DecodeConfig,
    Detection,
    decode,
    decode_raw,
    encode_box,
    map_to_original,
    nms,
    postprocess,
    read_detections,
    write_detections,
)

import oracles
from instances import random_dets

ANCHORS = [[[10, 13], [16, 30], [33, 23]], [[30, 61], [62, 45], [59, 119]], [[116, 90], [156, 198], [373, 326]]]
STRIDES = [8, 16, 32]


def empty_heads(size=64, nc=1, fill=-12.0):
    no = 5 + nc
    return [np.full((1, 3 * no, size // s, size // s), fill) for s in STRIDES]


def test_detection_validation():
    with pytest.raises(ValueError):
        Detection((5, 5, 5, 10), 0.5, 0)
    with pytest.raises(ValueError):
        Detection((0, 0, 1, 1), 1.5, 0)


def test_decode_config_validation():
    with pytest.raises(ValueError):
        DecodeConfig(conf_threshold=0)
    with pytest.raises(ValueError):
        DecodeConfig(max_detections=0)


def test_encode_then_decode_recovers_box():
    heads = empty_heads()
    t = encode_box(21.0, 30.0, 20.0, 12.0, 2, 3, ANCHORS[0][1], 8)
    no = 6
    heads[0][0, 1 * no : 1 * no + 4, 3, 2] = t
    heads[0][0, 1 * no + 4, 3, 2] = 8.0
    heads[0][0, 1 * no + 5, 3, 2] = 8.0
    (dets,) = decode(heads, ANCHORS, STRIDES, DecodeConfig(conf_threshold=0.5))
    (d,) = dets
    np.testing.assert_allclose(d.box, (11.0, 24.0, 31.0, 36.0), atol=1e-9)
    assert d.class_id == 0 and d.confidence > 0.99


def test_decode_raw_geometry_at_zero_logits():
    levels = decode_raw(empty_heads(fill=0.0), ANCHORS, STRIDES)
    xywh = levels[2]["xywh"].reshape(3, 2, 2, 4)
    # sigmoid(0)=0.5 -> centre at cell + 0.5, size equal to the anchor
    np.testing.assert_allclose(xywh[0, 1, 0], [16.0, 48.0, 116.0, 90.0])
    assert levels[0]["obj"].shape == (1, 3 * 8 * 8)


def test_decode_confidence_is_obj_times_class():
    heads = empty_heads(nc=2)
    heads[1][0, 4, 1, 1] = 0.0  # obj 0.5
    heads[1][0, 5, 1, 1] = 0.0  # class 0: 0.5
    heads[1][0, 6, 1, 1] = np.log(4.0)  # class 1: 0.8
    (dets,) = decode(heads, ANCHORS, STRIDES, DecodeConfig(conf_threshold=0.3))
    (d,) = dets
    assert d.class_id == 1 and d.confidence == pytest.approx(0.4)


def test_decode_shape_errors():
    with pytest.raises(ValueError):
        decode_raw(empty_heads()[:2], ANCHORS, STRIDES)
    with pytest.raises(ValueError):
        decode_raw([np.zeros((1, 17, 8, 8))] * 3, ANCHORS, STRIDES)


def test_nms_examples():
    a = Detection((0, 0, 10, 10), 0.9, 0)
    b = Detection((1, 1, 11, 11), 0.8, 0)  # IoU 81/119 with a
    c = Detection((1, 1, 11, 11), 0.8, 1)  # other class
    d = Detection((50, 50, 60, 60), 0.7, 0)
    assert nms([a, b, c, d], 0.45) == [a, c, d]
    assert nms([a, b, c, d], 0.7) == [a, b, c, d]
    assert nms([a, b, c, d], 0.45, max_detections=2) == [a, c]
    assert nms([], 0.5) == []


def test_nms_ties_break_by_class_then_area():
    small = Detection((0, 0, 10, 10), 0.5, 0)
    big = Detection((0, 0, 12, 12), 0.5, 0)
    assert nms([small, big], 0.5) == [big]


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 60), st.floats(0.1, 0.9))
def test_nms_matches_bruteforce(seed, n, thr):
    dets = random_dets(np.random.default_rng(seed), n)
    assert nms(dets, thr, max_detections=10_000) == oracles.nms_bruteforce(dets, thr)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_nms_kept_set_invariants(seed):
    dets = random_dets(np.random.default_rng(seed), 40)
    kept = nms(dets, 0.45)
    confs = [d.confidence for d in kept]
    assert confs == sorted(confs, reverse=True)
    for i, p in enumerate(kept):
        for q in kept[i + 1 :]:
            assert p.class_id != q.class_id or oracles.box_iou(p.box, q.box) <= 0.45
    assert nms(kept, 0.45) == kept


def test_map_to_original_undoes_letterbox():
    rec = TransformRecord(0.65, 0.0, 52.0, 640, 480, 416)
    d = Detection(tuple(rec.forward(np.array([100.0, 100.0, 200.0, 300.0]))), 0.9, 0)
    (back,) = map_to_original([d], rec)
    np.testing.assert_allclose(back.box, (100, 100, 200, 300), atol=1e-9)
    outside = Detection((0, 0, 10, 40), 0.5, 0)  # entirely in the top pad
    assert map_to_original([outside], rec) == []


def test_postprocess_empty_heads():
    assert postprocess(empty_heads(), ANCHORS, STRIDES) == [[]]


def test_detection_file_round_trip(tmp_path):
    dets = {"b": [Detection((1.5, 2.25, 30.0, 40.125), 0.875, 0)], "a": [Detection((0, 0, 5, 5), 0.5, 2)]}
    write_detections(tmp_path / "d.txt", dets)
    lines = (tmp_path / "d.txt").read_text().splitlines()
    assert lines[0].startswith("a 2 ") and lines[1].startswith("b 0 ")
    assert read_detections(tmp_path / "d.txt") == dets
    (tmp_path / "bad.txt").write_text("a 0 1 2 3\n")
    with pytest.raises(ValueError, match="bad.txt:1"):
        read_detections(tmp_path / "bad.txt")
