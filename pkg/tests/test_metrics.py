import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tfnet.data import BoxLabel, Sample
from tfnet.metrics import (
    APUndefined,
    EvalReport,
    GroundTruth,
    LatencyMeter,
    envelope_ap,
    evaluate,
    format_report,
    iou,
    match,
    pr_curve_and_ap,
    write_pr_csv,
)
from tfnet.postprocess import DecodeConfig, Detection

import oracles
import reference_table
from instances import random_gt_and_dets


def gt(box, c=0):
    return GroundTruth(tuple(float(v) for v in box), c)


def det(box, conf, c=0):
    return Detection(tuple(float(v) for v in box), conf, c)


def test_iou_examples():
    assert iou((0, 0, 10, 10), (0, 0, 10, 10)) == 1.0
    assert iou((0, 0, 10, 10), (5, 0, 15, 10)) == pytest.approx(1 / 3)
    assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    with pytest.raises(ValueError):
        iou((0, 0, 0, 1), (0, 0, 1, 1))


def test_match_counts_simple():
    gts = [gt((0, 0, 10, 10)), gt((20, 20, 30, 30))]
    dets = [det((0, 0, 10, 10), 0.9), det((0, 0, 10, 10), 0.8), det((50, 50, 60, 60), 0.7)]
    m = match(dets, gts)
    assert (m.tp, m.fp, m.fn) == (1, 2, 1)
    assert m.det_tp == [True, False, False]


def test_match_respects_class():
    m = match([det((0, 0, 10, 10), 0.9, c=1)], [gt((0, 0, 10, 10), 0)])
    assert (m.tp, m.fp, m.fn) == (0, 1, 1)


def test_match_iou_boundary_is_inclusive():
    # IoU exactly 0.5
    m = match([det((0, 0, 10, 10), 0.9)], [gt((0, 0, 10, 5))])
    assert m.tp == 1


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 8), st.integers(0, 25))
def test_match_matches_oracle(seed, n_gt, n_det):
    gts, dets = random_gt_and_dets(np.random.default_rng(seed), n_gt, n_det)
    m = match(dets, gts)
    assert m.det_tp == oracles.greedy_match_flags(dets, gts)
    assert m.tp + m.fn == n_gt and m.tp + m.fp == n_det


def test_envelope_ap_examples():
    # TP, FP, TP over 2 GT -> 1/2 * 1 + 1/2 * 2/3
    r = np.array([0.5, 0.5, 1.0])
    p = np.array([1.0, 0.5, 2 / 3])
    assert envelope_ap(r, p) == pytest.approx(0.5 + 1 / 3)
    assert oracles.ap_envelope_sum([True, False, True], 2) == pytest.approx(0.5 + 1 / 3)


def test_perfect_and_empty_ap():
    gts = [[gt((0, 0, 10, 10))], [gt((5, 5, 20, 20))]]
    dets = [[det((0, 0, 10, 10), 0.9)], [det((5, 5, 20, 20), 0.8)]]
    curves, m = pr_curve_and_ap(dets, gts)
    assert m == 1.0 and curves[0].ap == 1.0
    _, m = pr_curve_and_ap([[], []], gts)
    assert m == 0.0
    with pytest.raises(APUndefined):
        pr_curve_and_ap([[det((0, 0, 1, 1), 0.5)]], [[]])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
def test_map_matches_oracle(seed, n_img):
    rng = np.random.default_rng(seed)
    gts, dets = [], []
    for _ in range(n_img):
        g, d = random_gt_and_dets(rng, int(rng.integers(0, 6)), int(rng.integers(0, 15)))
        gts.append(g)
        dets.append(d)
    if not any(gts):
        gts[0].append(gt((0, 0, 5, 5)))
    _, got = pr_curve_and_ap(dets, gts)
    assert abs(got - oracles.map_oracle(dets, gts)) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_pr_curve_invariants(seed):
    rng = np.random.default_rng(seed)
    g, d = random_gt_and_dets(rng, 5, 20)
    if not g:
        return
    curves, m = pr_curve_and_ap([d], [g])
    for cv in curves:
        assert np.all(np.diff(cv.recall) >= 0)
        assert np.all(np.diff(cv.confidence) <= 0)
        assert np.all((cv.precision >= 0) & (cv.precision <= 1))
        assert 0 <= cv.ap <= 1
    assert 0 <= m <= 1


def scene(boxes_px, size=100, sid="s0"):
    labels = [BoxLabel.from_xyxy(0, x1 / size, y1 / size, x2 / size, y2 / size) for x1, y1, x2, y2 in boxes_px]
    return Sample(np.zeros((size, size, 1)), labels, sid)


def test_evaluate_perfect_detector():
    samples = [scene([(10, 10, 30, 30), (50, 50, 60, 62)], sid="a"), scene([(5, 5, 15, 15)], sid="b")]
    dets = {s.source_id: [Detection(tuple(b), 0.9, 0) for b in s.boxes_xyxy_px()] for s in samples}
    rep = evaluate(dets, samples)
    assert (rep.tp, rep.fp, rep.fn) == (3, 0, 0)
    assert rep.precision == rep.recall == rep.map50 == 1.0
    assert rep.mean_iou == pytest.approx(1.0)
    assert rep.fps is None


def test_evaluate_thresholds_and_buckets():
    s = scene([(10, 10, 11.5, 11.5), (40, 40, 60, 60)], size=100)
    dets = {"s0": [det((40, 40, 60, 60), 0.2), det((10, 10, 11.5, 11.5), 0.9)]}
    rep = evaluate(dets, [s], DecodeConfig(conf_threshold=0.25))
    assert (rep.tp, rep.fp, rep.fn) == (1, 0, 1)
    assert rep.map50 == 1.0  # the sweep still sees the low-confidence hit
    assert rep.per_size == {"small": 1.0, "medium": None, "large": 0.0}


def test_evaluate_undefined_precision_and_empty_split():
    rep = evaluate({}, [scene([(10, 10, 30, 30)])])
    assert rep.precision is None and rep.recall == 0.0 and rep.mean_iou is None
    with pytest.raises(ValueError):
        evaluate({}, [])


def test_iou_mode_all_counts_false_positives():
    s = scene([(0, 0, 20, 20)])
    dets = {"s0": [det((0, 0, 20, 20), 0.9), det((0, 0, 20, 40), 0.8)]}
    assert evaluate(dets, [s]).mean_iou == pytest.approx(1.0)
    assert evaluate(dets, [s], iou_mode="all").mean_iou == pytest.approx(0.75)


def test_latency_meter_and_fps():
    meter = LatencyMeter()
    with meter.stage("infer", images=2):
        pass
    assert meter.count["infer"] == 2 and meter.mean_ms()["pre"] == 0.0
    rep = evaluate({}, [scene([(1, 1, 9, 9)])], latency={"pre": 1.0, "infer": 2.0, "nms": 2.0})
    assert rep.fps == pytest.approx(200.0)


def test_write_pr_csv(tmp_path):
    g = [[gt((0, 0, 10, 10))]]
    curves, _ = pr_curve_and_ap([[det((0, 0, 10, 10), 0.9), det((50, 50, 60, 60), 0.4)]], g)
    write_pr_csv(tmp_path / "pr.csv", curves)
    rows = list(csv.DictReader(open(tmp_path / "pr.csv")))
    assert [float(r["precision"]) for r in rows] == [1.0, 0.5]
    assert [float(r["recall"]) for r in rows] == [1.0, 1.0]


def test_format_report_row_deltas():
    reps, names = reference_table.rows()
    out = format_report(reps, names)
    lines = {l.split()[0]: l for l in out["accuracy"]["text"].splitlines() if l.strip()}
    for name, cells in reference_table.ANNOTATIONS.items():
        for cell in cells:
            assert cell in lines[name]
    assert out["accuracy"]["rows"][1]["precision"]["delta"] == pytest.approx(-3.4)
    assert any("TF-Net" in n and "82" in n for n in out["accuracy"]["notes"])


def test_format_report_accepts_eval_reports():
    rep = EvalReport(9, 1, 1, 0.9, 0.9, 0.85, 0.7, {}, 1.0, 2.0, 0.5, 285.7)
    out = format_report([rep, rep], ["a", "b"])
    assert "90 (same)" in out["accuracy"]["text"]
    assert "FPS" in out["latency"]["text"] and "note:" not in out["latency"]["text"]
    with pytest.raises(ValueError):
        format_report([])
