"""Detection matching, precision/recall, all-points AP and the eval report."""

from __future__ import annotations

import time
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .data import Sample
from .postprocess import DecodeConfig, Detection, nms_order
from .report import Column, render
from .synth import SIZE_BUCKETS, size_bucket


class GroundTruth(NamedTuple):
    box: tuple[float, float, float, float]
    class_id: int


def iou(a, b) -> float:
    """Intersection over union of two corner-format boxes."""
    for box in (a, b):
        if not (box[2] > box[0] and box[3] > box[1]):
            raise ValueError(f"degenerate box {tuple(box)}")
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union)


def ground_truths(sample: Sample) -> list[GroundTruth]:
    return [GroundTruth(tuple(map(float, b)), int(c)) for b, c in zip(sample.boxes_xyxy_px(), sample.class_ids())]


@dataclass
class MatchResult:
    det_tp: list[bool]
    det_gt: list[int]  # matched GT index, -1 for FP
    det_iou: list[float]
    gt_matched: list[bool]
    order: list[int] = field(default_factory=list)  # det indices in processing order

    @property
    def tp(self) -> int:
        return sum(self.det_tp)

    @property
    def fp(self) -> int:
        return len(self.det_tp) - self.tp

    @property
    def fn(self) -> int:
        return len(self.gt_matched) - sum(self.gt_matched)


def match(dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_min: float = 0.5) -> MatchResult:
    """Greedy matching in confidence order.

    A detection is a TP iff the unmatched same-class GT it overlaps most has
    IoU >= ``iou_min``; that GT is then consumed.
    """
    n = len(dets)
    det_tp, det_gt, det_iou = [False] * n, [-1] * n, [0.0] * n
    matched = [False] * len(gts)
    order = nms_order(dets)
    for i in order:
        d = dets[i]
        best, best_j = -1.0, -1
        for j, g in enumerate(gts):
            if matched[j] or g.class_id != d.class_id:
                continue
            v = iou(d.box, g.box)
            if v > best:
                best, best_j = v, j
        if best_j >= 0 and best >= iou_min:
            matched[best_j] = True
            det_tp[i], det_gt[i], det_iou[i] = True, best_j, best
        elif best_j >= 0:
            det_iou[i] = best
    return MatchResult(det_tp, det_gt, det_iou, matched, order)


class APUndefined(ValueError):
    """No ground truth of the class exists, so AP has no meaning."""


def envelope_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the monotone precision envelope (all-points interpolation)."""
    r = np.concatenate([[0.0], recall])
    p = np.concatenate([[0.0], precision])
    env = np.maximum.accumulate(p[::-1])[::-1]
    return float(np.sum((r[1:] - r[:-1]) * env[1:]))


@dataclass
class PRCurve:
    class_id: int
    confidence: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    ap: float


def pr_curve_and_ap(
    dets: Sequence[Sequence[Detection]], gts: Sequence[Sequence[GroundTruth]], iou_min: float = 0.5
) -> tuple[list[PRCurve], float]:
    """Sweep detections (all images) by descending confidence.

    Returns one curve per class that has ground truth, and the mean AP.
    """
    if len(dets) != len(gts):
        raise ValueError("dets and gts must cover the same images")
    n_gt: dict[int, int] = defaultdict(int)
    for g_img in gts:
        for g in g_img:
            n_gt[g.class_id] += 1
    if not n_gt:
        raise APUndefined("no ground truth boxes; AP is undefined")
    records: dict[int, list[tuple[float, int, int, bool]]] = defaultdict(list)
    for img, (d_img, g_img) in enumerate(zip(dets, gts)):
        m = match(d_img, g_img, iou_min)
        for i, d in enumerate(d_img):
            records[d.class_id].append((d.confidence, img, i, m.det_tp[i]))
    curves = []
    for c in sorted(n_gt):
        rec = sorted(records.get(c, []), key=lambda r: (-r[0], r[1], r[2]))
        flags = np.array([r[3] for r in rec], dtype=bool)
        conf = np.array([r[0] for r in rec], dtype=np.float64)
        ctp = np.cumsum(flags)
        cfp = np.cumsum(~flags)
        recall = ctp / n_gt[c]
        precision = ctp / np.maximum(ctp + cfp, 1)
        curves.append(PRCurve(c, conf, precision, recall, envelope_ap(recall, precision)))
    return curves, float(np.mean([cv.ap for cv in curves]))


class LatencyMeter:
    """Per-stage wall-clock accumulator using a monotonic clock."""

    STAGES = ("pre", "infer", "nms")

    def __init__(self):
        self.total = {s: 0.0 for s in self.STAGES}
        self.count = {s: 0 for s in self.STAGES}

    @contextmanager
    def stage(self, name: str, images: int = 1):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.total[name] += (time.perf_counter() - t0) * 1000
            self.count[name] += images

    def mean_ms(self) -> dict[str, float]:
        return {s: self.total[s] / self.count[s] if self.count[s] else 0.0 for s in self.STAGES}


@dataclass
class EvalReport:
    tp: int
    fp: int
    fn: int
    precision: float | None
    recall: float | None
    map50: float
    mean_iou: float | None
    per_size: dict[str, float | None]
    pre_ms: float = 0.0
    infer_ms: float = 0.0
    nms_ms: float = 0.0
    fps: float | None = None
    conf_threshold: float = 0.25
    nms_iou_threshold: float = 0.45
    iou_mode: str = "tp"

    def to_dict(self) -> dict:
        return asdict(self)

    def table_row(self) -> dict:
        """Values as printed in the comparison tables (percentages)."""

        def pct(v):
            return None if v is None else 100 * v

        return {
            "tp": self.tp,
            "fn": self.fn,
            "precision": pct(self.precision),
            "recall": pct(self.recall),
            "map50": pct(self.map50),
            "mean_iou": pct(self.mean_iou),
            "pre_ms": self.pre_ms,
            "infer_ms": self.infer_ms,
            "nms_ms": self.nms_ms,
            "fps": self.fps,
        }


def evaluate(
    dets: Mapping[str, Sequence[Detection]],
    samples: Sequence[Sample],
    cfg: DecodeConfig = DecodeConfig(),
    latency: LatencyMeter | Mapping[str, float] | None = None,
    iou_mode: str = "tp",
    iou_min: float = 0.5,
) -> EvalReport:
    """Score detections (original-image pixels, keyed by source_id).

    TP/FP/FN, precision, recall and mean IoU use detections at or above
    ``cfg.conf_threshold``; mAP@0.5 sweeps every supplied detection.
    ``iou_mode="all"`` averages, over every thresholded detection, its best
    IoU with any same-class ground truth (matched or not) instead of TP IoUs
    only.
    """
    if not samples:
        raise ValueError("cannot evaluate an empty split")
    if iou_mode not in ("tp", "all"):
        raise ValueError(f"iou_mode must be 'tp' or 'all', got {iou_mode!r}")
    all_dets, all_gts = [], []
    tp = fp = fn = 0
    ious: list[float] = []
    bucket_hits = {b: [0, 0] for b in SIZE_BUCKETS}
    for smp in samples:
        d_img = list(dets.get(smp.source_id, []))
        g_img = ground_truths(smp)
        all_dets.append(d_img)
        all_gts.append(g_img)
        above = [d for d in d_img if d.confidence >= cfg.conf_threshold]
        m = match(above, g_img, iou_min)
        tp, fp, fn = tp + m.tp, fp + m.fp, fn + m.fn
        if iou_mode == "tp":
            ious.extend(v for v, hit in zip(m.det_iou, m.det_tp) if hit)
        else:
            for d in above:
                same = [iou(d.box, g.box) for g in g_img if g.class_id == d.class_id]
                ious.append(max(same, default=0.0))
        for g, hit in zip(g_img, m.gt_matched):
            b = size_bucket(max(g.box[2] - g.box[0], g.box[3] - g.box[1]), smp.width)
            bucket_hits[b][0] += hit
            bucket_hits[b][1] += 1
    _, map50 = pr_curve_and_ap(all_dets, all_gts, iou_min)
    if isinstance(latency, LatencyMeter):
        latency = latency.mean_ms()
    lat = dict(latency or {})
    pre, inf, nm = lat.get("pre", 0.0), lat.get("infer", 0.0), lat.get("nms", 0.0)
    total = pre + inf + nm
    return EvalReport(
        tp=tp,
        fp=fp,
        fn=fn,
        precision=tp / (tp + fp) if tp + fp else None,
        recall=tp / (tp + fn) if tp + fn else None,
        map50=map50,
        mean_iou=float(np.mean(ious)) if ious else None,
        per_size={b: (h / n if n else None) for b, (h, n) in bucket_hits.items()},
        pre_ms=pre,
        infer_ms=inf,
        nms_ms=nm,
        fps=1000.0 / total if total > 0 else None,
        conf_threshold=cfg.conf_threshold,
        nms_iou_threshold=cfg.nms_iou_threshold,
        iou_mode=iou_mode,
    )


def write_pr_csv(path, curves: Sequence[PRCurve]) -> None:
    lines = ["class_id,confidence,precision,recall\n"]
    for cv in curves:
        for c, p, r in zip(cv.confidence, cv.precision, cv.recall):
            lines.append(f"{cv.class_id},{c:.6f},{p:.6f},{r:.6f}\n")
    with open(path, "w") as fh:
        fh.writelines(lines)


TABLE2_COLUMNS = [
    Column("tp", "TP", 0),
    Column("fn", "FN", 0),
    Column("precision", "Precision (%)", 1),
    Column("recall", "Recall (%)", 1),
    Column("map50", "mAP@0.5 (%)", 1),
    Column("mean_iou", "IoU (%)", 1),
]
TABLE4_COLUMNS = [
    Column("pre_ms", "Pre-process (ms)", 1),
    Column("infer_ms", "Inference (ms)", 1),
    Column("nms_ms", "NMS per image (ms)", 1),
    Column("fps", "FPS", 0),
]


def format_report(reports: Sequence[EvalReport | Mapping], names: Sequence[str] | None = None) -> dict:
    """Accuracy and latency comparison tables, deltas against the first report.

    Mappings are taken as already-tabulated values (percentages), which lets
    reference numbers be rendered next to measured ones.
    """
    if not reports:
        raise ValueError("format_report needs at least one report")
    names = list(names) if names else [f"model{i}" for i in range(len(reports))]
    rows = [(n, r.table_row() if isinstance(r, EvalReport) else dict(r)) for n, r in zip(names, reports)]
    acc = render("Evaluation Metrics", TABLE2_COLUMNS, rows)
    lat = render("Latency", TABLE4_COLUMNS, rows)
    lat["notes"] = []
    lat["text"] = "\n".join(l for l in lat["text"].splitlines() if not l.startswith("note:")) + "\n"
    return {"accuracy": acc, "latency": lat, "text": acc["text"] + "\n" + lat["text"]}
