"""Decode raw head tensors into pixel-space detections; greedy NMS."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import TransformRecord
from .tensor import Tensor, sigmoid_np


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]  # x1, y1, x2, y2 pixels
    confidence: float
    class_id: int

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"degenerate detection box {self.box}")
        if not 0 <= self.confidence <= 1:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    @property
    def area(self) -> float:
        x1, y1, x2, y2 = self.box
        return (x2 - x1) * (y2 - y1)


@dataclass(frozen=True)
class DecodeConfig:
    conf_threshold: float = 0.25
    nms_iou_threshold: float = 0.45
    max_detections: int = 300

    def __post_init__(self):
        for name in ("conf_threshold", "nms_iou_threshold"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if self.max_detections < 1:
            raise ValueError("max_detections must be >= 1")


def _np(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def decode_raw(heads: Sequence, anchors, strides: Sequence[int]) -> list[dict[str, np.ndarray]]:
    """Per-level decoded predictions, flattened to (N, na*H*W, ...) arrays.

    Keys: ``xywh`` (centre and size in input pixels), ``obj`` and ``cls``
    (probabilities).
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    if len(heads) != len(strides) or anchors.shape[0] != len(heads):
        raise ValueError(f"{len(heads)} heads but {len(strides)} strides and {anchors.shape[0]} anchor levels")
    out = []
    for p, stride, anc in zip(heads, strides, anchors):
        p = _np(p).astype(np.float64)
        n, ch, h, w = p.shape
        na = anc.shape[0]
        if ch % na:
            raise ValueError(f"head channels {ch} not divisible by {na} anchors")
        no = ch // na
        p = p.reshape(n, na, no, h, w).transpose(0, 1, 3, 4, 2)
        s = sigmoid_np(p)
        gy, gx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        grid = np.stack([gx, gy], axis=-1)[None, None]
        xy = (2 * s[..., 0:2] - 0.5 + grid) * stride
        wh = (2 * s[..., 2:4]) ** 2 * anc[None, :, None, None, :]
        out.append(
            {
                "xywh": np.concatenate([xy, wh], axis=-1).reshape(n, -1, 4),
                "obj": s[..., 4].reshape(n, -1),
                "cls": s[..., 5:].reshape(n, -1, no - 5),
            }
        )
    return out


def encode_box(cx, cy, w, h, cell_x, cell_y, anchor, stride) -> np.ndarray:
    """Inverse of the decode transform for one box -> (tx, ty, tw, th)."""

    def logit(p):
        return np.log(p / (1 - p))

    ox = cx / stride - cell_x + 0.5
    oy = cy / stride - cell_y + 0.5
    return np.array([logit(ox / 2), logit(oy / 2), logit(np.sqrt(w / anchor[0]) / 2), logit(np.sqrt(h / anchor[1]) / 2)])


def decode(heads: Sequence, anchors, strides: Sequence[int], cfg: DecodeConfig = DecodeConfig(), image_size: tuple[int, int] | None = None) -> list[list[Detection]]:
    """Confidence-filtered detections per image, in (padded) input pixels.

    confidence = objectness * best class probability; boxes are clipped to
    ``image_size`` (defaults to the grid extent of the first level).
    """
    levels = decode_raw(heads, anchors, strides)
    if image_size is None:
        h0, w0 = _np(heads[0]).shape[2:]
        image_size = (w0 * strides[0], h0 * strides[0])
    iw, ih = image_size
    xywh = np.concatenate([lv["xywh"] for lv in levels], axis=1)
    obj = np.concatenate([lv["obj"] for lv in levels], axis=1)
    cls = np.concatenate([lv["cls"] for lv in levels], axis=1)
    batch = []
    for b in range(xywh.shape[0]):
        if cls.shape[2]:
            cid = cls[b].argmax(axis=1)
            conf = obj[b] * cls[b].max(axis=1)
        else:
            cid = np.zeros(obj.shape[1], dtype=int)
            conf = obj[b]
        keep = np.nonzero(conf >= cfg.conf_threshold)[0]
        c = xywh[b, keep]
        x1 = np.clip(c[:, 0] - c[:, 2] / 2, 0, iw)
        y1 = np.clip(c[:, 1] - c[:, 3] / 2, 0, ih)
        x2 = np.clip(c[:, 0] + c[:, 2] / 2, 0, iw)
        y2 = np.clip(c[:, 1] + c[:, 3] / 2, 0, ih)
        dets = [
            Detection((float(x1[i]), float(y1[i]), float(x2[i]), float(y2[i])), float(conf[k]), int(cid[k]))
            for i, k in enumerate(keep)
            if x2[i] > x1[i] and y2[i] > y1[i]
        ]
        batch.append(dets)
    return batch


def box_iou(a, b) -> float:
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def nms_order(dets: Sequence[Detection]) -> list[int]:
    """Confidence descending; ties by smaller class, larger area, input order."""
    return sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, dets[i].class_id, -dets[i].area, i))


def nms(dets: Sequence[Detection], iou_threshold: float = 0.45, max_detections: int = 300) -> list[Detection]:
    """Class-aware greedy suppression.

    A detection survives iff its IoU with every already-kept detection of the
    same class is at most ``iou_threshold``.
    """
    if not dets:
        return []
    order = nms_order(dets)
    boxes = np.array([dets[i].box for i in order], dtype=np.float64)
    classes = np.array([dets[i].class_id for i in order])
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    alive = np.ones(len(order), dtype=bool)
    kept = []
    for i in range(len(order)):
        if not alive[i]:
            continue
        kept.append(dets[order[i]])
        if len(kept) == max_detections:
            break
        rest = np.nonzero(alive[i + 1 :] & (classes[i + 1 :] == classes[i]))[0] + i + 1
        if rest.size:
            ix = np.minimum(boxes[i, 2], boxes[rest, 2]) - np.maximum(boxes[i, 0], boxes[rest, 0])
            iy = np.minimum(boxes[i, 3], boxes[rest, 3]) - np.maximum(boxes[i, 1], boxes[rest, 1])
            inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
            iou = inter / (areas[i] + areas[rest] - inter)
            alive[rest[iou > iou_threshold]] = False
    return kept


def map_to_original(dets: Sequence[Detection], transform: TransformRecord) -> list[Detection]:
    """Undo letterboxing: boxes back to original-image pixels, clipped."""
    out = []
    for d in dets:
        x1, y1, x2, y2 = transform.inverse(np.array(d.box))
        x1, x2 = np.clip([x1, x2], 0, transform.orig_w)
        y1, y2 = np.clip([y1, y2], 0, transform.orig_h)
        if x2 > x1 and y2 > y1:
            out.append(Detection((float(x1), float(y1), float(x2), float(y2)), d.confidence, d.class_id))
    return out


def postprocess(heads, anchors, strides, cfg: DecodeConfig = DecodeConfig()) -> list[list[Detection]]:
    return [nms(d, cfg.nms_iou_threshold, cfg.max_detections) for d in decode(heads, anchors, strides, cfg)]


# ---------------------------------------------------------------------------
# detections file: "image_id class_id x1 y1 x2 y2 confidence"


def write_detections(path, dets: Mapping[str, Sequence[Detection]]) -> None:
    lines = []
    for image_id in sorted(dets):
        for d in dets[image_id]:
            x1, y1, x2, y2 = d.box
            lines.append(f"{image_id} {d.class_id} {x1:.4f} {y1:.4f} {x2:.4f} {y2:.4f} {d.confidence:.6f}\n")
    Path(path).write_text("".join(lines))


def read_detections(path) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 7:
            raise ValueError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
        image_id, cid = parts[0], int(parts[1])
        x1, y1, x2, y2, conf = (float(v) for v in parts[2:])
        out.setdefault(image_id, []).append(Detection((x1, y1, x2, y2), conf, cid))
    return out
