"""Run a model graph over samples: letterbox, forward, decode, NMS, unmap."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .data import Sample, contrast_enhance, letterbox, to_chw
from .metrics import LatencyMeter
from .model import ModelGraph
from .postprocess import DecodeConfig, Detection, decode, map_to_original, nms
from .tensor import Tensor, no_grad


def predict(
    graph: ModelGraph,
    samples: Sequence[Sample],
    cfg: DecodeConfig = DecodeConfig(),
    meter: LatencyMeter | None = None,
    batch_size: int = 8,
    contrast: bool = False,
) -> dict[str, list[Detection]]:
    """Detections per ``source_id`` in original-image pixels."""
    meter = meter or LatencyMeter()
    size = graph.config.input_size
    was_training = graph.training
    graph.eval()
    out: dict[str, list[Detection]] = {}
    try:
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            with meter.stage("pre", len(chunk)):
                recs, arrs = [], []
                for smp in chunk:
                    if contrast:
                        smp = contrast_enhance(smp)
                    boxed, rec = letterbox(smp, size)
                    recs.append(rec)
                    arrs.append(to_chw(boxed.image))
                batch = Tensor(np.stack(arrs))
            with meter.stage("infer", len(chunk)), no_grad():
                heads = graph(batch)
            with meter.stage("nms", len(chunk)):
                raw = decode(heads, graph.anchors, graph.strides, cfg, (size, size))
                for smp, rec, dets in zip(chunk, recs, raw):
                    kept = nms(dets, cfg.nms_iou_threshold, cfg.max_detections)
                    out[smp.source_id] = map_to_original(kept, rec)
    finally:
        graph.train(was_training)
    return out
