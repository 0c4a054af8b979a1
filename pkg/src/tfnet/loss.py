"""Anchor target assignment and the detection loss with mixed L1/L2 penalty.

The classification term is the cross-entropy G(a, b) = -sum_i a(i) ln b(i)
applied per class to the Bernoulli pair (y, 1 - y) against (p, 1 - p); the
box term is 1 - CIoU and objectness is BCE against the detached CIoU of the
matched pair.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

CE_EPS = 1e-7
CIOU_EPS = 1e-7


@dataclass(frozen=True)
class RegConfig:
    alpha: float = 0.5
    enabled: bool = False
    # scales the penalty; 1.0 is the bare sum over weights
    strength: float = 1.0

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.strength < 0:
            raise ValueError("strength must be >= 0")


@dataclass(frozen=True)
class LossWeights:
    box_gain: float = 0.05
    obj_gain: float = 1.0
    cls_gain: float = 0.5
    obj_balance: tuple[float, ...] = (4.0, 1.0, 0.4)

    def __post_init__(self):
        object.__setattr__(self, "obj_balance", tuple(float(b) for b in self.obj_balance))
        gains = (self.box_gain, self.obj_gain, self.cls_gain)
        if min(gains) < 0 or max(gains) <= 0:
            raise ValueError(f"gains must be non-negative with at least one > 0, got {gains}")
        if min(self.obj_balance) < 0:
            raise ValueError("obj_balance entries must be >= 0")


@dataclass(frozen=True)
class AssignConfig:
    anchor_ratio_threshold: float = 4.0
    # used as the NMS IoU of validation runs during training
    iou_threshold: float = 0.20

    def __post_init__(self):
        if self.anchor_ratio_threshold <= 0 or self.iou_threshold <= 0:
            raise ValueError("anchor_ratio_threshold and iou_threshold must be > 0")


@dataclass
class LevelAssignment:
    """Positive (image, anchor, cell) triples of one level with their targets."""

    img: np.ndarray
    anchor: np.ndarray
    gy: np.ndarray
    gx: np.ndarray
    box: np.ndarray  # (K, 4) target cx, cy, w, h in input pixels
    cls: np.ndarray
    label: np.ndarray  # row of the originating target

    def __len__(self) -> int:
        return len(self.img)

    def triples(self) -> set[tuple[int, int, int, int, int]]:
        return set(zip(self.label.tolist(), self.anchor.tolist(), self.gy.tolist(), self.gx.tolist(), self.img.tolist()))


def _empty_level() -> LevelAssignment:
    z = np.zeros(0, dtype=np.int64)
    return LevelAssignment(z, z, z, z, np.zeros((0, 4)), z, z)


def assign_targets(
    targets: np.ndarray,
    anchors,
    strides: Sequence[int],
    grid_sizes: Sequence[tuple[int, int]],
    cfg: AssignConfig = AssignConfig(),
) -> list[LevelAssignment]:
    """Match ground truth to (level, anchor, cell) triples.

    ``targets`` rows are ``(image, class, cx, cy, w, h)`` in input pixels.  A
    box goes to anchor ``a`` when max(w/aw, aw/w, h/ah, ah/h) is below the
    ratio threshold; it is placed in the cell holding its centre plus the
    horizontal and the vertical neighbour on the side the centre leans toward
    (left/up below 0.5, right/down above), when inside the grid.
    """
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 6)
    anchors = np.asarray(anchors, dtype=np.float64)
    if np.any(targets[:, 4:6] <= 0):
        raise ValueError("target box with zero size; filter it before assignment")
    if np.any(anchors <= 0):
        raise ValueError("anchors must be positive")
    out = []
    for anc, stride, (h, w) in zip(anchors, strides, grid_sizes):
        if len(targets) == 0:
            out.append(_empty_level())
            continue
        wh = targets[:, None, 4:6]
        r = wh / anc[None]
        ok = np.maximum(r, 1 / r).max(axis=2) < cfg.anchor_ratio_threshold  # (M, na)
        ti, ai = np.nonzero(ok)
        g = targets[ti, 2:4] / stride
        cell = np.floor(g).astype(np.int64)
        cell[:, 0] = cell[:, 0].clip(0, w - 1)
        cell[:, 1] = cell[:, 1].clip(0, h - 1)
        frac = g - np.floor(g)
        # exactly centred boxes (offset 0.5) get no neighbour on that axis
        lean = np.where(frac < 0.5, -1, np.where(frac > 0.5, 1, 0))
        rows = [(ti, ai, cell[:, 1], cell[:, 0])]
        nx = cell[:, 0] + lean[:, 0]
        m = (lean[:, 0] != 0) & (nx >= 0) & (nx < w)
        rows.append((ti[m], ai[m], cell[m, 1], nx[m]))
        ny = cell[:, 1] + lean[:, 1]
        m = (lean[:, 1] != 0) & (ny >= 0) & (ny < h)
        rows.append((ti[m], ai[m], ny[m], cell[m, 0]))
        t_all, a_all, gy, gx = (np.concatenate(c) for c in zip(*rows))
        order = np.lexsort((gx, gy, a_all, t_all))
        t_all, a_all, gy, gx = t_all[order], a_all[order], gy[order], gx[order]
        out.append(
            LevelAssignment(
                img=targets[t_all, 0].astype(np.int64),
                anchor=a_all,
                gy=gy,
                gx=gx,
                box=targets[t_all, 2:6].copy(),
                cls=targets[t_all, 1].astype(np.int64),
                label=t_all,
            )
        )
    return out


def _ce_rows(a, b):
    if a.shape != b.shape:
        raise ValueError(f"distribution shapes differ: {a.shape} vs {b.shape}")
    return T.neg(T.reduce_sum(T.mul(a, T.log(T.clamp(b, CE_EPS, 1.0))), axis=-1))


def classification_cross_entropy(a, b):
    """Mean over rows of -sum_i a(i) ln b(i), with b clamped to [1e-7, 1].

    Accepts 1-d distributions or (batch, classes) arrays.  Returns a float
    for array inputs and a Tensor when ``b`` is a Tensor.
    """
    if isinstance(b, Tensor):
        a_t = a if isinstance(a, Tensor) else Tensor(np.asarray(a), dtype=b.dtype)
        return T.reduce_mean(_ce_rows(a_t, b))
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"distribution shapes differ: {a.shape} vs {b.shape}")
    rows = -np.sum(a * np.log(np.clip(b, CE_EPS, 1.0)), axis=-1)
    return float(np.mean(rows))


def mixed_regularization(weights: Sequence, alpha: float):
    """sum_j alpha |psi_j| + (1 - alpha) psi_j^2 over every element.

    Tensors give a differentiable result (subgradient 0 at psi = 0).
    """
    if not 0 <= alpha <= 1:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    weights = list(weights)
    if weights and all(isinstance(w, Tensor) for w in weights):
        total = None
        for w in weights:
            term = T.add(T.mul(alpha, T.reduce_sum(T.abs(w))), T.mul(1 - alpha, T.reduce_sum(T.square(w))))
            total = term if total is None else T.add(total, term)
        return total
    return float(sum(alpha * np.abs(np.asarray(w)).sum() + (1 - alpha) * np.square(np.asarray(w)).sum() for w in weights))


def ciou(p_xy: Tensor, p_wh: Tensor, t_xy: np.ndarray, t_wh: np.ndarray) -> Tensor:
    """Complete IoU of centre-size boxes (fully differentiable)."""
    t_xy = Tensor(t_xy, dtype=p_xy.dtype)
    t_wh = Tensor(t_wh, dtype=p_xy.dtype)
    p1, p2 = p_xy - p_wh * 0.5, p_xy + p_wh * 0.5
    t1, t2 = t_xy - t_wh * 0.5, t_xy + t_wh * 0.5
    inter_wh = T.clamp(T.minimum(p2, t2) - T.maximum(p1, t1), 0.0)
    inter = inter_wh[:, 0] * inter_wh[:, 1]
    pw, ph = p_wh[:, 0], p_wh[:, 1] + CIOU_EPS
    tw, th = t_wh[:, 0], t_wh[:, 1] + CIOU_EPS
    union = pw * ph + tw * th - inter + CIOU_EPS
    iou = inter / union
    enc = T.maximum(p2, t2) - T.minimum(p1, t1)
    c2 = enc[:, 0] * enc[:, 0] + enc[:, 1] * enc[:, 1] + CIOU_EPS
    d = t_xy - p_xy
    rho2 = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1]
    v = (4 / math.pi**2) * T.square(T.atan(tw / th) - T.atan(pw / ph))
    alpha = v / (v - iou + (1 + CIOU_EPS))
    return iou - (rho2 / c2 + v * alpha)


@dataclass
class LossBreakdown:
    box_loss: float
    obj_loss: float
    cls_loss: float
    reg_term: float
    total: float
    total_tensor: Tensor | None = field(default=None, repr=False)
    num_assigned: int = 0
    obj_targets: list[np.ndarray] = field(default_factory=list, repr=False)

    def as_dict(self) -> dict:
        return {"box": self.box_loss, "obj": self.obj_loss, "cls": self.cls_loss, "reg": self.reg_term, "total": self.total}


def _level_view(p: Tensor, na: int) -> Tensor:
    n, ch, h, w = p.shape
    return T.transpose(T.reshape(p, (n, na, ch // na, h, w)), (0, 1, 3, 4, 2))


def detection_loss(
    heads: Sequence[Tensor],
    assignments: Sequence[LevelAssignment],
    anchors,
    strides: Sequence[int],
    gains: LossWeights = LossWeights(),
    reg: RegConfig = RegConfig(),
    params: Sequence[Tensor] = (),
    obj_targets: Sequence[np.ndarray] | None = None,
) -> LossBreakdown:
    """Gain-weighted box + objectness + class loss plus the mixed penalty.

    ``params`` are the tensors the penalty covers (convolution weights).
    Objectness targets are constants derived from the current CIoU unless
    ``obj_targets`` supplies them (e.g. frozen for finite differences).
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    if len(gains.obj_balance) != len(heads):
        raise ValueError(f"{len(heads)} levels but {len(gains.obj_balance)} objectness balance weights")
    dtype = heads[0].dtype
    zero = Tensor(0.0, dtype=dtype)
    box_terms, cls_terms = [], []
    obj = zero
    n_pos = 0
    used_targets = []
    for lvl, (p, asg, anc, stride, bal) in enumerate(zip(heads, assignments, anchors, strides, gains.obj_balance)):
        na = anc.shape[0]
        pv = _level_view(p, na)
        tobj = np.zeros(pv.shape[:4])
        k = len(asg)
        if k:
            ps = pv[(asg.img, asg.anchor, asg.gy, asg.gx)]  # (K, no)
            sxy = T.sigmoid(ps[:, 0:2])
            swh = T.sigmoid(ps[:, 2:4])
            p_xy = sxy * 2.0 - 0.5
            p_wh = T.square(swh * 2.0) * Tensor(anc[asg.anchor] / stride, dtype=dtype)
            t_xy = asg.box[:, 0:2] / stride - np.stack([asg.gx, asg.gy], axis=1)
            t_wh = asg.box[:, 2:4] / stride
            c = ciou(p_xy, p_wh, t_xy, t_wh)
            box_terms.append(T.reduce_sum(1.0 - c))
            np.maximum.at(tobj, (asg.img, asg.anchor, asg.gy, asg.gx), np.clip(c.data, 0, 1))
            nc = ps.shape[1] - 5
            if nc:
                prob = T.sigmoid(ps[:, 5:])  # (K, nc)
                onehot = np.zeros((k, nc))
                onehot[np.arange(k), asg.cls] = 1.0
                a = np.stack([onehot, 1 - onehot], axis=-1)
                b = T.concat([T.reshape(prob, (k, nc, 1)), T.reshape(1.0 - prob, (k, nc, 1))], axis=2)
                cls_terms.append(T.reduce_sum(_ce_rows(Tensor(a, dtype=dtype), b)))
            n_pos += k
        if obj_targets is not None:
            tobj = np.asarray(obj_targets[lvl])
        used_targets.append(tobj)
        obj_l = T.reduce_mean(T.bce_with_logits(pv[..., 4], tobj))
        obj = T.add(obj, T.mul(bal, obj_l))
    box = T.mul(1.0 / n_pos, _sum(box_terms)) if n_pos else zero
    cls = T.mul(1.0 / n_pos, _sum(cls_terms)) if n_pos and cls_terms else zero
    total = T.add(T.add(T.mul(gains.box_gain, box), T.mul(gains.obj_gain, obj)), T.mul(gains.cls_gain, cls))
    reg_val = 0.0
    if reg.enabled and params:
        r = T.mul(reg.strength, mixed_regularization(params, reg.alpha))
        total = T.add(total, r)
        reg_val = r.item()
    return LossBreakdown(box.item(), obj.item(), cls.item(), reg_val, total.item(), total, n_pos, used_targets)


def _sum(terms: list[Tensor]) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = T.add(out, t)
    return out


def reg_weights(graph) -> list[Tensor]:
    """Convolution weight tensors of a model graph (penalty and decay set)."""
    return [p for n, p in graph.named_parameters() if graph.param_group(n) == "weight"]


def build_targets(samples_labels: Sequence[np.ndarray], input_size: int) -> np.ndarray:
    """Stack per-image normalized ``(class, cx, cy, w, h)`` rows into pixel targets."""
    rows = []
    for i, lab in enumerate(samples_labels):
        lab = np.asarray(lab, dtype=np.float64).reshape(-1, 5)
        if len(lab):
            px = lab[:, 1:] * input_size
            rows.append(np.column_stack([np.full(len(lab), i), lab[:, 0], px]))
    return np.concatenate(rows) if rows else np.zeros((0, 6))
