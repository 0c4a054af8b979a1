"""SGD with momentum and decoupled parameter groups; warmup + cosine schedule."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import numpy as np


@dataclass(frozen=True)
class OptimConfig:
    lr0: float = 0.01
    lrf: float = 0.1
    momentum: float = 0.937
    weight_decay: float = 0.0005
    warmup_epochs: float = 3.0
    warmup_momentum: float = 0.8
    warmup_bias_lr: float = 0.1
    epochs: int = 300
    batch_size: int = 16
    patience: int = 100

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError(f"lr0 must be > 0, got {self.lr0}")
        if not 0 <= self.momentum < 1 or not 0 <= self.warmup_momentum < 1:
            raise ValueError("momentum values must lie in [0, 1)")
        if self.weight_decay < 0 or self.warmup_epochs < 0 or self.lrf < 0:
            raise ValueError("weight_decay, warmup_epochs and lrf must be >= 0")
        if self.epochs < 0 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and patience >= 1 required")

    def to_dict(self) -> dict:
        return asdict(self)


class Schedule(NamedTuple):
    lr: float
    bias_lr: float
    momentum: float


def lr_schedule(t: float, cfg: OptimConfig) -> Schedule:
    """Learning rates and momentum at training progress ``t`` in [0, 1].

    Linear warmup over the first warmup_epochs/epochs (weights from 0, biases
    from warmup_bias_lr, momentum from warmup_momentum), then a cosine from
    lr0 down to lr0 * lrf at t = 1.
    """
    if not 0 <= t <= 1:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    tw = min(cfg.warmup_epochs / cfg.epochs, 1.0) if cfg.epochs else 0.0
    if t < tw:
        f = t / tw
        return Schedule(
            cfg.lr0 * f,
            cfg.warmup_bias_lr + (cfg.lr0 - cfg.warmup_bias_lr) * f,
            cfg.warmup_momentum + (cfg.momentum - cfg.warmup_momentum) * f,
        )
    u = (t - tw) / (1 - tw) if tw < 1 else 1.0
    lr = cfg.lr0 * (cfg.lrf + (1 - cfg.lrf) * 0.5 * (1 + math.cos(math.pi * u)))
    return Schedule(lr, lr, cfg.momentum)


class NonFiniteGradient(ArithmeticError):
    pass


def sgd_update(psi: np.ndarray, g: np.ndarray, v: np.ndarray, lr: float, momentum: float, weight_decay: float) -> None:
    """In place: v <- momentum v + g + wd psi; psi <- psi - lr v."""
    v *= momentum
    v += g
    if weight_decay:
        v += weight_decay * psi
    psi -= (lr * v).astype(psi.dtype, copy=False)


def sgd_step(
    params: Sequence,
    grads: Sequence[np.ndarray | None],
    state: dict[int, np.ndarray],
    t: float,
    cfg: OptimConfig,
    groups: Sequence[str] | None = None,
    names: Sequence[str] | None = None,
) -> Schedule:
    """One momentum-SGD step over ``params`` (arrays or Tensors, updated in place).

    ``groups`` tags each tensor as ``weight``, ``bias`` or ``norm``; only
    weights are decayed and biases follow the bias warmup rate.  ``state``
    maps parameter position to its velocity buffer.
    """
    groups = list(groups) if groups is not None else ["weight"] * len(params)
    names = list(names) if names is not None else [f"param[{i}]" for i in range(len(params))]
    if not len(params) == len(grads) == len(groups) == len(names):
        raise ValueError("params, grads, groups and names must align")
    for name, g in zip(names, grads):
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in {name}")
    sch = lr_schedule(t, cfg)
    for i, (p, g, grp) in enumerate(zip(params, grads, groups)):
        if g is None:
            continue
        data = p.data if hasattr(p, "data") and not isinstance(p, np.ndarray) else p
        if g.shape != data.shape:
            raise ValueError(f"{names[i]}: gradient shape {g.shape} != parameter shape {data.shape}")
        v = state.setdefault(i, np.zeros(data.shape, dtype=np.float64))
        lr = sch.bias_lr if grp == "bias" else sch.lr
        wd = cfg.weight_decay if grp == "weight" else 0.0
        sgd_update(data, g, v, lr, sch.momentum, wd)
    return sch
