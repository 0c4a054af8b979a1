"""Training loop: batching and augmentation, SGD, per-epoch validation,
checkpoints and early stopping."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint
from .data import Sample, contrast_enhance, letterbox, mosaic, to_chw
from .infer import predict
from .loss import AssignConfig, LossWeights, RegConfig, assign_targets, build_targets, detection_loss, reg_weights
from .metrics import EvalReport, evaluate
from .model import ModelGraph
from .optim import OptimConfig, lr_schedule, sgd_step
from .postprocess import DecodeConfig
from .tensor import NonFiniteError, Tensor, backward

log = logging.getLogger(__name__)

RUNLOG_KEYS = ("epoch", "lr", "box", "obj", "cls", "reg", "total", "precision", "recall", "map50", "mean_iou", "seconds")
# alternative lr0 recorded in run.json for reference; OptimConfig defaults to 0.01
ALT_LR0 = 0.1


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    reg: RegConfig = field(default_factory=RegConfig)
    assign: AssignConfig = field(default_factory=AssignConfig)
    mosaic_prob: float = 0.0
    contrast: bool = False
    # decode settings of the per-epoch validation pass
    val_conf_threshold: float = 0.25
    val_sweep_conf: float = 0.001
    val_max_detections: int = 300

    def __post_init__(self):
        if not 0 <= self.mosaic_prob <= 1:
            raise ValueError("mosaic_prob must lie in [0, 1]")
        if not 0 < self.val_sweep_conf <= self.val_conf_threshold < 1:
            raise ValueError("need 0 < val_sweep_conf <= val_conf_threshold < 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        kinds = {"optim": OptimConfig, "loss": LossWeights, "reg": RegConfig, "assign": AssignConfig}
        for k, typ in kinds.items():
            if k in d and isinstance(d[k], dict):
                d[k] = typ(**d[k])
        return cls(**d)

    @classmethod
    def load(cls, path) -> TrainConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))


def reference_train_config(name: str) -> TrainConfig:
    """Shipped training settings by stem, e.g. ``"toy_train"``."""
    from .model import CONFIG_DIR

    return TrainConfig.load(CONFIG_DIR / f"{name}.json")


def window_means(values: Sequence[float], window: int = 20) -> list[float]:
    """Means of consecutive non-overlapping windows (a trailing partial window is dropped)."""
    n = len(values) // window
    return [float(np.mean(values[i * window : (i + 1) * window])) for i in range(n)]


@dataclass
class TrainResult:
    epochs_run: int
    best_epoch: int
    best_fitness: float
    stopped_early: bool
    history: list[dict]


def _prepare(samples: Sequence[Sample], idx: Sequence[int], size: int, cfg: TrainConfig, rng) -> tuple[np.ndarray, np.ndarray]:
    arrs, labels = [], []
    for i in idx:
        if cfg.mosaic_prob and rng.random() < cfg.mosaic_prob:
            others = rng.integers(0, len(samples), size=3)
            smp = mosaic([samples[i]] + [samples[j] for j in others], size, int(rng.integers(2**31)))
        else:
            smp = samples[i]
            if cfg.contrast:
                smp = contrast_enhance(smp)
            smp, _ = letterbox(smp, size)
        arrs.append(to_chw(smp.image))
        labels.append(np.array([[b.class_id, b.cx, b.cy, b.w, b.h] for b in smp.labels]).reshape(-1, 5))
    return np.stack(arrs), build_targets(labels, size)


def unassignable_labels(samples: Sequence[Sample], size: int, anchors, ratio_threshold: float) -> int:
    """Count letterboxed labels whose shape is outside the ratio test for every anchor.

    Such boxes can never become positives, so recall on them stays at zero.
    """
    anc = np.asarray(anchors, dtype=np.float64).reshape(-1, 2)
    n = 0
    for smp in samples:
        scale = size / max(smp.height, smp.width)
        for b in smp.labels:
            wh = np.array([b.w * smp.width, b.h * smp.height]) * scale
            r = wh / anc
            n += not np.any(np.maximum(r, 1 / r).max(axis=1) < ratio_threshold)
    return n


def validate(graph: ModelGraph, samples: Sequence[Sample], cfg: TrainConfig) -> EvalReport:
    dec = DecodeConfig(cfg.val_sweep_conf, cfg.assign.iou_threshold, cfg.val_max_detections)
    dets = predict(graph, samples, dec, contrast=cfg.contrast)
    return evaluate(dets, samples, DecodeConfig(cfg.val_conf_threshold, cfg.assign.iou_threshold))


def train_step(graph: ModelGraph, images: np.ndarray, targets: np.ndarray, cfg: TrainConfig, state: dict, t: float):
    """Forward, loss, backward and one SGD step; returns (LossBreakdown, Schedule)."""
    graph.train()
    graph.zero_grad()
    heads = graph(Tensor(images))
    grids = [h.shape[2:] for h in heads]
    asg = assign_targets(targets, graph.anchors, graph.strides, grids, cfg.assign)
    lb = detection_loss(heads, asg, graph.anchors, graph.strides, cfg.loss, cfg.reg, reg_weights(graph))
    backward(lb.total_tensor)
    names, params = zip(*graph.named_parameters())
    sch = sgd_step(
        params,
        [p.grad for p in params],
        state,
        t,
        cfg.optim,
        groups=[graph.param_group(n) for n in names],
        names=names,
    )
    return lb, sch


def train(
    graph: ModelGraph,
    train_samples: Sequence[Sample],
    val_samples: Sequence[Sample] | None,
    cfg: TrainConfig,
    seed: int = 0,
    out_dir=None,
    validate_fn: Callable[[ModelGraph, int], float | EvalReport] | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train ``graph`` in place.

    Fitness is validation mAP@0.5; a strict improvement resets the patience
    counter and rewrites ``best.ckpt``.  Training stops after ``patience``
    epochs without improvement or at ``epochs``.  ``validate_fn`` replaces
    the validation pass (it receives the graph and epoch index and returns
    an EvalReport or a bare fitness value).
    """
    if not train_samples:
        raise ValueError("training split is empty")
    oc = cfg.optim
    size = graph.config.input_size
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        runlog = (out / "runlog.jsonl").open("w")
        (out / "run.json").write_text(
            json.dumps({"seed": seed, "train_config": cfg.to_dict(), "alt_lr0": ALT_LR0, "arch": graph.config.to_dict()}, indent=1)
            + "\n"
        )
        checkpoint.save(out / "last.ckpt", graph.state_dict())
        checkpoint.save(out / "best.ckpt", graph.state_dict())
    val_samples = list(val_samples) if val_samples else list(train_samples)
    bad = unassignable_labels(train_samples, size, graph.anchors, cfg.assign.anchor_ratio_threshold)
    if bad:
        log.warning("%d training labels match no anchor (ratio threshold %g) and will never be assigned", bad, cfg.assign.anchor_ratio_threshold)
    state: dict[int, np.ndarray] = {}
    history: list[dict] = []
    best_fit, best_epoch = -np.inf, -1
    nb = int(np.ceil(len(train_samples) / oc.batch_size))
    stopped_early = False
    try:
        for epoch in range(oc.epochs):
            t0 = time.perf_counter()
            rng = np.random.default_rng([seed, epoch])
            order = rng.permutation(len(train_samples))
            sums = dict.fromkeys(("box", "obj", "cls", "reg", "total"), 0.0)
            lr = 0.0
            for b in range(nb):
                idx = order[b * oc.batch_size : (b + 1) * oc.batch_size]
                images, targets = _prepare(train_samples, idx, size, cfg, rng)
                t = min((epoch + b / nb) / oc.epochs, 1.0)
                last_good = graph.state_dict()
                last_good = {k: v.copy() for k, v in last_good.items()}
                try:
                    lb, sch = train_step(graph, images, targets, cfg, state, t)
                except (NonFiniteError, ArithmeticError) as exc:
                    graph.load_state_dict(last_good)
                    raise TrainingDiverged(f"epoch {epoch} batch {b}: {exc}") from exc
                lr = sch.lr
                for k, v in lb.as_dict().items():
                    sums[k] += v / nb
            if validate_fn is not None:
                res = validate_fn(graph, epoch)
            else:
                res = validate(graph, val_samples, cfg)
            rep = res if isinstance(res, EvalReport) else None
            fitness = rep.map50 if rep is not None else float(res)
            row = {
                "epoch": epoch,
                "lr": lr,
                **sums,
                "precision": rep.precision if rep else None,
                "recall": rep.recall if rep else None,
                "map50": fitness,
                "mean_iou": rep.mean_iou if rep else None,
                "seconds": round(time.perf_counter() - t0, 3),
            }
            history.append(row)
            if out is not None:
                runlog.write(json.dumps(row) + "\n")
                runlog.flush()
                checkpoint.save(out / "last.ckpt", graph.state_dict())
            if on_epoch:
                on_epoch(row)
            log.info("epoch %d total %.4f map50 %.4f", epoch, row["total"], fitness)
            if fitness > best_fit:
                best_fit, best_epoch = fitness, epoch
                if out is not None:
                    checkpoint.save(out / "best.ckpt", graph.state_dict())
            elif epoch - best_epoch >= oc.patience:
                stopped_early = True
                break
    except TrainingDiverged:
        if out is not None:
            checkpoint.save(out / "last.ckpt", graph.state_dict())
        raise
    finally:
        if out is not None:
            runlog.close()
    return TrainResult(len(history), best_epoch, float(best_fit) if history else float("nan"), stopped_early, history)


def schedule_table(cfg: OptimConfig, points: int = 11) -> list[tuple[float, float, float, float]]:
    """(t, lr, bias_lr, momentum) samples, handy for plotting the schedule."""
    return [(t, *lr_schedule(t, cfg)) for t in np.linspace(0, 1, points)]
