"""Gradient-check fixtures shared by the unit and acceptance suites.

Each op case builds float64 leaves away from kinks (|x| >= 0.1 for abs,
clamp and leaky relu) and returns a scalar via a random weighted sum, so
every output element gets a distinct upstream gradient.
"""

from __future__ import annotations

import numpy as np

from tfnet import gradcheck
from tfnet import tensor as T
from tfnet.loss import assign_targets, detection_loss, reg_weights, RegConfig
from tfnet.model import ArchConfig, build, reference_config
from tfnet.tensor import Tensor, default_dtype


def _leaf(rng, shape, away_from_zero=False, positive=False):
    x = rng.uniform(0.1, 1.0, shape) if (away_from_zero or positive) else rng.normal(size=shape)
    if away_from_zero and not positive:
        x *= rng.choice([-1.0, 1.0], size=shape)
    return Tensor(x, requires_grad=True, dtype=np.float64)


def _weighted(out, rng):
    w = Tensor(rng.normal(size=out.shape), dtype=np.float64)
    return lambda o: T.reduce_sum(T.mul(o, w))


def _case(rng, make, *leaves):
    probe = make(*leaves)
    wsum = _weighted(probe, rng)
    return (lambda: wsum(make(*leaves))), list(leaves)


def _bn(rng, training):
    x = _leaf(rng, (3, 2, 3, 3))
    g = _leaf(rng, (2,), positive=True)
    b = _leaf(rng, (2,))
    rm, rv = np.zeros(2), np.ones(2)

    def make(x, g, b):
        # fresh buffers every call so finite differences see the same function
        return T.batch_norm(x, g, b, rm.copy(), rv.copy(), training)

    return _case(rng, make, x, g, b)


OP_CASES = {
    "add": lambda r: _case(r, T.add, _leaf(r, (3, 4)), _leaf(r, (4,))),
    "sub": lambda r: _case(r, T.sub, _leaf(r, (2, 3)), _leaf(r, (2, 1))),
    "mul": lambda r: _case(r, T.mul, _leaf(r, (3, 4)), _leaf(r, (3, 4))),
    "div": lambda r: _case(r, T.div, _leaf(r, (3, 4)), _leaf(r, (3, 4), positive=True)),
    "neg": lambda r: _case(r, T.neg, _leaf(r, (5,))),
    "square": lambda r: _case(r, T.square, _leaf(r, (5,))),
    "sqrt": lambda r: _case(r, T.sqrt, _leaf(r, (5,), positive=True)),
    "abs": lambda r: _case(r, T.abs, _leaf(r, (6,), away_from_zero=True)),
    "exp": lambda r: _case(r, T.exp, _leaf(r, (5,))),
    "log": lambda r: _case(r, T.log, _leaf(r, (5,), positive=True)),
    "atan": lambda r: _case(r, T.atan, _leaf(r, (5,))),
    "clamp": lambda r: _case(r, lambda a: T.clamp(a * 2.0, -1.05, 1.05), _leaf(r, (8,), away_from_zero=True)),
    "minimum": lambda r: _case(r, T.minimum, _leaf(r, (6,)), _leaf(r, (6,))),
    "maximum": lambda r: _case(r, T.maximum, _leaf(r, (6,)), _leaf(r, (6,))),
    "sigmoid": lambda r: _case(r, T.sigmoid, _leaf(r, (6,))),
    "silu": lambda r: _case(r, T.silu, _leaf(r, (6,))),
    "leaky_relu": lambda r: _case(r, T.leaky_relu, _leaf(r, (6,), away_from_zero=True)),
    "bce_with_logits": lambda r: (lambda t: _case(r, lambda a: T.bce_with_logits(a, t), _leaf(r, (6,))))(r.uniform(size=(6,))),
    "reduce_sum": lambda r: _case(r, lambda a: T.reduce_sum(a, axis=1, keepdims=True), _leaf(r, (3, 4))),
    "reduce_mean": lambda r: _case(r, lambda a: T.reduce_mean(a, axis=(0, 2)), _leaf(r, (2, 3, 4))),
    "reshape": lambda r: _case(r, lambda a: T.reshape(a, (4, 3)), _leaf(r, (2, 6))),
    "transpose": lambda r: _case(r, lambda a: T.transpose(a, (2, 0, 1)), _leaf(r, (2, 3, 4))),
    "take": lambda r: _case(r, lambda a: T.take(a, (np.array([0, 2, 0]), np.array([1, 1, 1]))), _leaf(r, (3, 3))),
    "concat": lambda r: _case(r, lambda a, b: T.concat([a, b], axis=1), _leaf(r, (2, 1, 3)), _leaf(r, (2, 2, 3))),
    "conv2d": lambda r: _case(
        r, lambda x, w, b: T.conv2d(x, w, b, stride=2, padding=1), _leaf(r, (2, 3, 5, 5)), _leaf(r, (4, 3, 3, 3)), _leaf(r, (4,))
    ),
    "conv2d_1x1": lambda r: _case(r, lambda x, w: T.conv2d(x, w), _leaf(r, (2, 3, 4, 4)), _leaf(r, (2, 3, 1, 1))),
    "max_pool2d": lambda r: _case(r, lambda x: T.max_pool2d(x, 3), _leaf(r, (1, 2, 4, 4))),
    "upsample_nearest2x": lambda r: _case(r, T.upsample_nearest2x, _leaf(r, (1, 2, 2, 3))),
    "space_to_depth": lambda r: _case(r, T.space_to_depth, _leaf(r, (1, 2, 4, 4))),
    "batch_norm_train": lambda r: _bn(r, True),
    "batch_norm_eval": lambda r: _bn(r, False),
}


def op_error(name: str, seed: int) -> float:
    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        fn, leaves = OP_CASES[name](rng)
        return gradcheck.check(fn, leaves)


# ---------------------------------------------------------------------------
# full detection loss on a micro model


def micro_config() -> ArchConfig:
    cfg = reference_config("toy").to_dict()
    cfg.update(input_size=64, width_multiple=0.03125, num_classes=2)
    return ArchConfig.from_dict(cfg)


def micro_loss_error(seed: int, coords: int = 16, reg: bool = True) -> float:
    """Relative error of d(total loss)/d(params and input) on sampled coordinates.

    The input plus ``coords`` distinct tensors contribute one coordinate
    each (seeds rotate through the whole parameter list); objectness
    targets are frozen at their starting values so the loss is a fixed
    smooth function during finite differencing.
    """
    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        g = build(micro_config(), seed)
        g.train()
        x = Tensor(rng.uniform(0, 1, (2, 3, 64, 64)), requires_grad=True, dtype=np.float64)
        targets = []
        for img in range(2):
            for _ in range(int(rng.integers(1, 4))):
                w, h = rng.uniform(6, 40, size=2)
                cx, cy = rng.uniform(w / 2, 64 - w / 2), rng.uniform(h / 2, 64 - h / 2)
                targets.append([img, int(rng.integers(0, 2)), cx, cy, w, h])
        targets = np.array(targets)
        buffers = {k: v.copy() for k, v in g.named_buffers()}
        rc = RegConfig(alpha=float(rng.uniform()), enabled=reg, strength=1e-4)

        def restore():
            for k, v in g.named_buffers():
                v[...] = buffers[k]

        def loss(frozen=None):
            restore()
            heads = g(x)
            asg = assign_targets(targets, g.anchors, g.strides, [h.shape[2:] for h in heads])
            return detection_loss(heads, asg, g.anchors, g.strides, reg=rc, params=reg_weights(g), obj_targets=frozen)

        frozen = loss().obj_targets
        fn = lambda: loss(frozen).total_tensor  # noqa: E731
        leaves = [x] + g.parameters()
        analytic = gradcheck.analytic_grads(fn, leaves)
        tensors = rng.choice(len(leaves), size=min(coords, len(leaves)), replace=False)
        picks = [(int(i), int(rng.integers(leaves[i].size))) for i in [0, *tensors]]
        a_vals, n_vals = [], []
        step = 1e-6
        with T.no_grad():
            for i, j in picks:
                flat = leaves[i].data.reshape(-1)
                orig = flat[j]
                flat[j] = orig + step
                hi = fn().item()
                flat[j] = orig - step
                lo = fn().item()
                flat[j] = orig
                n_vals.append((hi - lo) / (2 * step))
                a_vals.append(analytic[i].reshape(-1)[j])
        return gradcheck.relative_error(np.array(a_vals), np.array(n_vals))
