"""Declarative detector configs and the executable layer graph built from them."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import tensor as T
from .tensor import Tensor

LAYER_KINDS = ("Focus", "Conv", "BottleneckCSP", "SPP", "Upsample", "Concat", "Detect")
CONV_KINDS = ("Focus", "Conv", "BottleneckCSP")
SPP_KERNELS = (5, 9, 13)
BN_MOMENTUM = 0.03
BN_EPS = 1e-3
CONFIG_DIR = Path(__file__).parent / "configs"


class ConfigError(ValueError):
    pass


@dataclass
class LayerSpec:
    kind: str
    nominal_channels: int = 0
    nominal_repeats: int = 1
    kernel: int = 1
    stride: int = 1
    from_: list[int] = field(default_factory=lambda: [-1])
    shortcut: bool = True

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> LayerSpec:
        d = dict(d)
        frm = d.pop("from", [-1])
        unknown = set(d) - {"kind", "nominal_channels", "nominal_repeats", "kernel", "stride", "shortcut"}
        if unknown:
            raise ConfigError(f"unknown LayerSpec keys: {sorted(unknown)}")
        return cls(from_=[frm] if isinstance(frm, int) else list(frm), **d)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["from"] = d.pop("from_")
        return d


@dataclass
class ArchConfig:
    depth_multiple: float
    width_multiple: float
    input_size: int = 416
    num_classes: int = 1
    anchors: list[list[list[float]]] = field(default_factory=list)
    strides: list[int] = field(default_factory=lambda: [8, 16, 32])
    backbone_spec: list[LayerSpec] = field(default_factory=list)
    neck_spec: list[LayerSpec] = field(default_factory=list)
    kernel_overrides: dict[int, int] = field(default_factory=dict)
    activation: str = "silu"

    @property
    def layers(self) -> list[LayerSpec]:
        return self.backbone_spec + self.neck_spec

    def validate(self) -> None:
        if not 0 < self.depth_multiple <= 1 or not 0 < self.width_multiple <= 1:
            raise ConfigError("depth_multiple and width_multiple must lie in (0, 1]")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.activation not in ("silu", "leaky_relu"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if len(self.strides) != 3 or len(self.anchors) != 3:
            raise ConfigError("exactly 3 detection levels are required (strides and anchors)")
        if any(b <= a for a, b in zip(self.strides, self.strides[1:])):
            raise ConfigError(f"strides must be strictly increasing, got {self.strides}")
        for s in self.strides:
            if self.input_size % s:
                raise ConfigError(f"stride {s} does not divide input_size {self.input_size}")
        for lvl in self.anchors:
            if len(lvl) != 3 or any(len(p) != 2 or min(p) <= 0 for p in lvl):
                raise ConfigError("each level needs 3 positive (width, height) anchor pairs")
        for idx, k in self.kernel_overrides.items():
            if not isinstance(k, int) or k < 1 or k % 2 == 0:
                raise ConfigError(f"kernel override for layer {idx} must be an odd positive int, got {k!r}")
        for i, spec in enumerate(self.layers):
            if spec.kind not in LAYER_KINDS:
                raise ConfigError(f"layer {i}: unknown kind {spec.kind!r}")
            if i == 0 and spec.from_ == [-1]:
                continue  # the network input
            for f in spec.from_:
                j = i + f if f < 0 else f
                if not 0 <= j < i:
                    raise ConfigError(f"layer {i}: invalid input reference {f}")
        layers = self.layers
        for idx in self.kernel_overrides:
            if not 0 <= idx < len(layers):
                raise ConfigError(f"kernel override refers to missing layer {idx}")
            if layers[idx].kind not in CONV_KINDS:
                raise ConfigError(f"kernel override on non-convolutional layer {idx} ({layers[idx].kind})")
        if not layers or layers[-1].kind != "Detect" or len(layers[-1].from_) != 3:
            raise ConfigError("the last layer must be a Detect over 3 inputs")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ArchConfig:
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown ArchConfig keys: {sorted(unknown)}")
        d["backbone_spec"] = [LayerSpec.from_dict(x) for x in d.get("backbone_spec", [])]
        d["neck_spec"] = [LayerSpec.from_dict(x) for x in d.get("neck_spec", [])]
        d["kernel_overrides"] = {int(k): v for k, v in d.get("kernel_overrides", {}).items()}
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["backbone_spec"] = [s.to_dict() for s in self.backbone_spec]
        d["neck_spec"] = [s.to_dict() for s in self.neck_spec]
        d["kernel_overrides"] = {str(k): v for k, v in sorted(self.kernel_overrides.items())}
        return d

    @classmethod
    def load(cls, path) -> ArchConfig:
        path = Path(path)
        if not path.exists() and (CONFIG_DIR / path.name).exists():
            path = CONFIG_DIR / path.name
        try:
            return cls.from_dict(json.loads(path.read_text()))
        except (json.JSONDecodeError, TypeError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc


def reference_config(name: str) -> ArchConfig:
    """Load a shipped config by stem, e.g. ``"yolov5s"`` or ``"tfnet"``."""
    return ArchConfig.load(CONFIG_DIR / f"{name}.json")


def scale_repeats(n: int, depth_multiple: float) -> int:
    return max(1, round(n * depth_multiple))


def scale_channels(c: int, width_multiple: float) -> int:
    return max(8, int(math.floor(c * width_multiple / 8 + 0.5)) * 8)


# ---------------------------------------------------------------------------
# blocks
#
# ``layer_count`` follows the module-tree convention: every block counts
# itself plus its children, with the batch norm of each Conv block folded
# into its convolution (the inference graph).


class _Init:
    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.dtype = T.get_default_dtype()

    def conv(self, cout, cin, k) -> Tensor:
        bound = 1.0 / math.sqrt(cin * k * k)
        return Tensor(self.rng.uniform(-bound, bound, (cout, cin, k, k)), requires_grad=True, dtype=self.dtype)

    def const(self, value, n) -> Tensor:
        return Tensor(np.full(n, value), requires_grad=True, dtype=self.dtype)


class Module:
    def named_parameters(self, prefix: str = ""):
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.")
            elif isinstance(val, list):
                for i, m in enumerate(val):
                    if isinstance(m, Module):
                        yield from m.named_parameters(f"{prefix}{name}.{i}.")
                    elif isinstance(m, Tensor) and m.requires_grad:
                        yield f"{prefix}{name}.{i}", m

    def named_buffers(self, prefix: str = ""):
        for name, val in vars(self).items():
            if isinstance(val, np.ndarray):
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_buffers(f"{prefix}{name}.")
            elif isinstance(val, list):
                for i, m in enumerate(val):
                    if isinstance(m, Module):
                        yield from m.named_buffers(f"{prefix}{name}.{i}.")


class BatchNorm(Module):
    def __init__(self, init: _Init, c: int):
        self.weight = init.const(1.0, c)
        self.bias = init.const(0.0, c)
        self.running_mean = np.zeros(c, dtype=np.float64)
        self.running_var = np.ones(c, dtype=np.float64)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return T.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var, training, BN_MOMENTUM, BN_EPS)


def _act(x: Tensor, kind: str) -> Tensor:
    return T.silu(x) if kind == "silu" else T.leaky_relu(x, 0.1)


class Conv(Module):
    """conv2d (no bias) + batch norm + activation."""

    def __init__(self, init: _Init, c1: int, c2: int, k: int = 1, s: int = 1, act: str = "silu"):
        self.c1, self.c2, self.k, self.s, self.act = c1, c2, k, s, act
        self.weight = init.conv(c2, c1, k)
        self.bn = BatchNorm(init, c2)

    def __call__(self, x, training):
        return _act(self.bn(T.conv2d(x, self.weight, None, self.s, self.k // 2), training), self.act)

    def layer_count(self) -> int:
        return 3

    def trace(self, shape):
        c, h, w = shape
        ho, wo = (h + 2 * (self.k // 2) - self.k) // self.s + 1, (w + 2 * (self.k // 2) - self.k) // self.s + 1
        prims = [("conv", self.k, self.c1, self.c2, ho, wo), ("bn", self.c2 * ho * wo), ("act", self.c2 * ho * wo)]
        return (self.c2, ho, wo), prims


class Focus(Module):
    """Space-to-depth stem: folds 2x2 pixel blocks into channels, then a Conv."""

    def __init__(self, init, c1, c2, k=3, act="silu"):
        self.conv = Conv(init, c1 * 4, c2, k, 1, act)

    def __call__(self, x, training):
        return self.conv(T.space_to_depth(x), training)

    def layer_count(self) -> int:
        return 1 + self.conv.layer_count()

    def trace(self, shape):
        c, h, w = shape
        return self.conv.trace((c * 4, h // 2, w // 2))


class Bottleneck(Module):
    def __init__(self, init, c, shortcut, k=3, act="silu"):
        self.cv1 = Conv(init, c, c, 1, 1, act)
        self.cv2 = Conv(init, c, c, k, 1, act)
        self.add = shortcut

    def __call__(self, x, training):
        y = self.cv2(self.cv1(x, training), training)
        return T.add(x, y) if self.add else y

    def layer_count(self) -> int:
        return 1 + 2 * 3

    def trace(self, shape):
        s1, p1 = self.cv1.trace(shape)
        s2, p2 = self.cv2.trace(s1)
        return s2, p1 + p2


class BottleneckCSP(Module):
    """Cross-stage partial block: a bottleneck stack on one half of the
    channels, a plain 1x1 projection on the other, merged after BN."""

    def __init__(self, init, c1, c2, n=1, shortcut=True, k=3, act="silu"):
        c_ = max(c2 // 2, 1)
        self.c1, self.c_, self.act = c1, c_, act
        self.cv1 = Conv(init, c1, c_, 1, 1, act)
        self.cv2_weight = init.conv(c_, c1, 1)
        self.cv3_weight = init.conv(c_, c_, 1)
        self.cv4 = Conv(init, 2 * c_, c2, 1, 1, act)
        self.bn = BatchNorm(init, 2 * c_)
        self.m = [Bottleneck(init, c_, shortcut, k, act) for _ in range(n)]

    def __call__(self, x, training):
        y = self.cv1(x, training)
        for b in self.m:
            y = b(y, training)
        y1 = T.conv2d(y, self.cv3_weight)
        y2 = T.conv2d(x, self.cv2_weight)
        return self.cv4(_act(self.bn(T.concat([y1, y2], 1), training), self.act), training)

    def layer_count(self) -> int:
        # block + cv1 + cv2 + cv3 + cv4 + bn + act + sequential + bottlenecks
        return 1 + 3 + 1 + 1 + 3 + 1 + 1 + 1 + sum(b.layer_count() for b in self.m)

    def trace(self, shape):
        _, h, w = shape
        s, prims = self.cv1.trace(shape)
        for b in self.m:
            s, p = b.trace(s)
            prims += p
        c_ = self.c_
        prims += [("conv", 1, c_, c_, h, w), ("conv", 1, self.c1, c_, h, w), ("bn", 2 * c_ * h * w), ("act", 2 * c_ * h * w)]
        s, p = self.cv4.trace((2 * c_, h, w))
        return s, prims + p


class SPP(Module):
    def __init__(self, init, c1, c2, ks=SPP_KERNELS, act="silu"):
        c_ = c1 // 2
        self.ks = tuple(ks)
        self.cv1 = Conv(init, c1, c_, 1, 1, act)
        self.cv2 = Conv(init, c_ * (len(ks) + 1), c2, 1, 1, act)

    def __call__(self, x, training):
        x = self.cv1(x, training)
        return self.cv2(T.concat([x] + [T.max_pool2d(x, k, 1, k // 2) for k in self.ks], 1), training)

    def layer_count(self) -> int:
        return 1 + 3 + 3 + 1 + len(self.ks)

    def trace(self, shape):
        (c, h, w), p1 = self.cv1.trace(shape)
        s, p2 = self.cv2.trace((c * (len(self.ks) + 1), h, w))
        return s, p1 + p2


class Upsample(Module):
    def __call__(self, x, training):
        return T.upsample_nearest2x(x)

    def layer_count(self) -> int:
        return 1

    def trace(self, shape):
        c, h, w = shape
        return (c, 2 * h, 2 * w), []


class Concat(Module):
    def __call__(self, xs, training):
        return T.concat(xs, 1)

    def layer_count(self) -> int:
        return 1

    def trace(self, shapes):
        return (sum(s[0] for s in shapes), shapes[0][1], shapes[0][2]), []


class Detect(Module):
    """Per-level 1x1 prediction convs; outputs raw logits [N, na*(5+nc), H, W]."""

    def __init__(self, init, chs, num_classes, anchors, strides, input_size, bias_init="prior"):
        self.na = len(anchors[0])
        self.no = 5 + num_classes
        self.weights = [init.conv(self.na * self.no, c, 1) for c in chs]
        self.biases = []
        for stride in strides:
            b = np.zeros((self.na, self.no))
            if bias_init == "prior":
                # ~8 objects per image, ~uniform class prior
                b[:, 4] = math.log(8 / (input_size / stride) ** 2)
                b[:, 5:] = math.log(0.6 / (num_classes - 0.99))
            self.biases.append(Tensor(b.reshape(-1), requires_grad=True, dtype=init.dtype))

    def __call__(self, xs, training):
        return [T.conv2d(x, w, b) for x, w, b in zip(xs, self.weights, self.biases)]

    def layer_count(self) -> int:
        return 1 + 1 + len(self.weights)

    def trace(self, shapes):
        prims = [("conv", 1, s[0], self.na * self.no, s[1], s[2]) for s in shapes]
        return [(self.na * self.no, s[1], s[2]) for s in shapes], prims


# ---------------------------------------------------------------------------


@dataclass
class RealizedLayer:
    index: int
    kind: str
    from_: list[int]
    channels: int
    repeats: int
    kernel: int
    stride: int
    module: Module


class ModelGraph(Module):
    """Instantiated detector: ordered layers with realized widths and depths."""

    def __init__(self, config: ArchConfig, layers: list[RealizedLayer], seed: int):
        self.config = config
        self.layers = layers
        self.seed = seed
        self.training = False
        self.anchors = np.asarray(config.anchors, dtype=np.float64)
        self.strides = list(config.strides)
        self._save = {j for layer in layers for j in layer.from_ if j != layer.index - 1}

    # parameters ------------------------------------------------------------
    def named_parameters(self, prefix: str = ""):
        for layer in self.layers:
            yield from layer.module.named_parameters(f"{prefix}layers.{layer.index}.")

    def named_buffers(self, prefix: str = ""):
        for layer in self.layers:
            yield from layer.module.named_buffers(f"{prefix}layers.{layer.index}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.named_parameters()}
        out.update({k: v for k, v in self.named_buffers()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = (set(own) | set(bufs)) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks {len(missing)} tensors, e.g. {sorted(missing)[0]}")
        for k, p in own.items():
            if state[k].shape != p.shape:
                raise ValueError(f"{k}: checkpoint shape {state[k].shape} != model shape {p.shape}")
            p.data = np.asarray(state[k], dtype=p.dtype).copy()
        for k, b in bufs.items():
            b[...] = state[k]

    def param_group(self, name: str) -> str:
        """``weight`` (conv kernels), ``norm`` (BN scale) or ``bias``."""
        if name.endswith("bn.weight"):
            return "norm"
        if name.endswith("bias") or ".biases." in name:
            return "bias"
        return "weight"

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> ModelGraph:
        self.training = mode
        return self

    def eval(self) -> ModelGraph:
        return self.train(False)

    # execution ---------------------------------------------------------------
    def __call__(self, x: Tensor) -> list[Tensor]:
        return forward(self, x)

    def layer_count(self) -> int:
        # model root + its layer sequence
        return 2 + sum(layer.module.layer_count() for layer in self.layers)

    def trace(self, input_size: int):
        """Shape-only walk returning per-layer ``(index, out_shape, primitives)``."""
        outs: list[Any] = []
        rows = []
        shape: Any = (3, input_size, input_size)
        for layer in self.layers:
            if layer.index == 0:
                src = shape
            elif len(layer.from_) == 1:
                src = outs[layer.from_[0]]
            else:
                src = [outs[j] for j in layer.from_]
            out, prims = layer.module.trace(src)
            outs.append(out)
            rows.append((layer.index, out, prims))
        return rows


def _resolve_from(i: int, frm: list[int]) -> list[int]:
    return [i + f if f < 0 else f for f in frm]


def build(config: ArchConfig, seed: int = 0, detect_bias: str = "prior") -> ModelGraph:
    """Instantiate the layer graph described by ``config``.

    Parameters are drawn from a fan-in scaled uniform distribution seeded by
    ``seed``.  ``detect_bias="zero"`` leaves the prediction biases at zero.
    """
    config.validate()
    init = _Init(seed)
    act = config.activation
    chans: list[int] = []
    layers: list[RealizedLayer] = []
    for i, spec in enumerate(config.layers):
        frm = _resolve_from(i, spec.from_)
        c_in = 3 if i == 0 else chans[frm[0]]
        k = config.kernel_overrides.get(i, spec.kernel)
        n = scale_repeats(spec.nominal_repeats, config.depth_multiple)
        kind = spec.kind
        if kind in ("Focus", "Conv", "BottleneckCSP", "SPP"):
            c_out = scale_channels(spec.nominal_channels, config.width_multiple)
        if kind == "Focus":
            mod: Module = Focus(init, c_in, c_out, k, act)
        elif kind == "Conv":
            mod = Conv(init, c_in, c_out, k, spec.stride, act)
        elif kind == "BottleneckCSP":
            mod = BottleneckCSP(init, c_in, c_out, n, spec.shortcut, k, act)
        elif kind == "SPP":
            mod = SPP(init, c_in, c_out, SPP_KERNELS, act)
        elif kind == "Upsample":
            c_out, mod = c_in, Upsample()
        elif kind == "Concat":
            c_out, mod = sum(chans[j] for j in frm), Concat()
        else:
            mod = Detect(
                init, [chans[j] for j in frm], config.num_classes, config.anchors, config.strides, config.input_size, detect_bias
            )
            c_out = 0
        chans.append(c_out)
        layers.append(RealizedLayer(i, kind, frm, c_out, n, k, spec.stride, mod))
    graph = ModelGraph(config, layers, seed)
    shapes = [s for s in graph.trace(config.input_size)[-1][1]]
    for s, stride in zip(shapes, config.strides):
        if s[1] != config.input_size // stride:
            raise ConfigError(f"head grid {s[1]} does not match stride {stride} at input {config.input_size}")
    return graph


def forward(graph: ModelGraph, batch: Tensor) -> list[Tensor]:
    """Run the graph on an ``N x 3 x S x S`` batch and return the 3 raw heads."""
    if not isinstance(batch, Tensor):
        batch = Tensor(batch)
    s = graph.config.input_size
    if batch.ndim != 4 or batch.shape[1] != 3 or batch.shape[2:] != (s, s):
        raise ValueError(f"expected input of shape (N, 3, {s}, {s}), got {batch.shape}")
    outs: dict[int, Any] = {}
    x: Any = batch
    for layer in graph.layers:
        if layer.index:
            if len(layer.from_) == 1:
                x = outs[layer.from_[0]] if layer.from_[0] != layer.index - 1 else x
            else:
                x = [x if j == layer.index - 1 else outs[j] for j in layer.from_]
        x = layer.module(x, graph.training)
        if layer.index in graph._save:
            outs[layer.index] = x
    return x
