"""Static complexity accounting: layers, parameters, FLOPs, checkpoint size."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

from . import checkpoint
from .model import ArchConfig, ModelGraph, build
from .report import Column, render

FLOP_CONVENTION = "FLOPs count one multiply-add as 2 ops; batch norm and activation add 1 op per element"


@dataclass
class ProfileReport:
    layer_count: int
    parameter_count: int
    gflops: float
    checkpoint_size_mb: float
    input_size: int
    conv_flops: int = 0
    elementwise_flops: int = 0
    flop_convention: str = FLOP_CONVENTION

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def params_m(self) -> float:
        return self.parameter_count / 1e6


def conv_flops(k: int, cin: int, cout: int, hout: int, wout: int) -> int:
    return 2 * k * k * cin * cout * hout * wout


def count_flops(graph: ModelGraph, input_size: int) -> tuple[int, int]:
    """Return (conv FLOPs, batch-norm + activation FLOPs) for one image."""
    conv = elem = 0
    for _, _, prims in graph.trace(input_size):
        for p in prims:
            if p[0] == "conv":
                conv += conv_flops(*p[1:])
            else:
                elem += p[1]
    return conv, elem


def profile(graph: ModelGraph, input_size: int | None = None) -> ProfileReport:
    input_size = input_size or graph.config.input_size
    conv, elem = count_flops(graph, input_size)
    shapes = {k: v.shape for k, v in graph.state_dict().items()}
    size = checkpoint.serialized_size(shapes)
    return ProfileReport(
        layer_count=graph.layer_count(),
        parameter_count=graph.parameter_count(),
        gflops=(conv + elem) / 1e9,
        checkpoint_size_mb=size / 2**20,
        input_size=input_size,
        conv_flops=conv,
        elementwise_flops=elem,
    )


TABLE3_COLUMNS = [
    Column("size_mb", "Size (MB)", 1),
    Column("layers", "Layers", 0),
    Column("params_m", "Params (M)", 2),
    Column("gflops", "GFLOPs", 1),
]


def table_row(rep: ProfileReport) -> dict:
    return {
        "size_mb": rep.checkpoint_size_mb,
        "layers": rep.layer_count,
        "params_m": rep.params_m,
        "gflops": rep.gflops,
    }


def compare_variants(configs: Sequence[ArchConfig], names: Sequence[str] | None = None, seed: int = 0) -> dict:
    """Profile each config and tabulate it against the first one."""
    if len(configs) < 2:
        raise ValueError("compare_variants needs at least 2 configs")
    names = list(names) if names else [f"model{i}" for i in range(len(configs))]
    reports = [profile(build(cfg, seed)) for cfg in configs]
    table = render(
        "Computational Complexity",
        TABLE3_COLUMNS,
        [(n, table_row(r)) for n, r in zip(names, reports)],
        header=f"input {reports[0].input_size}x{reports[0].input_size}; {FLOP_CONVENTION}",
    )
    table["reports"] = [dict(name=n, **r.to_dict()) for n, r in zip(names, reports)]
    return table


def report_text(rep: ProfileReport, name: str = "model") -> str:
    return (
        f"# {FLOP_CONVENTION}\n"
        f"{'model':<12}{name}\n"
        f"{'input':<12}{rep.input_size}x{rep.input_size}\n"
        f"{'layers':<12}{rep.layer_count}\n"
        f"{'parameters':<12}{rep.parameter_count}\n"
        f"{'GFLOPs':<12}{rep.gflops:.3f}\n"
        f"{'size (MB)':<12}{rep.checkpoint_size_mb:.2f}\n"
    )
