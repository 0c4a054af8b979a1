"""Command-line entry point: ``tfnet <synth|train|eval|detect|profile|compare>``.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path
from typing import Any

import numpy as np

from . import checkpoint, schemas
from .checkpoint import CheckpointError
from .data import DatasetError, Sample, load_dataset, split, write_image
from .infer import predict
from .metrics import EvalReport, LatencyMeter, evaluate, format_report, ground_truths, pr_curve_and_ap, write_pr_csv
from .model import CONFIG_DIR, ArchConfig, ConfigError, ModelGraph, build
from .postprocess import DecodeConfig, read_detections, write_detections
from .profile import compare_variants, profile, report_text
from .synth import SynthConfig, write_dataset
from .tensor import NonFiniteError
from .train import TrainConfig, TrainingDiverged, train

log = logging.getLogger("tfnet")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config plumbing


def parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    """Apply ``key.path=value`` assignments to a nested dict (in place)."""
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not of the form key.path=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = cfg
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise UsageError(f"override {key!r}: {p!r} is not a config section")
            node = node[p]
        if parts[-1] not in node:
            raise UsageError(f"override {key!r}: unknown key {parts[-1]!r}")
        node[parts[-1]] = parse_value(value)
    return cfg


def split_overrides(overrides: list[str]) -> tuple[list[str], list[str]]:
    """Separate ``arch.*`` overrides from the subcommand's own config."""
    arch = [o[len("arch.") :] for o in overrides if o.startswith("arch.")]
    rest = [o for o in overrides if not o.startswith("arch.")]
    return arch, rest


def load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None


def resolve_config_path(ref: str) -> Path:
    p = Path(ref)
    if p.exists():
        return p
    shipped = CONFIG_DIR / f"{ref}.json"
    if shipped.exists():
        return shipped
    raise UsageError(f"no config file or shipped config named {ref!r}")


def load_arch(ref: str, overrides: list[str]) -> ArchConfig:
    d = apply_overrides(load_json(resolve_config_path(ref)), overrides)
    try:
        cfg = ArchConfig.from_dict(d)
        cfg.validate()
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"{ref}: malformed config ({exc})") from None
    return cfg


def resolve_seed(seed: int | None) -> int:
    if seed is not None:
        return seed
    env = os.environ.get("TFNK_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"TFNK_SEED must be an integer, got {env!r}") from None


def write_json(path: Path, obj: dict, schema: str) -> None:
    schemas.validate(obj, schema)
    path.write_text(json.dumps(obj, indent=1, sort_keys=False) + "\n")


def make_out(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"cannot write to {out}: {exc.strerror or exc}") from None
    return out


def load_graph(arch: ArchConfig, ckpt, seed: int) -> ModelGraph:
    graph = build(arch, seed)
    if not Path(ckpt).exists():
        raise UsageError(f"checkpoint not found: {ckpt}")
    try:
        graph.load_state_dict(checkpoint.load(ckpt))
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{ckpt}: {exc}") from None
    return graph.eval()


def load_split(root) -> list[Sample]:
    issues: list[str] = []
    samples = load_dataset(root, issues)
    for msg in issues:
        log.warning(msg)
    return samples


def decode_cfg(args, rest: list[str]) -> DecodeConfig:
    d = {"conf_threshold": args.conf, "nms_iou_threshold": args.iou, "max_detections": args.max_det}
    return DecodeConfig(**apply_overrides(d, rest))


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    cfg = SynthConfig().to_dict()
    if args.config:
        cfg.update(load_json(args.config))
    cfg["seed"] = args.seed
    cfg = apply_overrides(cfg, args.set)
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    out = make_out(args.out)
    write_dataset(out, SynthConfig(**cfg), args.count)
    schemas.validate(json.loads((out / "manifest.json").read_text()), "synth_manifest")
    print(f"wrote {args.count} scenes to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    arch_over, rest = split_overrides(args.set)
    arch = load_arch(args.arch, arch_over)
    tdict = TrainConfig().to_dict()
    if args.train_config:
        src = load_json(resolve_config_path(args.train_config))
        for k, v in src.items():
            if isinstance(v, dict) and isinstance(tdict.get(k), dict):
                tdict[k].update(v)
            else:
                tdict[k] = v
    if args.epochs is not None:
        tdict["optim"]["epochs"] = args.epochs
    tcfg = TrainConfig.from_dict(apply_overrides(tdict, rest))
    samples = load_split(args.data)
    if not samples:
        raise DatasetError(f"{args.data}: dataset is empty")
    out = make_out(args.out)
    if args.val_data:
        train_s, val_s = samples, load_split(args.val_data)
    elif args.split >= 1 or len(samples) < 2:
        train_s, val_s = samples, samples
    else:
        man = split([s.source_id for s in samples], args.split, args.seed)
        (out / "split.json").write_text(man.to_json() + "\n")
        by_id = {s.source_id: s for s in samples}
        train_s, val_s = [by_id[i] for i in man.train], [by_id[i] for i in man.test]
    graph = build(arch, args.seed)
    res = train(graph, train_s, val_s, tcfg, seed=args.seed, out_dir=out)
    for row in res.history:
        schemas.validate(row, "runlog_row")
    schemas.validate(json.loads((out / "run.json").read_text()), "run_meta")
    if res.history:
        from .plots import training_curves_png

        training_curves_png(out / "training_curves.png", res.history)
    state = "early stop" if res.stopped_early else "done"
    print(f"{state}: {res.epochs_run} epochs, best map50 {res.best_fitness:.4f} at epoch {res.best_epoch}")
    return EXIT_OK


def cmd_eval(args) -> int:
    arch_over, rest = split_overrides(args.set)
    cfg = decode_cfg(args, rest)
    samples = load_split(args.data)
    if not samples:
        raise DatasetError(f"{args.data}: cannot evaluate an empty split")
    meter = LatencyMeter()
    if args.detections:
        if not Path(args.detections).exists():
            raise UsageError(f"detections file not found: {args.detections}")
        dets = read_detections(args.detections)
        source = {"detections": str(args.detections)}
    else:
        if not args.arch or not args.ckpt:
            raise UsageError("eval needs --arch and --ckpt, or --detections")
        graph = load_graph(load_arch(args.arch, arch_over), args.ckpt, args.seed)
        sweep = DecodeConfig(min(args.sweep_conf, cfg.conf_threshold), cfg.nms_iou_threshold, cfg.max_detections)
        dets = predict(graph, samples, sweep, meter, batch_size=args.batch, contrast=args.contrast)
        source = {"arch": args.arch, "checkpoint": str(args.ckpt)}
    rep = evaluate(dets, samples, cfg, meter if not args.detections else None, iou_mode=args.iou_mode)
    out = make_out(args.out)
    curves, _ = pr_curve_and_ap([dets.get(s.source_id, []) for s in samples], [ground_truths(s) for s in samples])
    write_pr_csv(out / "pr_curve.csv", curves)
    table = format_report([rep], [args.name])
    (out / "table.txt").write_text(table["text"])
    write_json(
        out / "report.json",
        {"seed": args.seed, "name": args.name, "images": len(samples), **source, "decode": vars_of(cfg), "metrics": rep.to_dict()},
        "eval_report",
    )
    from .plots import pr_curve_png

    pr_curve_png(out / "pr_curve.png", curves, f"{args.name}  mAP@0.5 {rep.map50:.3f}")
    print(table["text"], end="")
    return EXIT_OK


def vars_of(cfg) -> dict:
    return {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}


def draw_boxes(image: np.ndarray, dets, color=(1.0, 0.2, 0.2)) -> np.ndarray:
    """RGB copy of ``image`` with 1-pixel box outlines."""
    rgb = np.repeat(image, 3, axis=2) if image.shape[2] == 1 else image.copy()
    h, w = rgb.shape[:2]
    for d in dets:
        x1, y1, x2, y2 = (int(round(v)) for v in d.box)
        x1, x2 = np.clip([x1, x2 - 1], 0, w - 1)
        y1, y2 = np.clip([y1, y2 - 1], 0, h - 1)
        rgb[y1, x1 : x2 + 1] = color
        rgb[y2, x1 : x2 + 1] = color
        rgb[y1 : y2 + 1, x1] = color
        rgb[y1 : y2 + 1, x2] = color
    return rgb


def cmd_detect(args) -> int:
    arch_over, rest = split_overrides(args.set)
    cfg = decode_cfg(args, rest)
    graph = load_graph(load_arch(args.arch, arch_over), args.ckpt, args.seed)
    samples = load_split(args.data)
    out = make_out(args.out)
    dets = predict(graph, samples, cfg, batch_size=args.batch, contrast=args.contrast)
    write_detections(out / "detections.txt", dets)
    if args.overlays:
        ov = out / "overlays"
        ov.mkdir(exist_ok=True)
        for smp in samples:
            d = dets.get(smp.source_id, [])
            write_image(ov / f"{smp.source_id}.ppm", draw_boxes(smp.image, d))
            write_detections(ov / f"{smp.source_id}.txt", {smp.source_id: d})
    print(f"{sum(len(v) for v in dets.values())} detections on {len(samples)} images -> {out / 'detections.txt'}")
    return EXIT_OK


def cmd_profile(args) -> int:
    arch_over, _ = split_overrides(args.set)
    arch = load_arch(args.arch, arch_over)
    rep = profile(build(arch, args.seed), args.input_size)
    obj = {"seed": args.seed, "name": Path(args.arch).stem, **rep.to_dict()}
    schemas.validate(obj, "profile_report")
    if args.out:
        out = Path(args.out)
        if out.suffix != ".json":
            out = make_out(out) / "profile.json"
        else:
            make_out(out.parent)
        out.write_text(json.dumps(obj, indent=1) + "\n")
    print(report_text(rep, obj["name"]), end="")
    return EXIT_OK


def cmd_compare(args) -> int:
    out = make_out(args.out)
    if args.reports:
        reps, names = [], []
        for path in args.reports:
            d = load_json(path)
            schemas.validate(d, "eval_report")
            reps.append(EvalReport(**d["metrics"]))
            names.append(d.get("name") or Path(path).parent.name)
        table = format_report(reps, names)
        obj = {"seed": args.seed, "kind": "evaluation", "accuracy": table["accuracy"], "latency": table["latency"]}
        text = table["text"]
    else:
        if not args.arch or len(args.arch) < 2:
            raise UsageError("compare needs at least two --arch configs (or --reports)")
        arch_over, _ = split_overrides(args.set)
        cfgs = [load_arch(a, arch_over) for a in args.arch]
        names = [Path(a).stem for a in args.arch]
        table = compare_variants(cfgs, names, args.seed)
        obj = {"seed": args.seed, "kind": "complexity", "table": {k: table[k] for k in ("title", "rows", "notes")}, "reports": table["reports"]}
        text = table["text"]
        from .plots import complexity_png

        complexity_png(out / "complexity.png", table["reports"])
    write_json(out / "compare.json", obj, "compare_report")
    (out / "table.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="RNG seed (default: $TFNK_SEED or 0)")
    common.add_argument("--threads", type=int, default=None, help="cap BLAS/OpenCV worker threads")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override, repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="tfnet", description="Anchor-based detector toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic IR dataset")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="SynthConfig JSON")
    s.set_defaults(fn=cmd_synth)

    t = sub.add_parser("train", parents=[common], help="train a detector")
    t.add_argument("--arch", required=True, help="architecture JSON path or shipped name")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--train-config", help="training JSON path or shipped name (e.g. toy_train)")
    t.add_argument("--val-data")
    t.add_argument("--split", type=float, default=0.8, help="train fraction; >= 1 validates on the training set")
    t.add_argument("--epochs", type=int)
    t.set_defaults(fn=cmd_train)

    for name, fn, helptext in (("eval", cmd_eval, "evaluate a checkpoint or detections file"), ("detect", cmd_detect, "write detections")):
        e = sub.add_parser(name, parents=[common], help=helptext)
        e.add_argument("--arch")
        e.add_argument("--ckpt")
        e.add_argument("--data", required=True)
        e.add_argument("--out", required=True)
        e.add_argument("--conf", type=float, default=0.25)
        e.add_argument("--iou", type=float, default=0.45)
        e.add_argument("--max-det", type=int, default=300)
        e.add_argument("--batch", type=int, default=8)
        e.add_argument("--contrast", action="store_true", help="min-max contrast stretch before inference")
        if name == "eval":
            e.add_argument("--detections", help="score this detections file instead of running a model")
            e.add_argument("--iou-mode", choices=("tp", "all"), default="tp")
            e.add_argument("--sweep-conf", type=float, default=0.001)
            e.add_argument("--name", default="model")
        else:
            e.add_argument("--overlays", action="store_true", help="also write PPM overlays with sidecar text")
        e.set_defaults(fn=fn)

    pr = sub.add_parser("profile", parents=[common], help="layers, parameters, GFLOPs, checkpoint size")
    pr.add_argument("--arch", required=True)
    pr.add_argument("--input-size", type=int)
    pr.add_argument("--out", help="output directory or .json path")
    pr.set_defaults(fn=cmd_profile)

    c = sub.add_parser("compare", parents=[common], help="tabulate variants against the first one")
    c.add_argument("--arch", action="append", help="architecture config, repeatable")
    c.add_argument("--reports", nargs="+", help="eval report.json files to tabulate instead")
    c.add_argument("--out", required=True)
    c.set_defaults(fn=cmd_compare)
    return p


def _thread_limit(n: int | None):
    if n is None:
        return nullcontext()
    if n < 1:
        raise UsageError("--threads must be >= 1")
    import cv2
    from threadpoolctl import threadpool_limits

    cv2.setNumThreads(n)
    return threadpool_limits(limits=n)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.seed = resolve_seed(args.seed)
        with _thread_limit(args.threads):
            return args.fn(args)
    except (TrainingDiverged, NonFiniteError, FloatingPointError) as exc:
        print(f"tfnet: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, DatasetError, CheckpointError, schemas.SchemaError, ValueError, OSError) as exc:
        print(f"tfnet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
