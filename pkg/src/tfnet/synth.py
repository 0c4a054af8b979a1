"""Synthetic night-time infrared scenes with exact box labels.

Targets are bright drone silhouettes (elliptical body plus rotor arms) on a
dark, noisy background.  Target size classes are defined relative to image
width by the longest box side: small < 2%, medium 2-8%, large > 8%.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np

from .data import BoxLabel, Sample, save_sample

BACKGROUNDS = ("clear", "cloudy", "urban_clutter", "fog")
SIZE_BUCKETS = ("small", "medium", "large")
SMALL_MAX, MEDIUM_MAX = 0.02, 0.08
LARGE_MAX = 0.16
MIN_TARGET_PX = 3
TARGET_MIN_INTENSITY = 0.75


class PackingError(ValueError):
    pass


def size_bucket(longest_side_px: float, image_width: int) -> str:
    rel = longest_side_px / image_width
    if rel < SMALL_MAX:
        return "small"
    if rel <= MEDIUM_MAX:
        return "medium"
    return "large"


@dataclass
class SynthConfig:
    image_size: int = 416
    targets_per_image: tuple[int, int] = (1, 3)
    size_mix: tuple[float, float, float] = (0.4, 0.4, 0.2)
    background: str = "clear"
    noise_level: float = 0.02
    seed: int = 0

    def __post_init__(self):
        self.targets_per_image = tuple(self.targets_per_image)
        self.size_mix = tuple(float(x) for x in self.size_mix)
        lo, hi = self.targets_per_image
        if lo < 0 or hi < lo:
            raise ValueError(f"bad targets_per_image range {self.targets_per_image}")
        if len(self.size_mix) != 3 or min(self.size_mix) < 0 or abs(sum(self.size_mix) - 1) > 1e-9:
            raise ValueError(f"size_mix must be 3 non-negative fractions summing to 1, got {self.size_mix}")
        if self.background not in BACKGROUNDS:
            raise ValueError(f"background must be one of {BACKGROUNDS}")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")
        if self.image_size < 32:
            raise ValueError("image_size must be >= 32")
        for name, frac in zip(SIZE_BUCKETS, self.size_mix):
            if frac > 0:
                lo_px, hi_px = self.bucket_range(name)
                if hi_px < lo_px:
                    raise ValueError(f"{name} targets cannot be drawn at image_size {self.image_size}")

    def bucket_range(self, bucket: str) -> tuple[int, int]:
        """Inclusive pixel range of the longest target side for ``bucket``."""
        w = self.image_size
        if bucket == "small":
            return MIN_TARGET_PX, int(np.ceil(SMALL_MAX * w)) - 1
        if bucket == "medium":
            return max(MIN_TARGET_PX, int(np.ceil(SMALL_MAX * w))), int(np.floor(MEDIUM_MAX * w))
        return int(np.floor(MEDIUM_MAX * w)) + 1, max(int(LARGE_MAX * w), int(np.floor(MEDIUM_MAX * w)) + 1)

    def to_dict(self) -> dict:
        return asdict(self)


def _background(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    s = cfg.image_size
    yy, xx = np.mgrid[0:s, 0:s] / s
    if cfg.background == "clear":
        bg = 0.05 + 0.07 * yy
    elif cfg.background == "cloudy":
        low = rng.random((6, 6))
        bg = 0.06 + 0.12 * cv2.resize(low, (s, s), interpolation=cv2.INTER_CUBIC).clip(0, 1)
    elif cfg.background == "urban_clutter":
        bg = 0.05 + 0.04 * yy
        for _ in range(rng.integers(4, 9)):
            bw = int(rng.integers(s // 12, s // 5))
            bh = int(rng.integers(s // 10, s // 3))
            x0 = int(rng.integers(0, s - bw))
            bg[s - bh :, x0 : x0 + bw] = rng.uniform(0.12, 0.3)
            for _ in range(rng.integers(2, 8)):
                wy = int(rng.integers(s - bh, s - 1))
                wx = int(rng.integers(x0, x0 + bw - 1))
                bg[wy : wy + 2, wx : wx + 2] = rng.uniform(0.3, 0.45)
    else:  # fog
        bg = 0.17 + 0.05 * (1 - yy) + 0.03 * np.sin(6 * xx + rng.uniform(0, 6))
    return bg


def _draw_target(img: np.ndarray, x0: int, y0: int, w: int, h: int, level: float) -> None:
    """Rotor cross spanning the full box plus an inscribed elliptical body."""
    patch = img[y0 : y0 + h, x0 : x0 + w]
    cy, cx = (h - 1) / 2, (w - 1) / 2
    yy, xx = np.mgrid[0:h, 0:w]
    body = ((xx - cx) / max(w / 3, 0.5)) ** 2 + ((yy - cy) / max(h / 3, 0.5)) ** 2 <= 1
    arm = max(1, min(w, h) // 6)
    mask = body.copy()
    r0, c0 = int(round(cy - (arm - 1) / 2)), int(round(cx - (arm - 1) / 2))
    mask[max(r0, 0) : r0 + arm, :] = True
    mask[:, max(c0, 0) : c0 + arm] = True
    patch[mask] = np.maximum(patch[mask], level)


def _place(rng, sizes, s, max_tries=200) -> list[tuple[int, int]]:
    placed: list[tuple[int, int, int, int]] = []
    out = []
    for w, h in sizes:
        for _ in range(max_tries):
            x0 = int(rng.integers(1, s - w)) if s - w > 1 else 0
            y0 = int(rng.integers(1, s - h)) if s - h > 1 else 0
            if all(x0 + w + 2 <= px or px + pw + 2 <= x0 or y0 + h + 2 <= py or py + ph + 2 <= y0 for px, py, pw, ph in placed):
                placed.append((x0, y0, w, h))
                out.append((x0, y0))
                break
        else:
            raise PackingError(f"could not place {len(sizes)} targets in a {s}x{s} image")
    return out


def render_scene(cfg: SynthConfig, buckets: Sequence[str], rng: np.random.Generator, source_id: str = "") -> Sample:
    s = cfg.image_size
    sizes = []
    for b in buckets:
        lo, hi = cfg.bucket_range(b)
        side = int(rng.integers(lo, hi + 1))
        other = max(MIN_TARGET_PX, int(round(side * rng.uniform(0.5, 1.0))))
        sizes.append((side, other) if rng.random() < 0.5 else (other, side))
    if sum(w * h for w, h in sizes) > 0.4 * s * s:
        raise PackingError(f"{len(sizes)} targets exceed the packing capacity of a {s}x{s} image")
    spots = _place(rng, sizes, s)
    img = _background(cfg, rng)
    if cfg.noise_level:
        img = img + rng.normal(0, cfg.noise_level, img.shape)
    img = img.clip(0, 0.6)
    labels = []
    for (x0, y0), (w, h) in zip(spots, sizes):
        _draw_target(img, x0, y0, w, h, rng.uniform(TARGET_MIN_INTENSITY, 1.0))
        labels.append(BoxLabel.from_xyxy(0, x0 / s, y0 / s, (x0 + w) / s, (y0 + h) / s))
    return Sample(img.astype(np.float32)[:, :, None], labels, source_id)


def _draw_buckets(cfg: SynthConfig, n: int, rng) -> list[str]:
    return list(rng.choice(SIZE_BUCKETS, size=n, p=cfg.size_mix))


def synth_scene(cfg: SynthConfig, source_id: str = "") -> Sample:
    """One scene, deterministic in ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    lo, hi = cfg.targets_per_image
    n = int(rng.integers(lo, hi + 1))
    return render_scene(cfg, _draw_buckets(cfg, n, rng), rng, source_id or f"synth_{cfg.seed:06d}")


def quota_buckets(cfg: SynthConfig, total: int, rng) -> list[str]:
    """Exactly proportioned (largest remainder) bucket list, shuffled."""
    raw = np.array(cfg.size_mix) * total
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: total - counts.sum()]:
        counts[i] += 1
    out = [b for b, c in zip(SIZE_BUCKETS, counts) for _ in range(c)]
    rng.shuffle(out)
    return out


def synth_dataset(cfg: SynthConfig, count: int) -> list[Sample]:
    """``count`` scenes whose size classes follow ``cfg.size_mix`` in aggregate."""
    rng = np.random.default_rng([cfg.seed, count])
    lo, hi = cfg.targets_per_image
    per_image = rng.integers(lo, hi + 1, size=count)
    buckets = quota_buckets(cfg, int(per_image.sum()), rng)
    out, k = [], 0
    for i, n in enumerate(per_image):
        scene_rng = np.random.default_rng([cfg.seed, i])
        out.append(render_scene(cfg, buckets[k : k + n], scene_rng, f"synth_{i:06d}"))
        k += n
    return out


def write_dataset(out_dir, cfg: SynthConfig, count: int) -> list[Sample]:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    samples = synth_dataset(cfg, count)
    for smp in samples:
        save_sample(out, smp)
    manifest = {"count": count, "seed": cfg.seed, "synth_config": cfg.to_dict(), "ids": [s.source_id for s in samples]}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return samples
