"""YOLO-format datasets, letterboxing, contrast stretch, mosaic and splits."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np

log = logging.getLogger(__name__)

PAD_VALUE = 114 / 255
MOSAIC_MIN_AREA = 0.20
IMAGE_SUFFIXES = (".ppm", ".pgm")
_TOL = 1e-9


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class BoxLabel:
    """Normalized center-format box, fully inside the unit square."""

    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.class_id < 0:
            raise ValueError(f"class_id must be >= 0, got {self.class_id}")
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box must have positive size, got w={self.w} h={self.h}")
        x1, y1, x2, y2 = self.xyxy()
        if x1 < -_TOL or y1 < -_TOL or x2 > 1 + _TOL or y2 > 1 + _TOL:
            raise ValueError(f"box {self} extends outside the unit square")

    def xyxy(self) -> tuple[float, float, float, float]:
        return self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2

    @classmethod
    def from_xyxy(cls, class_id: int, x1: float, y1: float, x2: float, y2: float) -> BoxLabel:
        x1, y1 = max(0.0, x1), max(0.0, y1)
        x2, y2 = min(1.0, x2), min(1.0, y2)
        return cls(int(class_id), (x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)


@dataclass
class Sample:
    image: np.ndarray  # H x W x C float32 in [0, 1]
    labels: list[BoxLabel] = field(default_factory=list)
    source_id: str = ""

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float32)
        if img.ndim == 2:
            img = img[:, :, None]
        if img.ndim != 3 or img.shape[2] not in (1, 3):
            raise ValueError(f"image must be HxWx1 or HxWx3, got {img.shape}")
        if img.shape[0] < 32 or img.shape[1] < 32:
            raise ValueError(f"image must be at least 32x32, got {img.shape[:2]}")
        if img.size and (img.min() < 0 or img.max() > 1):
            raise ValueError("image intensities must lie in [0, 1]")
        self.image = img

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    def boxes_xyxy_px(self) -> np.ndarray:
        """Labels as an (n, 4) array of pixel corners."""
        if not self.labels:
            return np.zeros((0, 4))
        arr = np.array([b.xyxy() for b in self.labels], dtype=np.float64)
        return arr * [self.width, self.height, self.width, self.height]

    def class_ids(self) -> np.ndarray:
        return np.array([b.class_id for b in self.labels], dtype=np.int64)


@dataclass(frozen=True)
class TransformRecord:
    """Letterbox geometry: ``target = original * scale + pad``."""

    scale: float
    pad_x: float
    pad_y: float
    orig_w: int
    orig_h: int
    size: int

    @classmethod
    def identity(cls, w: int, h: int) -> TransformRecord:
        return cls(1.0, 0.0, 0.0, w, h, max(w, h))

    def forward(self, xyxy: np.ndarray) -> np.ndarray:
        xyxy = np.asarray(xyxy, dtype=np.float64)
        return xyxy * self.scale + [self.pad_x, self.pad_y, self.pad_x, self.pad_y]

    def inverse(self, xyxy: np.ndarray) -> np.ndarray:
        xyxy = np.asarray(xyxy, dtype=np.float64)
        return (xyxy - [self.pad_x, self.pad_y, self.pad_x, self.pad_y]) / self.scale


# ---------------------------------------------------------------------------
# Netpbm I/O (binary P5 / P6)


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos : pos + 1]
        if c == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
        pos += 1
    return buf[start:pos], pos


def read_image(path) -> np.ndarray:
    """Read a binary PGM/PPM into an HxWxC float32 array in [0, 1]."""
    buf = Path(path).read_bytes()
    magic, pos = _read_token(buf, 0)
    if magic not in (b"P5", b"P6"):
        raise DatasetError(f"{path}: unsupported netpbm magic {magic!r}")
    w, pos = _read_token(buf, pos)
    h, pos = _read_token(buf, pos)
    maxval, pos = _read_token(buf, pos)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise DatasetError(f"{path}: malformed header") from exc
    pos += 1  # single whitespace before raster
    c = 1 if magic == b"P5" else 3
    dtype = ">u2" if maxval > 255 else "u1"
    count = w * h * c
    raw = np.frombuffer(buf, dtype=dtype, count=count, offset=pos) if len(buf) - pos >= count * np.dtype(dtype).itemsize else None
    if raw is None:
        raise DatasetError(f"{path}: truncated raster")
    return (raw.reshape(h, w, c).astype(np.float32) / maxval).clip(0, 1)


def write_image(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    q = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    magic = b"P5" if c == 1 else b"P6"
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode() + q.tobytes())


# ---------------------------------------------------------------------------
# dataset layout


def parse_label_file(path, issues: list[str] | None = None) -> list[BoxLabel]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        try:
            if len(parts) != 5:
                raise ValueError(f"expected 5 fields, got {len(parts)}")
            cls = int(parts[0])
            vals = [float(p) for p in parts[1:]]
        except ValueError as exc:
            msg = f"{path}:{lineno}: malformed label line ({exc})"
            log.warning(msg)
            if issues is not None:
                issues.append(msg)
            continue
        if any(not 0 <= v <= 1 for v in vals):
            raise DatasetError(f"{path}:{lineno}: label value outside [0, 1]: {line.strip()}")
        cx, cy, w, h = vals
        if w <= 0 or h <= 0:
            raise DatasetError(f"{path}:{lineno}: box with zero size")
        out.append(BoxLabel.from_xyxy(cls, cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2))
    return out


def format_labels(labels: Sequence[BoxLabel]) -> str:
    return "".join(f"{b.class_id} {b.cx:.6f} {b.cy:.6f} {b.w:.6f} {b.h:.6f}\n" for b in labels)


def load_dataset(root, issues: list[str] | None = None) -> list[Sample]:
    """Load ``root/images/*.{ppm,pgm}`` with labels from ``root/labels/<stem>.txt``.

    Unreadable images are skipped; a record is appended to ``issues``.
    """
    root = Path(root)
    img_dir, lbl_dir = root / "images", root / "labels"
    if not img_dir.is_dir():
        raise DatasetError(f"{root}: missing images/ directory")
    samples = []
    for path in sorted(p for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
        try:
            image = read_image(path)
            sample = Sample(image, [], path.stem)
        except (DatasetError, ValueError, OSError) as exc:
            msg = f"{path}: skipped unreadable image ({exc})"
            log.warning(msg)
            if issues is not None:
                issues.append(msg)
            continue
        lbl = lbl_dir / f"{path.stem}.txt"
        if lbl.exists():
            sample.labels = parse_label_file(lbl, issues)
        samples.append(sample)
    return samples


def save_sample(root, sample: Sample) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    suffix = ".pgm" if sample.image.shape[2] == 1 else ".ppm"
    write_image(root / "images" / f"{sample.source_id}{suffix}", sample.image)
    (root / "labels" / f"{sample.source_id}.txt").write_text(format_labels(sample.labels))


# ---------------------------------------------------------------------------
# transforms


def resize(image: np.ndarray, w: int, h: int) -> np.ndarray:
    if image.shape[1] == w and image.shape[0] == h:
        return image.copy()
    interp = cv2.INTER_AREA if w < image.shape[1] else cv2.INTER_LINEAR
    out = cv2.resize(image, (w, h), interpolation=interp)
    if out.ndim == 2:
        out = out[:, :, None]
    return out.clip(0, 1)


def _remap(labels: Sequence[BoxLabel], fn, src_w, src_h, dst_w, dst_h) -> list[BoxLabel]:
    out = []
    for b in labels:
        x1, y1, x2, y2 = fn(np.array(b.xyxy()) * [src_w, src_h, src_w, src_h]) / [dst_w, dst_h, dst_w, dst_h]
        out.append(BoxLabel.from_xyxy(b.class_id, x1, y1, x2, y2))
    return out


def letterbox(sample: Sample, target: int) -> tuple[Sample, TransformRecord]:
    """Aspect-preserving resize into a ``target`` square, padded symmetrically."""
    if target % 32:
        raise ValueError(f"letterbox target must be divisible by 32, got {target}")
    h, w = sample.height, sample.width
    scale = target / max(h, w)
    nw, nh = round(w * scale), round(h * scale)
    px, py = (target - nw) // 2, (target - nh) // 2
    canvas = np.full((target, target, sample.image.shape[2]), PAD_VALUE, dtype=np.float32)
    canvas[py : py + nh, px : px + nw] = resize(sample.image, nw, nh)
    rec = TransformRecord(scale, float(px), float(py), w, h, target)
    labels = _remap(sample.labels, rec.forward, w, h, target, target)
    return Sample(canvas, labels, sample.source_id), rec


def unletterbox_labels(labels: Sequence[BoxLabel], rec: TransformRecord) -> list[BoxLabel]:
    return _remap(labels, rec.inverse, rec.size, rec.size, rec.orig_w, rec.orig_h)


def contrast_enhance(sample: Sample) -> Sample:
    """Per-image min-max stretch to [0, 1]; constant images are returned as is."""
    lo, hi = float(sample.image.min()), float(sample.image.max())
    if hi <= lo:
        return sample
    return replace(sample, image=((sample.image - lo) / (hi - lo)).clip(0, 1))


def to_chw(image: np.ndarray) -> np.ndarray:
    """HxWxC in [0,1] -> 3xHxW, replicating grayscale to 3 channels."""
    if image.shape[2] == 1:
        image = np.repeat(image, 3, axis=2)
    return np.ascontiguousarray(image.transpose(2, 0, 1))


@dataclass(frozen=True)
class MosaicTile:
    scale: float
    offset_x: float  # canvas = source_px * scale + offset
    offset_y: float
    region: tuple[int, int, int, int]  # placed canvas region x1, y1, x2, y2


def mosaic_layout(
    sizes: Sequence[tuple[int, int]], output_size: int, seed: int, center: tuple[int, int] | None = None
) -> tuple[tuple[int, int], list[MosaicTile]]:
    """Place 4 images (given as (w, h)) around a seeded split point.

    Each image is scaled so its long side is half the canvas, then anchored
    with one corner on the split point: top-left, top-right, bottom-left,
    bottom-right quadrants in that order.
    """
    s = output_size
    if center is None:
        rng = np.random.default_rng(seed)
        xc, yc = (int(v) for v in rng.integers(s // 4, 3 * s // 4 + 1, size=2))
    else:
        xc, yc = center
    tiles = []
    for i, (w0, h0) in enumerate(sizes):
        r = (s / 2) / max(w0, h0)
        w, h = max(1, round(w0 * r)), max(1, round(h0 * r))
        if i == 0:
            region = (max(xc - w, 0), max(yc - h, 0), xc, yc)
            ox, oy = xc - w, yc - h
        elif i == 1:
            region = (xc, max(yc - h, 0), min(xc + w, s), yc)
            ox, oy = xc, yc - h
        elif i == 2:
            region = (max(xc - w, 0), yc, xc, min(s, yc + h))
            ox, oy = xc - w, yc
        else:
            region = (xc, yc, min(xc + w, s), min(s, yc + h))
            ox, oy = xc, yc
        tiles.append(MosaicTile(r, float(ox), float(oy), region))
    return (xc, yc), tiles


def mosaic(samples: Sequence[Sample], output_size: int, seed: int, center: tuple[int, int] | None = None) -> Sample:
    """Composite four samples into one ``output_size`` square canvas.

    Boxes are clipped to their tile's visible region and dropped when less
    than 20% of their area survives.
    """
    if len(samples) != 4:
        raise ValueError(f"mosaic needs exactly 4 samples, got {len(samples)}")
    s = output_size
    channels = max(smp.image.shape[2] for smp in samples)
    _, tiles = mosaic_layout([(smp.width, smp.height) for smp in samples], s, seed, center)
    canvas = np.full((s, s, channels), PAD_VALUE, dtype=np.float32)
    labels: list[BoxLabel] = []
    for smp, t in zip(samples, tiles):
        w, h = max(1, round(smp.width * t.scale)), max(1, round(smp.height * t.scale))
        img = resize(smp.image, w, h)
        if img.shape[2] != channels:
            img = np.repeat(img, channels, axis=2)
        x1a, y1a, x2a, y2a = t.region
        if x2a <= x1a or y2a <= y1a:
            continue
        ox, oy = int(t.offset_x), int(t.offset_y)
        canvas[y1a:y2a, x1a:x2a] = img[y1a - oy : y2a - oy, x1a - ox : x2a - ox]
        for b in smp.labels:
            bx1, by1, bx2, by2 = np.array(b.xyxy()) * [smp.width, smp.height, smp.width, smp.height]
            bx1, bx2 = bx1 * t.scale + ox, bx2 * t.scale + ox
            by1, by2 = by1 * t.scale + oy, by2 * t.scale + oy
            area = (bx2 - bx1) * (by2 - by1)
            cx1, cy1 = max(bx1, x1a), max(by1, y1a)
            cx2, cy2 = min(bx2, x2a), min(by2, y2a)
            if cx2 <= cx1 or cy2 <= cy1 or (cx2 - cx1) * (cy2 - cy1) < MOSAIC_MIN_AREA * area:
                continue
            labels.append(BoxLabel.from_xyxy(b.class_id, cx1 / s, cy1 / s, cx2 / s, cy2 / s))
    return Sample(canvas, labels, "mosaic:" + "+".join(smp.source_id for smp in samples))


# ---------------------------------------------------------------------------
# train / test split


@dataclass
class SplitManifest:
    train: list[str]
    test: list[str]
    seed: int
    ratio: float = 0.8

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    @classmethod
    def from_json(cls, text: str) -> SplitManifest:
        return cls(**json.loads(text))


def split(ids: Sequence[str], ratio: float = 0.8, seed: int = 0) -> SplitManifest:
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    ids = list(ids)
    if len(ids) < 2:
        raise ValueError("split needs at least 2 items")
    if len(set(ids)) != len(ids):
        raise ValueError("split ids must be unique")
    n_train = min(max(int(math.floor(ratio * len(ids) + 0.5)), 1), len(ids) - 1)
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    return SplitManifest(shuffled[:n_train], shuffled[n_train:], seed, ratio)
