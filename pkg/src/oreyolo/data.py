"""Dataset I/O, box-consistent augmentation, mosaic/mixup, splitting and a synthetic ore generator.

Layout on disk::

    root/images/<id>.png|jpg
    root/labels/<id>.txt      # one "class cx cy w h" line per box, normalised
    root/<split>.txt          # optional manifests, one id per line
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from oreyolo.errors import DataError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
AUGMENT_OPS = ("noise", "rotate", "crop", "translate", "reflect", "brightness")
MIN_RESIDUAL_AREA = 0.25
FILL_VALUE = 114
EPS = 1e-6


@dataclass(frozen=True)
class BoxLabel:
    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self) -> None:
        if self.class_id < 0:
            raise DataError(f"negative class id {self.class_id}")
        if not (0 < self.w <= 1 + EPS and 0 < self.h <= 1 + EPS):
            raise DataError(f"box size out of range: w={self.w}, h={self.h}")
        for v in (self.cx, self.cy):
            if not 0 <= v <= 1:
                raise DataError(f"box centre out of range: cx={self.cx}, cy={self.cy}")
        if (self.cx - self.w / 2 < -EPS or self.cx + self.w / 2 > 1 + EPS
                or self.cy - self.h / 2 < -EPS or self.cy + self.h / 2 > 1 + EPS):
            raise DataError(f"box extends outside the image: {self}")

    def to_xyxy(self, img_w: float = 1.0, img_h: float = 1.0) -> tuple[float, float, float, float]:
        return ((self.cx - self.w / 2) * img_w, (self.cy - self.h / 2) * img_h,
                (self.cx + self.w / 2) * img_w, (self.cy + self.h / 2) * img_h)

    @classmethod
    def from_xyxy(cls, class_id: int, x1: float, y1: float, x2: float, y2: float,
                  img_w: float = 1.0, img_h: float = 1.0) -> "BoxLabel":
        return cls(int(class_id), (x1 + x2) / 2 / img_w, (y1 + y2) / 2 / img_h, (x2 - x1) / img_w, (y2 - y1) / img_h)

    def to_line(self) -> str:
        return f"{self.class_id} {self.cx:.6f} {self.cy:.6f} {self.w:.6f} {self.h:.6f}"


@dataclass
class DatasetSample:
    image: np.ndarray  # H x W x 3, uint8
    labels: list[BoxLabel] = field(default_factory=list)
    id: str = ""

    def __post_init__(self) -> None:
        if self.image.ndim != 3 or self.image.shape[2] != 3 or self.image.size == 0:
            raise DataError(f"sample {self.id!r}: image must be a non-empty H x W x 3 array")

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


@dataclass(frozen=True)
class AugmentPolicy:
    enabled: tuple[str, ...] = AUGMENT_OPS
    copies: int = 4
    mosaic_prob: float = 0.5
    mixup_prob: float = 0.5

    def __post_init__(self) -> None:
        unknown = set(self.enabled) - set(AUGMENT_OPS)
        if unknown:
            raise DataError(f"unknown augmentation ops {sorted(unknown)}")
        for name in ("mosaic_prob", "mixup_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise DataError(f"{name} must be in [0, 1]")


# ---------------------------------------------------------------- label I/O


def parse_label_line(line: str, where: str = "") -> BoxLabel:
    parts = line.split()
    if len(parts) != 5:
        raise DataError(f"{where}: expected 'class cx cy w h', got {line!r}")
    try:
        c = int(float(parts[0]))
        cx, cy, w, h = (float(p) for p in parts[1:])
    except ValueError as exc:
        raise DataError(f"{where}: non-numeric field in {line!r}") from exc
    try:
        return BoxLabel(c, cx, cy, w, h)
    except DataError as exc:
        raise DataError(f"{where}: {exc}") from None


def read_labels(path: Path) -> list[BoxLabel]:
    labels = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if line.strip():
            labels.append(parse_label_line(line, f"{path}:{lineno}"))
    return labels


def write_labels(labels: Iterable[BoxLabel], path: Path) -> None:
    path.write_text("".join(l.to_line() + "\n" for l in labels))


def read_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_image(image: np.ndarray, path: str | Path) -> None:
    Image.fromarray(image).save(path)


def _image_paths(root: Path) -> list[Path]:
    img_dir = root / "images"
    if not img_dir.is_dir():
        raise DataError(f"{root}: missing images/ directory")
    return sorted(p for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_dataset(root: str | Path, ids: Sequence[str] | None = None) -> list[DatasetSample]:
    """Load ``root/images`` with their ``root/labels`` files (optionally only ``ids``)."""
    root = Path(root)
    paths = _image_paths(root)
    if ids is not None:
        by_stem = {p.stem: p for p in paths}
        missing = [i for i in ids if i not in by_stem]
        if missing:
            raise DataError(f"{root}: ids without images: {missing[:5]}")
        paths = [by_stem[i] for i in ids]
    samples = []
    for p in paths:
        label_path = root / "labels" / f"{p.stem}.txt"
        if label_path.exists():
            labels = read_labels(label_path)
        else:
            log.warning("no label file for %s, treating as empty", p.name)
            labels = []
        samples.append(DatasetSample(read_image(p), labels, p.stem))
    return samples


def save_dataset(samples: Iterable[DatasetSample], root: str | Path) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_image(s.image, root / "images" / f"{s.id}.png")
        write_labels(s.labels, root / "labels" / f"{s.id}.txt")


def write_manifest(ids: Iterable[str], path: str | Path) -> None:
    Path(path).write_text("".join(f"{i}\n" for i in ids))


def read_manifest(path: str | Path) -> list[str]:
    return [l.strip() for l in Path(path).read_text().splitlines() if l.strip()]


def load_split(root: str | Path, split: str) -> list[DatasetSample]:
    manifest = Path(root) / f"{split}.txt"
    if not manifest.exists():
        raise DataError(f"{root}: no manifest for split {split!r}")
    return load_dataset(root, read_manifest(manifest))


# ---------------------------------------------------------------- box geometry


def _clip_labels(boxes: np.ndarray, classes: Sequence[int]) -> list[BoxLabel]:
    """Clip normalised xyxy boxes to the unit square, dropping those left with < 25% of their area."""
    out = []
    for (x1, y1, x2, y2), c in zip(boxes, classes):
        area = (x2 - x1) * (y2 - y1)
        cx1, cy1 = min(max(x1, 0.0), 1.0), min(max(y1, 0.0), 1.0)
        cx2, cy2 = min(max(x2, 0.0), 1.0), min(max(y2, 0.0), 1.0)
        if cx2 <= cx1 or cy2 <= cy1 or area <= 0:
            continue
        if (cx2 - cx1) * (cy2 - cy1) < MIN_RESIDUAL_AREA * area:
            continue
        out.append(BoxLabel.from_xyxy(c, cx1, cy1, cx2, cy2))
    return out


def _xyxy(labels: Sequence[BoxLabel]) -> tuple[np.ndarray, list[int]]:
    arr = np.array([l.to_xyxy() for l in labels], dtype=np.float64).reshape(-1, 4)
    return arr, [l.class_id for l in labels]


# ---------------------------------------------------------------- single ops


def reflect(sample: DatasetSample, horizontal: bool = True) -> DatasetSample:
    if horizontal:
        img = sample.image[:, ::-1]
        labels = [replace(l, cx=1.0 - l.cx) for l in sample.labels]
    else:
        img = sample.image[::-1]
        labels = [replace(l, cy=1.0 - l.cy) for l in sample.labels]
    return DatasetSample(np.ascontiguousarray(img), labels, sample.id)


def rotate90(sample: DatasetSample, k: int = 1) -> DatasetSample:
    """Rotate counter-clockwise by ``k`` quarter turns."""
    k %= 4
    labels = list(sample.labels)
    for _ in range(k):
        labels = [BoxLabel(l.class_id, l.cy, 1.0 - l.cx, l.h, l.w) for l in labels]
    return DatasetSample(np.ascontiguousarray(np.rot90(sample.image, k)), labels, sample.id)


def crop(sample: DatasetSample, x0: float, y0: float, x1: float, y1: float) -> DatasetSample:
    """Keep the normalised window ``[x0, x1] x [y0, y1]`` and resize it back to the original size."""
    h, w = sample.height, sample.width
    px0, py0 = int(round(x0 * w)), int(round(y0 * h))
    px1, py1 = max(px0 + 1, int(round(x1 * w))), max(py0 + 1, int(round(y1 * h)))
    window = sample.image[py0:py1, px0:px1]
    img = np.asarray(Image.fromarray(window).resize((w, h), Image.BILINEAR))
    # box transform uses the realised pixel window
    fx0, fy0, fw, fh = px0 / w, py0 / h, (px1 - px0) / w, (py1 - py0) / h
    boxes, classes = _xyxy(sample.labels)
    boxes = (boxes - [fx0, fy0, fx0, fy0]) / [fw, fh, fw, fh]
    return DatasetSample(img, _clip_labels(boxes, classes), sample.id)


def translate(sample: DatasetSample, dx: float, dy: float) -> DatasetSample:
    """Shift by a fraction of the image size, filling exposed area with grey."""
    h, w = sample.height, sample.width
    sx, sy = int(round(dx * w)), int(round(dy * h))
    img = np.full_like(sample.image, FILL_VALUE)
    src = sample.image[max(0, -sy): h - max(0, sy), max(0, -sx): w - max(0, sx)]
    img[max(0, sy): max(0, sy) + src.shape[0], max(0, sx): max(0, sx) + src.shape[1]] = src
    fx, fy = sx / w, sy / h
    boxes, classes = _xyxy(sample.labels)
    boxes = boxes + [fx, fy, fx, fy]
    return DatasetSample(img, _clip_labels(boxes, classes), sample.id)


def adjust_brightness(sample: DatasetSample, factor: float) -> DatasetSample:
    img = np.clip(sample.image.astype(np.float32) * factor, 0, 255).round().astype(np.uint8)
    return DatasetSample(img, list(sample.labels), sample.id)


def add_noise(sample: DatasetSample, sigma: float, rng: np.random.Generator) -> DatasetSample:
    noise = rng.normal(0.0, sigma, sample.image.shape)
    img = np.clip(sample.image.astype(np.float64) + noise, 0, 255).round().astype(np.uint8)
    return DatasetSample(img, list(sample.labels), sample.id)


def augment(sample: DatasetSample, policy: AugmentPolicy, rng: np.random.Generator) -> DatasetSample:
    """Apply a random non-empty combination of the enabled ops, in a fixed order."""
    ops = [op for op in AUGMENT_OPS if op in policy.enabled]
    if not ops:
        return sample
    chosen = [op for op in ops if rng.random() < 0.5]
    if not chosen:
        chosen = [ops[int(rng.integers(len(ops)))]]
    out = sample
    for op in chosen:
        if op == "noise":
            out = add_noise(out, float(rng.uniform(3, 12)), rng)
        elif op == "rotate":
            out = rotate90(out, int(rng.integers(1, 4)))
        elif op == "crop":
            fw, fh = rng.uniform(0.6, 1.0, size=2)
            x0, y0 = rng.uniform(0, 1 - fw), rng.uniform(0, 1 - fh)
            out = crop(out, x0, y0, x0 + fw, y0 + fh)
        elif op == "translate":
            dx, dy = rng.uniform(-0.2, 0.2, size=2)
            out = translate(out, float(dx), float(dy))
        elif op == "reflect":
            out = reflect(out, horizontal=bool(rng.random() < 0.5))
        elif op == "brightness":
            out = adjust_brightness(out, float(rng.uniform(0.7, 1.3)))
    return out


def expand_dataset(samples: Sequence[DatasetSample], policy: AugmentPolicy, seed: int = 0) -> list[DatasetSample]:
    """Originals plus ``policy.copies`` augmented variants of each (offline expansion)."""
    rng = np.random.default_rng(seed)
    out = []
    for s in samples:
        out.append(s)
        for i in range(policy.copies):
            a = augment(s, policy, rng)
            out.append(DatasetSample(a.image, a.labels, f"{s.id}_aug{i}"))
    return out


# ---------------------------------------------------------------- multi-image mixing


def _resize(image: np.ndarray, w: int, h: int) -> np.ndarray:
    if image.shape[1] == w and image.shape[0] == h:
        return image
    return np.asarray(Image.fromarray(image).resize((w, h), Image.BILINEAR))


def mosaic_layout(size: int, xc: int, yc: int) -> list[tuple[tuple[int, int, int, int], tuple[int, int]]]:
    """Canvas region ``(x1, y1, x2, y2)`` and source offset ``(ox, oy)`` of each of the four tiles.

    Each source is resized to ``size x size``; canvas pixel ``(x, y)`` of tile ``i``
    shows source pixel ``(x - ox, y - oy)``.
    """
    return [
        ((0, 0, xc, yc), (xc - size, yc - size)),
        ((xc, 0, size, yc), (xc, yc - size)),
        ((0, yc, xc, size), (xc - size, yc)),
        ((xc, yc, size, size), (xc, yc)),
    ]


def mosaic(samples: Sequence[DatasetSample], rng: np.random.Generator, size: int | None = None) -> DatasetSample:
    """Tile four samples around a random centre into one ``size x size`` canvas."""
    if len(samples) != 4:
        raise DataError("mosaic needs exactly four samples")
    size = size or max(max(s.height, s.width) for s in samples)
    xc = int(rng.integers(size // 4, 3 * size // 4 + 1))
    yc = int(rng.integers(size // 4, 3 * size // 4 + 1))
    canvas = np.full((size, size, 3), FILL_VALUE, dtype=np.uint8)
    labels: list[BoxLabel] = []
    for s, ((x1, y1, x2, y2), (ox, oy)) in zip(samples, mosaic_layout(size, xc, yc)):
        if x2 <= x1 or y2 <= y1:
            continue
        img = _resize(s.image, size, size)
        canvas[y1:y2, x1:x2] = img[y1 - oy: y2 - oy, x1 - ox: x2 - ox]
        boxes, classes = _xyxy(s.labels)
        boxes = boxes * size + [ox, oy, ox, oy]
        labels.extend(_clip_tile(boxes, classes, (x1, y1, x2, y2), size))
    return DatasetSample(canvas, labels, "+".join(s.id for s in samples))


def _clip_tile(boxes: np.ndarray, classes: Sequence[int], region, size: int) -> list[BoxLabel]:
    x1, y1, x2, y2 = region
    out = []
    for (bx1, by1, bx2, by2), c in zip(boxes, classes):
        area = (bx2 - bx1) * (by2 - by1)
        cx1, cy1 = min(max(bx1, x1), x2), min(max(by1, y1), y2)
        cx2, cy2 = min(max(bx2, x1), x2), min(max(by2, y1), y2)
        if cx2 <= cx1 or cy2 <= cy1 or area <= 0:
            continue
        if (cx2 - cx1) * (cy2 - cy1) < MIN_RESIDUAL_AREA * area:
            continue
        out.append(BoxLabel.from_xyxy(c, cx1, cy1, cx2, cy2, size, size))
    return out


def mixup(a: DatasetSample, b: DatasetSample, lam: float, rng: np.random.Generator | None = None) -> DatasetSample:
    """Blend ``a * lam + b * (1 - lam)`` (``b`` resized to ``a``) and union the labels."""
    if not 0 < lam <= 1:
        raise DataError(f"mixup weight must be in (0, 1], got {lam}")
    bimg = _resize(b.image, a.width, a.height)
    img = a.image.astype(np.float64) * lam + bimg.astype(np.float64) * (1 - lam)
    return DatasetSample(np.clip(img.round(), 0, 255).astype(np.uint8), [*a.labels, *b.labels], f"{a.id}|{b.id}")


# ---------------------------------------------------------------- splitting


def split_dataset(samples: Sequence, ratios: Sequence[float] = (7, 2, 1), seed: int = 0):
    """Seeded shuffle, then floor-sized train/val with the remainder going to test."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or sum(ratios) <= 0:
        raise DataError(f"ratios must be three non-negative numbers, got {ratios}")
    n = len(samples)
    if n < 3:
        raise DataError(f"need at least 3 samples to split, got {n}")
    fr = [Fraction(r).limit_denominator(10**6) for r in ratios]
    total = sum(fr)
    n_train = int(n * fr[0] / total)
    n_val = int(n * fr[1] / total)
    order = np.random.default_rng(seed).permutation(n)
    items = [samples[i] for i in order]
    return items[:n_train], items[n_train:n_train + n_val], items[n_train + n_val:]


# ---------------------------------------------------------------- synthetic ore images


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(95, 150)
    coarse = rng.normal(0, 10, (size // 16 + 2, size // 16 + 2))
    coarse = np.asarray(Image.fromarray(coarse.astype(np.float32)).resize((size, size), Image.BILINEAR))
    fine = rng.normal(0, 6, (size, size))
    gray = base + coarse + fine
    img = np.repeat(gray[..., None], 3, axis=2) + rng.normal(0, 2, 3)
    return np.clip(img, 0, 255)


def _ellipse_mask(size: int, cx: float, cy: float, ax: float, ay: float, theta: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    dx, dy = xx + 0.5 - cx, yy + 0.5 - cy
    c, s = np.cos(theta), np.sin(theta)
    u = (dx * c + dy * s) / ax
    v = (-dx * s + dy * c) / ay
    return u * u + v * v <= 1.0


def generate_synthetic(n: int, rng: np.random.Generator | int = 0, image_size: int = 320,
                       return_masks: bool = False):
    """Render ``n`` images with 1-10 non-overlapping ore blobs each.

    Class 0 blobs are warm-hued and speckled, class 1 blobs cool-hued and smooth.
    Boxes are the exact pixel extents of each blob. With ``return_masks`` an
    instance map per image is also returned (0 = background, k = k-th label).
    """
    if n < 1:
        raise DataError("n must be >= 1")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    samples, masks = [], []
    size = image_size
    for idx in range(n):
        img = _background(rng, size)
        inst = np.zeros((size, size), dtype=np.int32)
        labels: list[BoxLabel] = []
        target = int(rng.integers(1, 11))
        attempts = 0
        while len(labels) < target and attempts < 200:
            attempts += 1
            ax = rng.uniform(0.04, 0.11) * size
            ay = ax * rng.uniform(0.6, 1.0)
            theta = rng.uniform(0, np.pi)
            cx = rng.uniform(ax + 1, size - ax - 1)
            cy = rng.uniform(ax + 1, size - ax - 1)
            mask = _ellipse_mask(size, cx, cy, ax, ay, theta)
            if not mask.any():
                continue
            # keep a 2-pixel gap between blobs so every extent is unambiguous
            grown = np.zeros_like(mask)
            ys, xs = np.nonzero(mask)
            y0, y1 = max(ys.min() - 2, 0), min(ys.max() + 3, size)
            x0, x1 = max(xs.min() - 2, 0), min(xs.max() + 3, size)
            grown[y0:y1, x0:x1] = True
            if (inst[grown] > 0).any():
                continue
            cls = int(rng.integers(0, 2))
            _paint_blob(img, mask, cls, rng)
            inst[mask] = len(labels) + 1
            labels.append(BoxLabel.from_xyxy(cls, xs.min(), ys.min(), xs.max() + 1, ys.max() + 1, size, size))
        sample = DatasetSample(np.clip(img, 0, 255).round().astype(np.uint8), labels, f"syn{idx:05d}")
        samples.append(sample)
        masks.append(inst)
    return (samples, masks) if return_masks else samples


def _paint_blob(img: np.ndarray, mask: np.ndarray, cls: int, rng: np.random.Generator) -> None:
    count = int(mask.sum())
    if cls == 0:
        # warm gold-ish base with dark and bright speckles
        base = np.array([rng.uniform(190, 235), rng.uniform(140, 175), rng.uniform(40, 80)])
        px = base + rng.normal(0, 8, (count, 3))
        speck = rng.random(count)
        px[speck < 0.12] *= 0.45
        px[speck > 0.93] = [250, 235, 160]
    else:
        # cool steel-blue, smooth
        base = np.array([rng.uniform(60, 95), rng.uniform(95, 130), rng.uniform(160, 205)])
        px = base + rng.normal(0, 3, (count, 3))
    img[mask] = px
