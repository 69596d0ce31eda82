"""Annotations, image rescaling, train/validation split and synthetic data.

On-disk layout::

    images/NAME.{jpg,png}
    labels/NAME.txt      one "class cx cy w h" line per box, normalized
    classes.txt          one class name per line
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .postprocess import Box

log = logging.getLogger(__name__)

RIPENESS_CLASSES = ("Red", "Red-orange", "Orange", "Striped", "Salmon", "Green")

# RGB fill per class index for synthetic samples.
PALETTE = (
    (190, 20, 30),    # Red
    (230, 80, 30),    # Red-orange
    (245, 150, 20),   # Orange
    (170, 170, 50),   # Striped
    (250, 160, 140),  # Salmon
    (60, 150, 50),    # Green
)

IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png")


@dataclass(frozen=True)
class ClassTable:
    names: tuple = RIPENESS_CLASSES

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if not names or any(not n for n in names) or len(set(names)) != len(names):
            raise DataError(f"class names must be unique and non-empty: {names}")

    def __len__(self):
        return len(self.names)

    def __getitem__(self, i):
        return self.names[i]

    def index(self, name):
        return self.names.index(name)

    @classmethod
    def from_text(cls, text):
        return cls(tuple(line.strip() for line in text.splitlines() if line.strip()))

    @classmethod
    def load(cls, path):
        return cls.from_text(Path(path).read_text())

    def to_text(self):
        return "".join(n + "\n" for n in self.names)


@dataclass(frozen=True)
class GroundTruth:
    class_id: int
    box: Box


@dataclass
class Sample:
    image: np.ndarray  # (1, 3, H, W) float32 in [0, 1]
    truths: list
    source_id: str
    original_size: tuple | None = None  # (width, height) before rescale
    letterbox: tuple | None = None  # (scale, pad_x, pad_y) in network pixels
    extra: dict = field(default_factory=dict)


def parse_annotation(line: str, table: ClassTable) -> GroundTruth:
    """Parse ``"class cx cy w h"`` (normalized coordinates)."""
    fields = line.split()
    if len(fields) != 5:
        raise DataError(f"annotation needs 5 fields, got {len(fields)}: '{line.strip()}'")
    try:
        class_id = int(fields[0])
        cx, cy, w, h = (float(v) for v in fields[1:])
    except ValueError:
        raise DataError(f"annotation has a non-numeric field: '{line.strip()}'") from None
    if not 0 <= class_id < len(table):
        raise DataError(f"class {class_id} out of range 0..{len(table) - 1}")
    for name, v in zip(("cx", "cy", "w", "h"), (cx, cy, w, h)):
        if not 0.0 <= v <= 1.0:
            raise DataError(f"{name}={v} outside [0, 1]")
    return GroundTruth(class_id, Box(cx, cy, w, h))


def format_annotation(truth: GroundTruth) -> str:
    b = truth.box
    return f"{truth.class_id} {b.cx:.6f} {b.cy:.6f} {b.w:.6f} {b.h:.6f}"


def _target_wh(target):
    if isinstance(target, (int, np.integer)):
        return int(target), int(target)
    return int(target[0]), int(target[1])


def _bilinear(img, out_w, out_h):
    """Half-pixel-centre bilinear resize of an (H, W, C) float64 array."""
    h, w = img.shape[:2]
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def rescale_image(pixels, target) -> np.ndarray:
    """Stretch an (H, W, 3) uint8 RGB image to ``target`` with bilinear sampling.

    Returns a (1, 3, th, tw) float32 tensor scaled to [0, 1]. The aspect ratio
    is not preserved, so normalized box coordinates stay valid unchanged.
    """
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[0] < 1 or pixels.shape[1] < 1 or pixels.shape[2] != 3:
        raise DataError(f"expected a non-empty HxWx3 image, got shape {pixels.shape}")
    tw, th = _target_wh(target)
    img = pixels.astype(np.float64)
    if img.shape[:2] != (th, tw):
        img = _bilinear(img, tw, th)
    out = (img / 255.0).transpose(2, 0, 1)[None]
    return np.ascontiguousarray(out, dtype=np.float32)


def letterbox_image(pixels, target, fill=0.5):
    """Aspect-preserving resize centred on a ``fill`` canvas.

    Returns ``(tensor, (scale, pad_x, pad_y))`` where pads are in target pixels.
    """
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[0] < 1 or pixels.shape[1] < 1:
        raise DataError(f"expected a non-empty HxWx3 image, got shape {pixels.shape}")
    tw, th = _target_wh(target)
    h, w = pixels.shape[:2]
    scale = min(tw / w, th / h)
    nw, nh = max(1, round(w * scale)), max(1, round(h * scale))
    inner = rescale_image(pixels, (nw, nh))
    canvas = np.full((1, 3, th, tw), fill, dtype=np.float32)
    px, py = (tw - nw) // 2, (th - nh) // 2
    canvas[:, :, py:py + nh, px:px + nw] = inner
    return canvas, (scale, px, py)


def letterbox_box(box: Box, original_size, target, info) -> Box:
    """Map a box normalized to the original image into letterboxed network space."""
    w, h = original_size
    tw, th = _target_wh(target)
    scale, px, py = info
    return Box((box.cx * w * scale + px) / tw, (box.cy * h * scale + py) / th,
               box.w * w * scale / tw, box.h * h * scale / th)


def to_original_pixels(box: Box, original_size, target=None, info=None):
    """Corner box in original-image pixels, undoing stretch or letterbox resize."""
    w, h = original_size
    if info is None:
        return box.corners(w, h)
    tw, th = _target_wh(target)
    scale, px, py = info
    x0, y0, x1, y1 = box.corners(tw, th)
    return ((x0 - px) / scale, (y0 - py) / scale, (x1 - px) / scale, (y1 - py) / scale)


def split_dataset(samples, train_fraction: float, seed: int):
    """Seeded shuffle then split into ``(train, val)``."""
    if not 0.0 < train_fraction < 1.0:
        raise DataError(f"train_fraction must be in (0, 1), got {train_fraction}")
    samples = list(samples)
    n_train = int(round(len(samples) * train_fraction))
    if n_train == 0 or n_train == len(samples):
        raise DataError(f"split of {len(samples)} samples at {train_fraction} leaves one side empty")
    order = np.random.default_rng(seed).permutation(len(samples))
    return [samples[i] for i in order[:n_train]], [samples[i] for i in order[n_train:]]


# Synthetic data ----------------------------------------------------------------

def render_synthetic(rng, class_id, size):
    """Draw one textured background with a single filled disc.

    Returns ``(pixels, box)`` where ``box`` is the bounding square of the disc
    pixels, normalized by ``size``.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    base = rng.uniform(85, 135, size=3)
    freq = rng.uniform(0.05, 0.25, size=2) * (64.0 / size)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    wave = 12 * np.sin(xx * freq[0] + phase[0]) * np.cos(yy * freq[1] + phase[1])
    bg = base[None, None, :] + wave[..., None] + rng.normal(0, 8, size=(size, size, 3))

    radius = rng.uniform(0.12, 0.28) * size
    cx = rng.uniform(radius, size - radius)
    cy = rng.uniform(radius, size - radius)
    disc = (xx + 0.5 - cx) ** 2 + (yy + 0.5 - cy) ** 2 <= radius ** 2
    colour = np.array(PALETTE[class_id], dtype=np.float64) + rng.normal(0, 6, size=3)
    fill = colour[None, None, :] + rng.normal(0, 5, size=(size, size, 3))
    img = np.where(disc[..., None], fill, bg)
    pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)

    ys, xs = np.nonzero(disc)
    x0, x1 = xs.min(), xs.max() + 1
    y0, y1 = ys.min(), ys.max() + 1
    return pixels, Box.from_corners(float(x0), float(y0), float(x1), float(y1), size, size)


def synthesize_dataset(n: int, seed: int, table: ClassTable = ClassTable(), size: int = 416):
    """Balanced stand-in dataset: one coloured disc per ``size``x``size`` image.

    Class counts differ by at most one. Returns ``(samples, pixels)`` lists so
    the exact uint8 images can be written to disk.
    """
    if n < 1:
        raise DataError("n must be >= 1")
    if len(table) > len(PALETTE):
        raise DataError(f"palette has {len(PALETTE)} colours, table has {len(table)} classes")
    rng = np.random.default_rng(seed)
    classes = rng.permutation(np.arange(n) % len(table))
    samples, images = [], []
    for i, class_id in enumerate(classes):
        pixels, box = render_synthetic(rng, int(class_id), size)
        samples.append(Sample(rescale_image(pixels, size), [GroundTruth(int(class_id), box)],
                              f"synth_{i:05d}", (size, size)))
        images.append(pixels)
    return samples, images


# Directory I/O ---------------------------------------------------------------------

def read_image(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def write_dataset(out_dir, samples, images, table: ClassTable, fmt="png"):
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    (out / "classes.txt").write_text(table.to_text())
    from PIL import Image

    for sample, pixels in zip(samples, images):
        Image.fromarray(pixels).save(out / "images" / f"{sample.source_id}.{fmt}")
        lines = "".join(format_annotation(t) + "\n" for t in sample.truths)
        (out / "labels" / f"{sample.source_id}.txt").write_text(lines)


def image_files(path):
    path = Path(path)
    if path.is_file():
        return [path]
    return sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_sample(path, labels_dir, table: ClassTable, target, letterbox=False):
    """Load one image and its label file; returns ``(sample, problem)``, one of them None."""
    path = Path(path)
    label = Path(labels_dir) / f"{path.stem}.txt"
    if not label.exists():
        return None, (path.name, "missing label file")
    try:
        pixels = read_image(path)
        truths = [parse_annotation(line, table)
                  for line in label.read_text().splitlines() if line.strip()]
    except (OSError, DataError) as e:
        return None, (path.name, str(e))
    h, w = pixels.shape[:2]
    if letterbox:
        image, info = letterbox_image(pixels, target)
        truths = [GroundTruth(t.class_id, letterbox_box(t.box, (w, h), target, info)) for t in truths]
    else:
        image, info = rescale_image(pixels, target), None
    return Sample(image, truths, path.stem, (w, h), info), None


def load_dataset(images_dir, labels_dir, table: ClassTable, target, letterbox=False, workers=1):
    """Pair images with label files by stem and rescale to ``target``.

    Files are read by a pool of ``workers`` threads; samples keep directory
    order. Returns ``(samples, problems)``; ``problems`` lists skipped files
    with the reason (missing label, unreadable image, bad annotation).
    """
    labels_dir = Path(labels_dir)
    paths = image_files(images_dir)
    load = lambda p: load_sample(p, labels_dir, table, target, letterbox)  # noqa: E731
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            loaded = list(pool.map(load, paths))
    else:
        loaded = [load(p) for p in paths]
    samples = [s for s, _ in loaded if s is not None]
    problems = [p for _, p in loaded if p is not None]
    image_stems = {p.stem for p in paths}
    if labels_dir.is_dir():
        for label in sorted(labels_dir.glob("*.txt")):
            if label.stem not in image_stems:
                problems.append((label.name, "label without image"))
    for name, reason in problems:
        log.warning("skipping %s: %s", name, reason)
    return samples, problems
