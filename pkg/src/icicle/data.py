"""Synthetic fine-grained image data, task streams and file formats.

Every image shares one background texture and a fixed set of common glyphs;
classes differ only through a few small class-specific glyphs placed at random
grid cells, so a single local patch is enough to tell classes apart.
"""

from __future__ import annotations

import itertools
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import make_rng

GLYPH = 5
CELL = 6  # glyph plus one pixel gap


class DataError(ValueError):
    pass


# ---------------------------------------------------------------- glyphs

def _shapes() -> list[np.ndarray]:
    g = GLYPH
    c = g // 2
    shapes = []

    def blank():
        return np.zeros((g, g), dtype=bool)

    s = blank(); s[c, :] = True; shapes.append(s)  # horizontal bar
    s = blank(); s[:, c] = True; shapes.append(s)  # vertical bar
    shapes.append(np.eye(g, dtype=bool))  # diagonal
    shapes.append(np.fliplr(np.eye(g, dtype=bool)))  # anti-diagonal
    s = blank(); s[c, :] = s[:, c] = True; shapes.append(s)  # plus
    shapes.append(np.eye(g, dtype=bool) | np.fliplr(np.eye(g, dtype=bool)))  # cross
    s = ~blank(); s[1:-1, 1:-1] = False; shapes.append(s)  # ring
    s = blank(); s[c - 1:c + 2, c - 1:c + 2] = True; shapes.append(s)  # dot
    for k in range(4):  # corners
        s = blank(); s[0, :] = s[:, 0] = True; shapes.append(np.rot90(s, k))
    s = blank(); s[0, :] = s[:, c] = True; shapes.append(s)  # tee
    s = blank(); s[::2, :] = True; shapes.append(s)  # stripes
    s = blank(); s[:, ::2] = True; shapes.append(s)
    s = np.indices((g, g)).sum(axis=0) % 2 == 0; shapes.append(s)  # checker
    return shapes


COLORS = [
    (1.0, 0.0, 0.0),
    (0.0, 1.0, 0.0),
    (0.0, 0.0, 1.0),
    (1.0, 1.0, 0.0),
    (1.0, 0.0, 1.0),
    (0.0, 1.0, 1.0),
    (1.0, 1.0, 1.0),
]


def glyph_library() -> list[np.ndarray]:
    """All 5x5x3 glyph tiles: shape pixels take the colour, the rest is black."""
    tiles = []
    for color, shape in itertools.product(COLORS, _shapes()):
        tiles.append(np.where(shape[..., None], np.asarray(color), 0.0))
    return tiles


# ---------------------------------------------------------------- dataset

@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 20
    image_size: tuple[int, int, int] = (32, 32, 3)
    common_parts: int = 2
    distinctive_parts: int = 2
    library_size: int = 0  # 0 = whole library
    noise: float = 0.02
    samples_per_class: int = 120

    def validate(self) -> None:
        if self.num_classes < 1:
            raise DataError("need at least one class")
        if self.distinctive_parts < 1 or self.common_parts < 0:
            raise DataError("need at least one distinctive part per class")
        if self.noise < 0:
            raise DataError("noise must be non-negative")
        if self.samples_per_class < 1:
            raise DataError("samples_per_class must be positive")
        h, w, c = self.image_size
        if c != 3:
            raise DataError("images must have 3 channels")
        slots = ((h - 1) // CELL) * ((w - 1) // CELL)
        if self.common_parts + self.distinctive_parts > slots:
            raise DataError(f"{slots} glyph cells cannot hold the requested parts")
        available = len(glyph_library())
        size = self.library_size or available
        if size > available:
            raise DataError(f"library_size {size} exceeds the {available} available glyphs")
        needed = self.common_parts + self.num_classes * self.distinctive_parts
        if size < needed:
            raise DataError(f"glyph library of {size} is smaller than the {needed} distinct parts needed")


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, 3) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int
    class_glyphs: dict[int, list[int]] = field(default_factory=dict)
    common_glyphs: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> tuple[np.ndarray, np.ndarray]:
        return self.images[idx], self.labels[idx]


def _background(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    base = np.empty((h, w, 3))
    for ch in range(3):
        fy, fx, phase = rng.uniform(1.0, 3.0), rng.uniform(1.0, 3.0), rng.uniform(0, 2 * np.pi)
        base[..., ch] = 0.35 + 0.1 * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
    return base


def generate_synthetic(spec: SyntheticSpec, seed: int) -> Dataset:
    spec.validate()
    rng = make_rng(seed)
    h, w, _ = spec.image_size
    library = glyph_library()[: spec.library_size or None]
    order = rng.permutation(len(library))
    common = [int(i) for i in order[: spec.common_parts]]
    class_glyphs = {}
    for c in range(spec.num_classes):
        start = spec.common_parts + c * spec.distinctive_parts
        class_glyphs[c] = [int(i) for i in order[start:start + spec.distinctive_parts]]
    background = _background(h, w, rng)
    cells = [(1 + CELL * i, 1 + CELL * j) for i in range((h - 1) // CELL) for j in range((w - 1) // CELL)]

    n = spec.num_classes * spec.samples_per_class
    images = np.empty((n,) + tuple(spec.image_size), dtype=np.float32)
    labels = np.repeat(np.arange(spec.num_classes), spec.samples_per_class)
    for k, c in enumerate(labels):
        img = background.copy()
        glyphs = common + class_glyphs[int(c)]
        spots = rng.choice(len(cells), size=len(glyphs), replace=False)
        for g, s in zip(glyphs, spots):
            y, x = cells[s]
            img[y:y + GLYPH, x:x + GLYPH] = library[g]
        if spec.noise:
            img = img + rng.normal(0.0, spec.noise, size=img.shape)
        images[k] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels.astype(np.int64), spec.num_classes, class_glyphs, common)


# ---------------------------------------------------------------- task stream

@dataclass
class Split:
    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class TaskSpec:
    task_id: int
    classes: list[int]
    train: Split
    val: Split
    test: Split


@dataclass
class TaskStream:
    tasks: list[TaskSpec]

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, i) -> TaskSpec:
        return self.tasks[i]

    def manifest(self) -> str:
        lines = ["# task: classes"]
        for t in self.tasks:
            lines.append(f"task {t.task_id}: " + " ".join(str(c) for c in t.classes))
        return "\n".join(lines) + "\n"


def split_tasks(dataset: Dataset, num_tasks: int, seed: int, fractions=(0.7, 0.15, 0.15)) -> TaskStream:
    if not 1 <= num_tasks <= dataset.num_classes:
        raise DataError(f"cannot split {dataset.num_classes} classes into {num_tasks} tasks")
    rng = make_rng(seed)
    classes = [int(c) for c in rng.permutation(dataset.num_classes)]
    base, extra = divmod(dataset.num_classes, num_tasks)
    sizes = [base + (1 if t < extra else 0) for t in range(num_tasks)]
    per_class = {}
    for c in range(dataset.num_classes):
        idx = rng.permutation(np.flatnonzero(dataset.labels == c))
        n = len(idx)
        n_train = int(np.floor(fractions[0] * n + 0.5))
        n_val = int(np.floor(fractions[1] * n + 0.5))
        if n_train < 1 or n_val < 1 or n - n_train - n_val < 1:
            raise DataError(f"class {c} has too few samples ({n}) for a three-way split")
        per_class[c] = (idx[:n_train], idx[n_train:n_train + n_val], idx[n_train + n_val:])
    tasks, start = [], 0
    for t, size in enumerate(sizes):
        cls = classes[start:start + size]
        start += size
        parts = []
        for which in range(3):
            idx = np.concatenate([per_class[c][which] for c in cls])
            parts.append(Split(*dataset.subset(idx)))
        tasks.append(TaskSpec(t + 1, cls, *parts))
    return TaskStream(tasks)


# ---------------------------------------------------------------- ICDS binary format

DATASET_MAGIC = b"ICDS"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sH5I")


def dataset_bytes(dataset: Dataset) -> bytes:
    n, h, w, c = dataset.images.shape
    body = _HEADER.pack(DATASET_MAGIC, DATASET_VERSION, dataset.num_classes, n, h, w, c)
    body += dataset.labels.astype("<u4").tobytes()
    body += np.ascontiguousarray(dataset.images, dtype="<f4").tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def parse_dataset(raw: bytes) -> Dataset:
    if len(raw) < _HEADER.size + 4:
        raise DataError("truncated dataset file")
    magic, version, classes, n, h, w, c = _HEADER.unpack_from(raw)
    if magic != DATASET_MAGIC:
        raise DataError(f"bad magic {magic!r}")
    if version != DATASET_VERSION:
        raise DataError(f"unsupported dataset version {version}")
    expected = _HEADER.size + 4 * n + 4 * n * h * w * c + 4
    if len(raw) != expected:
        raise DataError(f"truncated dataset payload ({len(raw)} of {expected} bytes)")
    (crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if crc != zlib.crc32(raw[:-4]):
        raise DataError("checksum mismatch")
    off = _HEADER.size
    labels = np.frombuffer(raw, dtype="<u4", count=n, offset=off).astype(np.int64)
    off += 4 * n
    images = np.frombuffer(raw, dtype="<f4", count=n * h * w * c, offset=off)
    images = images.astype(np.float32).reshape(n, h, w, c)
    return Dataset(images, labels, classes)


def save_dataset(dataset: Dataset, path) -> None:
    Path(path).write_bytes(dataset_bytes(dataset))


def load_dataset(path) -> Dataset:
    return parse_dataset(Path(path).read_bytes())


# ---------------------------------------------------------------- netpbm

def ppm_bytes(image: np.ndarray, comment: str | None = None) -> bytes:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError("PPM needs an H x W x 3 image")
    return _pnm(b"P6", image, comment)


def pgm_bytes(image: np.ndarray, comment: str | None = None) -> bytes:
    image = np.asarray(image)
    if image.ndim != 2:
        raise DataError("PGM needs an H x W image")
    return _pnm(b"P5", image, comment)


def _pnm(magic: bytes, image: np.ndarray, comment: str | None) -> bytes:
    if image.dtype != np.uint8:
        image = to_bytes(image)
    h, w = image.shape[:2]
    header = magic + b"\n"
    if comment:
        for line in comment.splitlines():
            header += b"# " + line.encode("ascii") + b"\n"
    header += f"{w} {h}\n255\n".encode("ascii")
    return header + image.tobytes()


def to_bytes(image: np.ndarray) -> np.ndarray:
    """Map floats in [0, 1] to 0..255 with round-half-up."""
    return np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def parse_pnm(raw: bytes) -> tuple[np.ndarray, list[str]]:
    """Decode binary P5/P6 data; returns the uint8 array and any comment lines."""
    pos, tokens, comments = 0, [], []
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(raw):
            raise DataError("truncated netpbm header")
        if raw[pos:pos + 1] == b"#":
            end = raw.find(b"\n", pos)
            end = len(raw) if end < 0 else end
            comments.append(raw[pos + 1:end].decode("ascii").strip())
            pos = end
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte before the raster
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise DataError(f"unsupported netpbm magic {magic!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise DataError("only 8-bit netpbm files are supported")
    channels = 3 if magic == b"P6" else 1
    size = w * h * channels
    if len(raw) - pos < size:
        raise DataError("truncated netpbm raster")
    arr = np.frombuffer(raw, dtype=np.uint8, count=size, offset=pos).copy()
    return (arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)), comments


def save_image(path, image: np.ndarray, comment: str | None = None) -> None:
    image = np.asarray(image)
    raw = pgm_bytes(image, comment) if image.ndim == 2 else ppm_bytes(image, comment)
    Path(path).write_bytes(raw)


def load_image(path) -> np.ndarray:
    return parse_pnm(Path(path).read_bytes())[0]
