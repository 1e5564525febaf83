"""Image datasets: IDX ingestion, a procedural glyph generator, sampling and batching."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    """Flattened images in [0, 1] with integer labels.

    ``images`` has shape (N, D) with D = image_side ** 2 (single channel).
    """

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    image_side: int
    indices: np.ndarray = field(default=None)

    def __post_init__(self):
        images = np.ascontiguousarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 2 or images.shape[1] != self.image_side ** 2:
            raise DatasetError(f"images must be (N, {self.image_side ** 2}), got {images.shape}")
        if labels.shape != (images.shape[0],):
            raise DatasetError(f"{images.shape[0]} images but {labels.shape[0]} labels")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise DatasetError("pixel values must lie in [0, 1]")
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise DatasetError(f"labels must lie in [0, {self.class_count})")
        indices = self.indices
        if indices is None:
            indices = np.arange(images.shape[0])
        images.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "indices", np.asarray(indices, dtype=np.int64))

    def __len__(self):
        return self.images.shape[0]

    @property
    def dim(self) -> int:
        return self.images.shape[1]

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(self.images[rows], self.labels[rows], self.class_count,
                       self.image_side, self.indices[rows])


# --- IDX ----------------------------------------------------------------------

def _read_idx(path, expected_magic):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise DatasetError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DatasetError(f"{path}: bad magic number 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DatasetError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    payload = raw[header:]
    if len(payload) < count:
        raise DatasetError(f"{path}: truncated payload ({len(payload)} of {count} bytes)")
    return np.frombuffer(payload[:count], dtype=np.uint8).reshape(dims)


def load_idx(image_path, label_path, *, class_count: int = 10, pool: int = 1) -> Dataset:
    """Read an IDX image/label pair, scale pixels to [0, 1] and optionally mean-pool."""
    images = _read_idx(image_path, IDX_IMAGE_MAGIC)
    labels = _read_idx(label_path, IDX_LABEL_MAGIC)
    if images.ndim != 3:
        raise DatasetError(f"{image_path}: expected 3 dimensions, got {images.ndim}")
    if images.shape[1] != images.shape[2]:
        raise DatasetError(f"{image_path}: images must be square, got {images.shape[1:]}")
    if labels.shape[0] != images.shape[0]:
        raise DatasetError(f"image count {images.shape[0]} != label count {labels.shape[0]}")
    pixels = images.astype(np.float64) / 255.0
    if pool > 1:
        pixels = mean_pool(pixels, pool)
    side = pixels.shape[1]
    class_count = max(class_count, int(labels.max()) + 1 if labels.size else 1)
    return Dataset(pixels.reshape(len(pixels), -1), labels.astype(np.int64), class_count, side)


def write_idx(dataset: Dataset, image_path, label_path) -> None:
    """Serialize a dataset back to IDX (pixels rounded to bytes)."""
    n, side = len(dataset), dataset.image_side
    pixels = np.rint(dataset.images * 255.0).astype(np.uint8)
    with open(image_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, side, side))
        fh.write(pixels.tobytes())
    with open(label_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABEL_MAGIC, n))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


def mean_pool(images: np.ndarray, factor: int = 2) -> np.ndarray:
    """Non-overlapping ``factor`` x ``factor`` mean pooling of (N, S, S) images."""
    n, s, _ = images.shape
    if s % factor:
        raise DatasetError(f"side {s} not divisible by pool factor {factor}")
    k = s // factor
    return images.reshape(n, k, factor, k, factor).mean(axis=(2, 4))


# --- synthetic glyphs --------------------------------------------------------

# (kind, parameter) per class; strokes are rendered as soft distance fields
_GLYPHS = [
    ("bar", 0.0),              # horizontal bar
    ("bar", np.pi / 2),        # vertical bar
    ("bar", np.pi / 4),        # diagonal
    ("ring", 0.0),
    ("cross", 0.0),
    ("bar", -np.pi / 4),       # anti-diagonal
    ("blob2", 0.0),            # two blobs
    ("square", 0.0),
    ("ell", 0.0),
    ("tee", 0.0),
]


def _segment_dist(px, py, ax, ay, bx, by):
    dx, dy = bx - ax, by - ay
    t = np.clip(((px - ax) * dx + (py - ay) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
    return np.hypot(px - ax - t * dx, py - ay - t * dy)


def _render(kind, angle, rng, side):
    c = (side - 1) / 2.0
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    cx = c + rng.uniform(-1.0, 1.0)
    cy = c + rng.uniform(-1.0, 1.0)
    scale = side * rng.uniform(0.32, 0.40)
    width = side * rng.uniform(0.06, 0.09)
    rot = angle + rng.uniform(-0.15, 0.15)

    def seg(t0, t1, a):
        return _segment_dist(xx, yy, cx + t0 * np.cos(a), cy + t0 * np.sin(a),
                             cx + t1 * np.cos(a), cy + t1 * np.sin(a))

    if kind == "bar":
        d = seg(-scale, scale, rot)
    elif kind == "cross":
        d = np.minimum(seg(-scale, scale, rot), seg(-scale, scale, rot + np.pi / 2))
    elif kind == "ring":
        d = np.abs(np.hypot(xx - cx, yy - cy) - 0.75 * scale)
    elif kind == "blob2":
        r = 0.6 * scale
        d = np.minimum(np.hypot(xx - cx - r, yy - cy - r), np.hypot(xx - cx + r, yy - cy + r)) - width
    elif kind == "square":
        s = 0.75 * scale
        d = np.maximum(np.abs(xx - cx), np.abs(yy - cy))
        d = np.abs(d - s)
    elif kind == "ell":
        s = 0.8 * scale
        d = np.minimum(_segment_dist(xx, yy, cx - s, cy - s, cx - s, cy + s),
                       _segment_dist(xx, yy, cx - s, cy + s, cx + s, cy + s))
    else:  # tee
        s = 0.8 * scale
        d = np.minimum(_segment_dist(xx, yy, cx - s, cy - s, cx + s, cy - s),
                       _segment_dist(xx, yy, cx, cy - s, cx, cy + s))
    softness = 0.35 + rng.uniform(0.0, 0.2)
    img = 1.0 / (1.0 + np.exp((d - width) / softness))
    img *= rng.uniform(0.85, 1.0)
    img += rng.normal(0.0, 0.02, img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(seed: int, n_per_class: int, class_count: int = 4,
                       image_side: int = 14) -> Dataset:
    """Deterministic procedural glyph dataset, ``n_per_class`` samples per class.

    Samples are ordered class by class; use :func:`batches` or
    :func:`stratified_sample` for shuffled access.
    """
    if not 1 <= class_count <= len(_GLYPHS):
        raise DatasetError(f"class_count must be in [1, {len(_GLYPHS)}]")
    if image_side < 8:
        raise DatasetError("image_side must be at least 8")
    rng = np.random.default_rng(seed)
    images = np.empty((class_count * n_per_class, image_side * image_side))
    labels = np.repeat(np.arange(class_count), n_per_class)
    for k in range(class_count):
        kind, angle = _GLYPHS[k]
        for i in range(n_per_class):
            images[k * n_per_class + i] = _render(kind, angle, rng, image_side).ravel()
    return Dataset(images, labels, class_count, image_side)


# --- sampling ----------------------------------------------------------------

def stratified_sample(dataset: Dataset, per_class: int, seed: int) -> Dataset:
    """Pick exactly ``per_class`` items of every class, shuffled by ``seed``."""
    rng = np.random.default_rng(seed)
    chosen = []
    for k in range(dataset.class_count):
        rows = np.flatnonzero(dataset.labels == k)
        if rows.size < per_class:
            raise DatasetError(f"class {k} has {rows.size} items, {per_class} requested")
        chosen.append(rng.choice(rows, size=per_class, replace=False))
    rows = np.concatenate(chosen) if chosen else np.zeros(0, dtype=np.int64)
    rows = rows[rng.permutation(rows.size)]
    return dataset.subset(rows)


def batch_indices(n: int, batch_size: int, seed: int, epoch: int = 0) -> list[np.ndarray]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def batches(dataset: Dataset, batch_size: int, seed: int, epoch: int = 0) -> list[np.ndarray]:
    """Shuffled mini-batches of images; the last partial batch is kept."""
    return [dataset.images[idx] for idx in batch_indices(len(dataset), batch_size, seed, epoch)]


def train_test_split(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified split; each class contributes ``round(test_fraction * n_k)`` test items."""
    rng = np.random.default_rng(seed)
    train_rows, test_rows = [], []
    for k in range(dataset.class_count):
        rows = rng.permutation(np.flatnonzero(dataset.labels == k))
        n_test = int(round(test_fraction * rows.size))
        test_rows.append(rows[:n_test])
        train_rows.append(rows[n_test:])
    return (dataset.subset(np.sort(np.concatenate(train_rows))),
            dataset.subset(np.sort(np.concatenate(test_rows))))
