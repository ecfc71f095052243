"""Datasets: IDX ingestion, graded affine perturbations, synthetic glyphs."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

# (max translation in pixels, max rotation in degrees), train/test split variants
PERTURBATIONS = ((0, 0.0), (2, 30.0), (2, 60.0), (2, 90.0), (2, 180.0))

DATA_ENV = "SOVNET_DATA_DIR"


class DataError(ValueError):
    pass


class BadMagic(DataError):
    pass


class CountMismatch(DataError):
    pass


class TruncatedFile(DataError):
    pass


class DataEmpty(DataError):
    pass


@dataclass(frozen=True)
class AffineSpec:
    max_translation: int = 0
    max_rotation: float = 0.0

    def __post_init__(self):
        if self.max_translation < 0 or self.max_rotation < 0:
            raise ValueError("affine extents must be nonnegative")

    @property
    def label(self) -> str:
        return f"({self.max_translation},{self.max_rotation:g})"


PERTURBATION_SPECS = tuple(AffineSpec(t, r) for t, r in PERTURBATIONS)


@dataclass
class Dataset:
    images: np.ndarray  # (n, c, H, W) in [0, 1]
    labels: np.ndarray  # (n,)
    classes: int = 10
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be (n, c, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise CountMismatch(f"{len(self.images)} images vs {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise DataError("label outside class range")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.classes, dict(self.provenance))

    def head(self, n: int) -> "Dataset":
        return self.subset(slice(0, n))

    def pad_to(self, size: int) -> "Dataset":
        n = self.images.shape[-1]
        if size < n:
            raise DataError("cannot pad to a smaller size")
        lo = (size - n) // 2
        hi = size - n - lo
        imgs = np.pad(self.images, ((0, 0), (0, 0), (lo, hi), (lo, hi)))
        return Dataset(imgs, self.labels, self.classes, dict(self.provenance, padded=size))


def data_dir() -> Path:
    return Path(os.environ.get(DATA_ENV, Path.home() / ".cache" / "sovnet"))


# ----------------------------------------------------------------------------- IDX

def _open(path):
    path = str(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def _read_idx(path, magic: int) -> np.ndarray:
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise TruncatedFile(f"{path}: header truncated")
    (m,) = struct.unpack(">I", raw[:4])
    if m != magic:
        raise BadMagic(f"{path}: magic 0x{m:08x}, expected 0x{magic:08x}")
    ndim = raw[3]
    hdr = 4 + 4 * ndim
    if len(raw) < hdr:
        raise TruncatedFile(f"{path}: header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:hdr])
    count = int(np.prod(dims))
    if len(raw) < hdr + count:
        raise TruncatedFile(f"{path}: expected {count} bytes of data, found {len(raw) - hdr}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=hdr).reshape(dims)


def load_idx(images_path, labels_path, classes: int = 10) -> Dataset:
    """Read an IDX image/label pair (optionally gzipped); pixels are scaled to [0, 1]."""
    imgs = _read_idx(images_path, IMAGES_MAGIC)
    labels = _read_idx(labels_path, LABELS_MAGIC)
    if imgs.shape[0] != labels.shape[0]:
        raise CountMismatch(f"{imgs.shape[0]} images vs {labels.shape[0]} labels")
    if imgs.ndim == 3:
        imgs = imgs[:, None]
    images = imgs.astype(np.float32) / 255.0
    return Dataset(images, labels.astype(np.int64), classes,
                   {"source": str(images_path), "spec": AffineSpec().label, "seed": None})


def write_idx(images_path, labels_path, images_u8: np.ndarray, labels: np.ndarray) -> None:
    """Write IDX files; ``images_u8`` is (n, H, W) uint8."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">I", IMAGES_MAGIC))
        fh.write(struct.pack(">3I", *images_u8.shape))
        fh.write(images_u8.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">I", LABELS_MAGIC))
        fh.write(struct.pack(">I", len(labels)))
        fh.write(labels.tobytes())


def prepare_from_csv(csv_path, out_dir, test_fraction: float = 0.2, seed: int = 0) -> dict:
    """Convert a CSV of ``784 pixels..., label`` rows into train/test IDX files.

    The 5000-row MNIST sample shipped with mlxtend (``mnist_5k.csv.gz``) has this layout.
    """
    opener = gzip.open if str(csv_path).endswith(".gz") else open
    with opener(csv_path, "rt") as fh:
        arr = np.loadtxt(fh, delimiter=",", dtype=np.int64)
    pixels, labels = arr[:, :-1], arr[:, -1]
    side = int(round(np.sqrt(pixels.shape[1])))
    if side * side != pixels.shape[1]:
        raise DataError("row length is not a square image plus label")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(labels))
    n_test = int(round(test_fraction * len(labels)))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split, idx in (("test", order[:n_test]), ("train", order[n_test:])):
        ip, lp = out / f"{split}-images-idx3-ubyte", out / f"{split}-labels-idx1-ubyte"
        write_idx(ip, lp, pixels[idx].reshape(-1, side, side), labels[idx])
        paths[split] = (ip, lp)
    return paths


def load_split(root, split: str, classes: int = 10) -> Dataset:
    root = Path(root)
    for prefix in (split, "t10k" if split == "test" else split):
        for suffix in ("", ".gz"):
            ip = root / f"{prefix}-images-idx3-ubyte{suffix}"
            lp = root / f"{prefix}-labels-idx1-ubyte{suffix}"
            if ip.exists() and lp.exists():
                return load_idx(ip, lp, classes)
    raise FileNotFoundError(f"no {split} IDX files under {root}")


# ----------------------------------------------------------------------------- affine

def rotate_exact(img: np.ndarray, quarter_turns: int) -> np.ndarray:
    """Rotate (..., H, W) by a multiple of 90° about the centre (pure permutation)."""
    return np.rot90(img, quarter_turns % 4, axes=(-2, -1)).copy()


def rotate_bilinear(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate (..., H, W) counter-clockwise about the centre; bilinear, zero fill.

    Matches ``rotate_exact`` at multiples of 90° up to interpolation rounding.
    """
    H, W = img.shape[-2:]
    th = np.deg2rad(degrees)
    c, s = np.cos(th), np.sin(th)
    yy, xx = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    dy, dx = yy - cy, xx - cx
    # inverse rotation: rows/cols act like the integer quarter-turn [[0,-1],[1,0]]
    sy = c * dy + s * dx + cy
    sx = -s * dy + c * dx + cx
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    fy, fx = sy - y0, sx - x0
    out = np.zeros(img.shape, dtype=np.float64)
    for oy, wy in ((0, 1 - fy), (1, fy)):
        for ox, wx in ((0, 1 - fx), (1, fx)):
            yi, xi = y0 + oy, x0 + ox
            ok = (yi >= 0) & (yi < H) & (xi >= 0) & (xi < W)
            vals = img[..., np.clip(yi, 0, H - 1), np.clip(xi, 0, W - 1)]
            out += vals * (wy * wx * ok)
    return out.astype(img.dtype)


def rotate_image(img: np.ndarray, degrees: float) -> np.ndarray:
    q, r = divmod(float(degrees), 90.0)
    if r == 0.0:
        return rotate_exact(img, int(q))
    return rotate_bilinear(img, degrees)


def translate_image(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    H, W = img.shape[-2:]
    out = np.zeros_like(img)
    ys, yd = (slice(0, H - dy), slice(dy, H)) if dy >= 0 else (slice(-dy, H), slice(0, H + dy))
    xs, xd = (slice(0, W - dx), slice(dx, W)) if dx >= 0 else (slice(-dx, W), slice(0, W + dx))
    out[..., yd, xd] = img[..., ys, xs]
    return out


def sample_transforms(n: int, spec: AffineSpec, rng: np.random.Generator):
    angles = rng.uniform(-spec.max_rotation, spec.max_rotation, size=n) if spec.max_rotation else np.zeros(n)
    t = spec.max_translation
    shifts = rng.integers(-t, t + 1, size=(n, 2)) if t else np.zeros((n, 2), dtype=np.int64)
    return angles, shifts


def affine_perturb(ds: Dataset, spec: AffineSpec, seed: int, angles=None, shifts=None) -> Dataset:
    """Rotate (about the centre, bilinear) then translate every image by a sampled amount.

    ``angles``/``shifts`` override the sampler for individual images.
    """
    rng = np.random.default_rng(seed)
    a, s = sample_transforms(len(ds), spec, rng)
    angles = a if angles is None else np.broadcast_to(np.asarray(angles, dtype=np.float64), (len(ds),))
    shifts = s if shifts is None else np.broadcast_to(np.asarray(shifts, dtype=np.int64), (len(ds), 2))
    out = ds.images.copy()
    for k in range(len(ds)):
        img = ds.images[k]
        if angles[k] != 0.0:
            img = rotate_image(img, angles[k])
        if shifts[k, 0] or shifts[k, 1]:
            img = translate_image(img, int(shifts[k, 0]), int(shifts[k, 1]))
        out[k] = img
    prov = dict(ds.provenance, spec=spec.label, seed=seed)
    return Dataset(np.clip(out, 0.0, 1.0), ds.labels.copy(), ds.classes, prov)


def split_matrix(train: Dataset, test: Dataset, seed: int, specs: Sequence[AffineSpec] = PERTURBATION_SPECS):
    """Apply every perturbation spec to both splits with independent seeds.

    Returns (train_variants, test_variants), five datasets each.
    """
    ss = np.random.SeedSequence(seed)
    kids = ss.spawn(2 * len(specs))
    seeds = [int(k.generate_state(1)[0]) for k in kids]
    trains = [affine_perturb(train, sp, seeds[i]) for i, sp in enumerate(specs)]
    tests = [affine_perturb(test, sp, seeds[len(specs) + i]) for i, sp in enumerate(specs)]
    return trains, tests


# ----------------------------------------------------------------------------- synthetic glyphs

SHAPE_CLASSES = ("bar", "L", "T", "cross")


def _glyph(name: str) -> np.ndarray:
    """Binary glyphs with nine lit pixels each, so pixel mass carries no label."""
    if name == "bar":
        g = np.zeros((9, 9), dtype=np.float32)
        g[4, :] = 1
        return g
    g = np.zeros((5, 5), dtype=np.float32)
    if name == "L":
        g[:, 0] = 1
        g[4, 1:] = 1
    elif name == "T":
        g[0, :] = 1
        g[1:, 2] = 1
    elif name == "cross":
        g[2, :] = 1
        g[:, 2] = 1
    else:
        raise ValueError(f"unknown glyph {name!r}")
    return g


def _trim(g: np.ndarray) -> np.ndarray:
    ys, xs = np.nonzero(g)
    return g[ys.min():ys.max() + 1, xs.min():xs.max() + 1]


def synthetic_shapes(n: int, classes: Sequence[str] = SHAPE_CLASSES, size: int = 15, seed: int = 0) -> Dataset:
    """Glyphs at random positions and random quarter-turn orientations, balanced labels."""
    if size < 9:
        raise ValueError("size must be at least 9")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % len(classes)
    rng.shuffle(labels)
    images = np.zeros((n, 1, size, size), dtype=np.float32)
    glyphs = [_glyph(c) for c in classes]
    for k, lab in enumerate(labels):
        g = _trim(np.rot90(glyphs[lab], rng.integers(4)))
        h, w = g.shape
        y = rng.integers(0, size - h + 1)
        x = rng.integers(0, size - w + 1)
        images[k, 0, y:y + h, x:x + w] = g
    return Dataset(images, labels, len(classes),
                   {"source": "synthetic_shapes", "classes": list(classes), "seed": seed, "spec": AffineSpec().label})
