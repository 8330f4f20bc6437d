"""Dataset ingestion, IDX files, stratified splits, data reduction, balancing, synthetic shapes."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from PIL import Image

from .rng import Xoshiro256StarStar, derive_seed

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataFormatError(ValueError):
    """Malformed dataset file or directory."""


@dataclass
class Dataset:
    images: np.ndarray                  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray                  # (N,) int64
    class_names: list[str]
    provenance: str = ""
    source_index: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.size:
            raise ValueError(f"images {self.images.shape} do not match {self.labels.size} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ValueError("labels out of range for class_names")

    def __len__(self) -> int:
        return int(self.labels.size)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        src = None if self.source_index is None else self.source_index[idx]
        return Dataset(self.images[idx], self.labels[idx], list(self.class_names),
                       self.provenance, src)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


# -- image directories -------------------------------------------------------

def _to_chw(img: Image.Image, hw: tuple[int, int]) -> np.ndarray:
    h, w = hw
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB") if img.mode in ("RGBA", "P", "CMYK", "YCbCr", "LA") else img.convert("L")
    if img.size != (w, h):
        img = img.resize((w, h), resample=Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = np.repeat(arr[None], 3, axis=0)
    else:
        arr = arr.transpose(2, 0, 1)
    return arr


def load_image(path, resize: tuple[int, int]) -> np.ndarray:
    """One raster file as a (3, H, W) float array in [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            img.load()
            return _to_chw(img, resize)
    except (OSError, ValueError) as exc:
        raise DataFormatError(f"cannot decode image {path}: {exc}") from None


def load_image_directory(root, resize: tuple[int, int] = (64, 64)) -> Dataset:
    """``root/<class>/<image>`` layout; classes and files are taken in sorted order."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DataFormatError(f"no class directories under {root}")
    images, labels = [], []
    for label, d in enumerate(class_dirs):
        files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DataFormatError(f"class directory {d} contains no images")
        for f in files:
            images.append(load_image(f, resize))
            labels.append(label)
    return Dataset(np.stack(images), np.array(labels), [d.name for d in class_dirs],
                   provenance=f"dir:{root}")


# -- IDX ---------------------------------------------------------------------

def _read_idx(path, magic: int) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise DataFormatError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise DataFormatError(f"{path}: truncated dimension header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:head])
    n = int(np.prod(dims))
    if len(raw) - head < n:
        raise DataFormatError(f"{path}: payload has {len(raw) - head} bytes, expected {n}")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=head).reshape(dims)


def load_idx_pair(images_path, labels_path, class_names: list[str] | None = None) -> Dataset:
    """Unsigned-byte IDX image/label files; grayscale replicated to three channels."""
    imgs = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC).astype(np.int64)
    if imgs.shape[0] != labels.shape[0]:
        raise DataFormatError(f"count mismatch: {imgs.shape[0]} images vs {labels.shape[0]} labels")
    x = imgs.astype(np.float32) / 255.0
    x = np.repeat(x[:, None], 3, axis=1)
    k = int(labels.max()) + 1 if labels.size else 0
    names = class_names or [str(i) for i in range(k)]
    return Dataset(x, labels, names, provenance=f"idx:{images_path}")


def write_idx_pair(ds: Dataset, images_path, labels_path) -> None:
    """Write the first channel of ``ds`` as IDX bytes (values rounded from [0, 1])."""
    gray = np.clip(np.rint(ds.images[:, 0] * 255.0), 0, 255).astype(np.uint8)
    n, h, w = gray.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + gray.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, n)
                                  + ds.labels.astype(np.uint8).tobytes())


# -- splitting -----------------------------------------------------------------

@dataclass
class SplitAssignment:
    train: list[int]
    val: list[int]
    test: list[int]
    seed: int = 0

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)


def _largest_remainder(quotas: list[Fraction], target: int) -> list[int]:
    """Floor each quota, then hand out the shortfall by largest remainder (ties: earliest)."""
    base = [q.numerator // q.denominator for q in quotas]
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - base[i]), i))
    for i in order[:target - sum(base)]:
        base[i] += 1
    return base


def _apportion(total: int, shares) -> list[int]:
    """Round every share but the last half-to-even; the last takes the remainder."""
    out = []
    left = total
    for s in shares[:-1]:
        k = min(round(Fraction(total) * s), left)
        out.append(k)
        left -= k
    return out + [left]


def _as_fraction(x) -> Fraction:
    return x if isinstance(x, Fraction) else Fraction(str(x))


def stratified_split(ds_or_labels, ratios=(0.70, 0.20, 0.10), seed: int = 0,
                     class_names: list[str] | None = None) -> SplitAssignment:
    """Per-class seeded shuffle followed by a proportional cut.

    Per class, the train and val counts are ``ratios * n`` rounded half to
    even (exact rational arithmetic) and test receives the remainder.
    """
    labels = ds_or_labels.labels if isinstance(ds_or_labels, Dataset) else np.asarray(ds_or_labels)
    names = ds_or_labels.class_names if isinstance(ds_or_labels, Dataset) else class_names
    shares = [_as_fraction(r) for r in ratios]
    if sum(shares) != 1:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    rng = Xoshiro256StarStar(seed)
    train, val, test = [], [], []
    k = int(labels.max()) + 1 if labels.size else 0
    for c in range(k):
        idx = [int(i) for i in np.flatnonzero(labels == c)]
        if len(idx) < 3:
            name = names[c] if names else str(c)
            raise ValueError(f"class {name!r} has {len(idx)} samples; stratified split needs >= 3")
        rng.shuffle(idx)
        a, b, _ = _apportion(len(idx), shares)
        train += idx[:a]
        val += idx[a:a + b]
        test += idx[a + b:]
    return SplitAssignment(train, val, test, seed)


@dataclass(frozen=True)
class ReductionSpec:
    fraction: float
    seed: int = 0


DEFAULT_FRACTIONS = tuple(Fraction(100 - 5 * i, 100) for i in range(17))   # 1.00 .. 0.20


def reduce_training_set(split: SplitAssignment, spec: ReductionSpec, labels) -> SplitAssignment:
    """Stratified subsample of the training indices keeping floor(p * N_train) samples.

    Per-class quotas are floored and topped up by largest remainder so the
    global count is exact; validation and test lists are returned unchanged.
    """
    p = _as_fraction(spec.fraction)
    if not 0 < p <= 1:
        raise ValueError(f"reduction fraction must be in (0, 1], got {spec.fraction}")
    labels = np.asarray(labels)
    if p == 1:
        return SplitAssignment(list(split.train), list(split.val), list(split.test), split.seed)
    train = np.asarray(split.train, dtype=np.int64)
    tl = labels[train]
    k = int(labels.max()) + 1
    per_class = [[int(i) for i in train[tl == c]] for c in range(k)]
    n_train = len(train)
    target = (p * n_train).numerator // (p * n_train).denominator
    keep = _largest_remainder([Fraction(len(v)) * p for v in per_class], target)
    rng = Xoshiro256StarStar(spec.seed)
    kept = []
    for c in range(k):
        idx = rng.shuffle(list(per_class[c]))
        kept += idx[:keep[c]]
    return SplitAssignment(kept, list(split.val), list(split.test), split.seed)


# -- augmentation ----------------------------------------------------------------

def hflip(img: np.ndarray) -> np.ndarray:
    return img[..., ::-1].copy()


def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    out = np.empty_like(img)
    for ch in range(img.shape[0]):
        pil = Image.fromarray(img[ch].astype(np.float32))
        out[ch] = np.asarray(pil.rotate(degrees, resample=Image.BILINEAR, fillcolor=0.0))
    return out


def adjust_brightness(img: np.ndarray, factor: float) -> np.ndarray:
    return np.clip(img * factor, 0.0, 1.0)


def sharpen(img: np.ndarray, strength: float) -> np.ndarray:
    """3x3 unsharp mask: img + strength * (img - box_blur(img)), clamped to [0, 1]."""
    pad = np.pad(img, ((0, 0), (1, 1), (1, 1)), mode="edge")
    h, w = img.shape[1:]
    blur = sum(pad[:, i:i + h, j:j + w] for i in range(3) for j in range(3)) / 9.0
    return np.clip(img + strength * (img - blur), 0.0, 1.0)


def augment_one(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    out = img
    if rng.random() < 0.5:
        out = hflip(out)
    out = rotate(out, rng.uniform(-20.0, 20.0))
    out = adjust_brightness(out, rng.uniform(0.8, 1.2))
    out = sharpen(out, rng.uniform(0.0, 0.5))
    return out.astype(np.float32)


def augment_balance(ds: Dataset, target_per_class: int, seed: int = 0) -> Dataset:
    """Subsample large classes and top up small ones with augmented copies.

    ``source_index`` of the result maps every sample back to its row in ``ds``.
    """
    if target_per_class < 1:
        raise ValueError(f"target_per_class must be >= 1, got {target_per_class}")
    rng = np.random.default_rng(seed)
    images, labels, sources = [], [], []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        if idx.size == 0:
            raise ValueError(f"class {ds.class_names[c]!r} has no samples to balance from")
        if idx.size >= target_per_class:
            chosen = np.sort(rng.choice(idx, size=target_per_class, replace=False))
            images.append(ds.images[chosen])
            sources.append(chosen)
        else:
            extra_src = rng.choice(idx, size=target_per_class - idx.size, replace=True)
            extra = np.stack([augment_one(ds.images[i], rng) for i in extra_src])
            images += [ds.images[idx], extra]
            sources += [idx, extra_src]
        labels.append(np.full(target_per_class, c))
    src = np.concatenate(sources)
    if ds.source_index is not None:
        src = ds.source_index[src]
    return Dataset(np.concatenate(images), np.concatenate(labels), list(ds.class_names),
                   provenance=f"balanced({target_per_class}):{ds.provenance}", source_index=src)


# -- synthetic shapes --------------------------------------------------------------

SHAPE_FAMILIES = ("hbars", "vbars", "disk", "ring", "cross", "checker")


def _draw(family: str, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    img = np.zeros((h, w), dtype=np.float32)
    s = min(h, w)
    if family in ("hbars", "vbars"):
        period = int(rng.integers(max(3, s // 5), max(4, s // 3) + 1))
        thick = max(1, period // 2)
        phase = int(rng.integers(0, period))
        coord = yy if family == "hbars" else xx
        img[((coord + phase) % period) < thick] = 1.0
    elif family in ("disk", "ring"):
        r = rng.uniform(0.22, 0.32) * s
        jitter = s / 8
        cy = h / 2 - 0.5 + rng.uniform(-jitter, jitter)
        cx = w / 2 - 0.5 + rng.uniform(-jitter, jitter)
        d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        img[d <= r] = 1.0
        if family == "ring":
            img[d < r - max(1.0, 0.12 * s)] = 0.0
    elif family == "cross":
        t = max(1, s // 8)
        cy = int(h / 2 + rng.integers(-s // 8, s // 8 + 1))
        cx = int(w / 2 + rng.integers(-s // 8, s // 8 + 1))
        img[max(0, cy - t):cy + t, :] = 1.0
        img[:, max(0, cx - t):cx + t] = 1.0
    else:
        cell = int(rng.integers(max(2, s // 8), max(3, s // 4) + 1))
        py, px = rng.integers(0, cell, size=2)
        img[(((yy + py) // cell + (xx + px) // cell) % 2) == 0] = 1.0
    return img


def synth_generate(classes: int, per_class: int, hw: tuple[int, int] = (16, 16), seed: int = 0,
                   noise: float = 0.05, families: tuple[str, ...] | None = None) -> Dataset:
    """Parametric shape images, one family per class, plus Gaussian pixel noise.

    ``families`` picks the shapes (default: the first ``classes`` entries of
    SHAPE_FAMILIES). Shapes and noise come from separate streams, so
    ``noise=0`` with the same seed yields the clean versions of the same images.
    """
    if families is None:
        if not 2 <= classes <= len(SHAPE_FAMILIES):
            raise ValueError(f"classes must be in 2..{len(SHAPE_FAMILIES)}, got {classes}")
        families = SHAPE_FAMILIES[:classes]
    families = tuple(families)
    unknown = [f for f in families if f not in SHAPE_FAMILIES]
    if unknown or len(families) != classes or len(set(families)) != classes:
        raise ValueError(f"need {classes} distinct families from {SHAPE_FAMILIES}, got {families}")
    h, w = hw
    shape_rng = np.random.default_rng(derive_seed(seed, "synth-shapes"))
    noise_rng = np.random.default_rng(derive_seed(seed, "synth-noise"))
    imgs = np.empty((classes * per_class, 3, h, w), dtype=np.float32)
    labels = np.repeat(np.arange(classes), per_class)
    for i, c in enumerate(labels):
        base = _draw(families[c], h, w, shape_rng)
        eps = noise_rng.normal(0.0, 1.0, size=(h, w)).astype(np.float32)
        imgs[i] = np.clip(base + noise * eps, 0.0, 1.0)[None]
    return Dataset(imgs, labels, list(families),
                   provenance=f"synth(families={','.join(families)},per_class={per_class},"
                              f"hw={h}x{w},seed={seed})")
