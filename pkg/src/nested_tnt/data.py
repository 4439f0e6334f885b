"""Dataset loading (CIFAR binary, class-per-folder), bicubic resizing and
training augmentations (random resized crop, horizontal flip, mixup).

Images are float arrays in [0, 1] shaped [3, H, W]; a dataset stores them
stacked as one [N, 3, H, W] array.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

CIFAR_SIDE = 32
CIFAR_PIXELS = 3 * CIFAR_SIDE * CIFAR_SIDE
CIFAR_LAYOUT = {
    # flavor: (label bytes, classes, train files, test files)
    "cifar10": (1, 10, [f"data_batch_{i}.bin" for i in range(1, 6)], ["test_batch.bin"]),
    "cifar100": (2, 100, ["train.bin"], ["test.bin"]),
}
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".gif", ".tif", ".tiff", ".webp"}


class DataError(ValueError):
    """Missing, malformed or undecodable dataset input."""


@dataclass
class DatasetHandle:
    images: np.ndarray  # [N, 3, H, W], float32 in [0, 1]
    labels: np.ndarray  # [N] int64
    num_classes: int
    split: str = "train"
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class AugmentConfig:
    crop_scale_range: tuple[float, float] = (0.8, 1.0)
    flip_probability: float = 0.5
    mixup_alpha: float = 0.8
    target_size: int = 224
    mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: tuple[float, float, float] = (0.5, 0.5, 0.5)
    mixup: bool = True

    def __post_init__(self):
        lo, hi = self.crop_scale_range
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"crop scale range {self.crop_scale_range} not within (0, 1]")
        if not 0 <= self.flip_probability <= 1:
            raise ValueError("flip probability must lie in [0, 1]")
        if self.mixup_alpha <= 0:
            raise ValueError("mixup alpha must be positive")


# ---------------------------------------------------------------------------
# loaders


def decode_cifar_records(buf: bytes, label_bytes: int, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Decode concatenated CIFAR records; the last label byte is the one used."""
    rec = label_bytes + CIFAR_PIXELS
    if len(buf) % rec:
        raise DataError(f"file length {len(buf)} is not a multiple of the {rec}-byte record")
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, rec)
    labels = raw[:, label_bytes - 1].astype(np.int64)
    if labels.size and labels.max() >= num_classes:
        raise DataError(f"label byte {labels.max()} out of range for {num_classes} classes")
    images = raw[:, label_bytes:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).astype(np.float32) / 255.0
    return images, labels


def load_cifar(path, flavor: str = "cifar10", split: str = "train") -> DatasetHandle:
    if flavor not in CIFAR_LAYOUT:
        raise DataError(f"unknown CIFAR flavor {flavor!r}")
    if split not in ("train", "test"):
        raise DataError(f"split must be train or test, got {split!r}")
    label_bytes, classes, train_files, test_files = CIFAR_LAYOUT[flavor]
    root = Path(path)
    images, labels = [], []
    for fname in train_files if split == "train" else test_files:
        f = root / fname
        if not f.is_file():
            raise DataError(f"missing CIFAR file {f}")
        x, y = decode_cifar_records(f.read_bytes(), label_bytes, classes)
        images.append(x)
        labels.append(y)
    return DatasetHandle(np.concatenate(images), np.concatenate(labels), classes, split)


def load_folder_dataset(path, split: str = "train") -> DatasetHandle:
    """One sub-directory per class (sorted name -> index), 8-bit RGB image files.

    All images must share one size; resize offline or afterwards with
    :func:`resize_dataset`.
    """
    from PIL import Image, UnidentifiedImageError

    root = Path(path)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    classes = sorted(d.name for d in root.iterdir() if d.is_dir())
    if not classes:
        raise DataError(f"no class directories under {root}")
    images, labels = [], []
    for idx, name in enumerate(classes):
        files = sorted(f for f in (root / name).iterdir()
                       if f.is_file() and f.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DataError(f"class directory {root / name} holds no images")
        for f in files:
            try:
                with Image.open(f) as im:
                    arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
            except (UnidentifiedImageError, OSError) as e:
                raise DataError(f"cannot decode {f}: {e}") from None
            images.append(arr.transpose(2, 0, 1).astype(np.float32) / 255.0)
            labels.append(idx)
    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        raise DataError(f"images have mixed sizes {sorted(shapes)}")
    return DatasetHandle(np.stack(images), np.asarray(labels, dtype=np.int64),
                         len(classes), split, tuple(classes))


def synthetic_dataset(num_images: int = 64, size: int = 8, seed: int = 0) -> DatasetHandle:
    """Two linearly separable classes: red-dominant (0) vs blue-dominant (1).

    Colour separates the classes, so flips and crops preserve labels.
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(num_images) % 2
    images = rng.uniform(0.2, 0.6, size=(num_images, 3, size, size))
    images[labels == 0, 0] += 0.35
    images[labels == 1, 2] += 0.35
    return DatasetHandle(np.clip(images, 0, 1).astype(np.float32), labels.astype(np.int64), 2)


# ---------------------------------------------------------------------------
# bicubic resize


def cubic_kernel(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    t = np.abs(t)
    return np.where(
        t <= 1,
        (a + 2) * t**3 - (a + 3) * t**2 + 1,
        np.where(t < 2, a * t**3 - 5 * a * t**2 + 8 * a * t - 4 * a, 0.0),
    )


def _resize_matrix(n_in: int, n_out: int, offset: float = 0.0, extent: float | None = None) -> np.ndarray:
    """[n_out, n_in] interpolation weights with edge clamping.

    Output pixel j samples source coordinate ``offset + (j + 0.5) * extent / n_out - 0.5``
    (pixel-centre alignment); ``extent`` defaults to the full input length.
    """
    extent = n_in if extent is None else extent
    src = offset + (np.arange(n_out) + 0.5) * (extent / n_out) - 0.5
    base = np.floor(src).astype(int)
    w = np.zeros((n_out, n_in))
    for k in range(-1, 3):
        idx = base + k
        wk = cubic_kernel(src - idx)
        np.add.at(w, (np.arange(n_out), np.clip(idx, 0, n_in - 1)), wk)
    return w


def resize_bicubic(img: np.ndarray, out_size, box=None) -> np.ndarray:
    """Separable Catmull-Rom (a=-0.5) resize of a [C, H, W] image, clipped to [0, 1].

    ``box = (top, left, height, width)`` resamples only that window of the source.
    """
    c, h, w = img.shape
    if h < 2 or w < 2:
        raise ValueError(f"cannot resize degenerate {h}x{w} image")
    oh, ow = (out_size, out_size) if np.isscalar(out_size) else out_size
    top, left, bh, bw = box if box is not None else (0, 0, h, w)
    rows = _resize_matrix(h, oh, top, bh)
    cols = _resize_matrix(w, ow, left, bw)
    out = np.einsum("ij,cjk,lk->cil", rows, img.astype(np.float64), cols)
    return np.clip(out, 0.0, 1.0).astype(img.dtype)


def resize_dataset(ds: DatasetHandle, size: int) -> DatasetHandle:
    if ds.images.shape[-1] == size and ds.images.shape[-2] == size:
        return ds
    images = np.stack([resize_bicubic(im, size) for im in ds.images])
    return DatasetHandle(images, ds.labels, ds.num_classes, ds.split, ds.class_names)


# ---------------------------------------------------------------------------
# augmentation


def random_resized_crop(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Square crop covering a uniform area fraction in ``crop_scale_range``, resized bicubically."""
    _, h, w = img.shape
    scale = rng.uniform(*cfg.crop_scale_range)
    side = min(h, w) * np.sqrt(scale)
    top = rng.uniform(0, h - side)
    left = rng.uniform(0, w - side)
    return resize_bicubic(img, cfg.target_size, box=(top, left, side, side))


def hflip(img: np.ndarray) -> np.ndarray:
    return img[..., ::-1].copy()


def normalize(images: np.ndarray, cfg: AugmentConfig) -> np.ndarray:
    mean = np.asarray(cfg.mean, dtype=images.dtype).reshape(3, 1, 1)
    std = np.asarray(cfg.std, dtype=images.dtype).reshape(3, 1, 1)
    return (images - mean) / std


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), num_classes), dtype=np.float32)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def mixup(images: np.ndarray, targets: np.ndarray, lam: float, perm: np.ndarray):
    """Convex mix of every sample with ``perm`` of the batch."""
    mixed = lam * images + (1.0 - lam) * images[perm]
    return mixed.astype(images.dtype), (lam * targets + (1.0 - lam) * targets[perm]).astype(np.float32)


def augment(images: np.ndarray, labels: np.ndarray, num_classes: int, cfg: AugmentConfig,
            rng: np.random.Generator, lam: float | None = None):
    """Training pipeline: crop, flip, normalize, then batch mixup.

    ``lam`` pins the mixup weight instead of drawing it from Beta(alpha, alpha).
    Returns (images [B, 3, S, S], target distributions [B, K]).
    """
    if len(images) == 0:
        raise DataError("cannot augment an empty batch")
    out = []
    for img in images:
        x = random_resized_crop(img, cfg, rng)
        if rng.random() < cfg.flip_probability:
            x = hflip(x)
        out.append(x)
    batch = normalize(np.stack(out), cfg)
    targets = one_hot(labels, num_classes)
    if cfg.mixup and len(batch) > 1:
        if lam is None:
            lam = rng.beta(cfg.mixup_alpha, cfg.mixup_alpha)
        batch, targets = mixup(batch, targets, lam, rng.permutation(len(batch)))
    return batch, targets


def eval_transform(images: np.ndarray, cfg: AugmentConfig) -> np.ndarray:
    """Test pipeline: bicubic resize to the target size and normalize."""
    if images.shape[-1] != cfg.target_size or images.shape[-2] != cfg.target_size:
        images = np.stack([resize_bicubic(im, cfg.target_size) for im in images])
    return normalize(images, cfg)


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator | None = None):
    """Index batches over ``range(n)``; shuffled when ``rng`` is given."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]
