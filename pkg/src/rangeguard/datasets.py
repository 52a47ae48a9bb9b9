"""Dataset containers and generators.

Two on-disk formats: the classic big-endian IDX files (magic 0x00000803 for
image stacks, 0x00000801 for label vectors) and a little-endian raw tensor
container (magic RGTN) for arbitrary arrays such as synthetic steering
frames and their targets.
"""

from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np


class DatasetError(ValueError):
    pass


_IDX_IMAGES = 0x00000803
_IDX_LABELS = 0x00000801

_RGTN_MAGIC = b"RGTN"
_RGTN_DTYPES = {0: "<f4", 1: "<i4", 2: "<i2", 3: "u1", 4: "<i8"}
_RGTN_TAGS = {np.dtype(v): k for k, v in _RGTN_DTYPES.items()}


# -- IDX -------------------------------------------------------------


def write_idx_images(path, images: np.ndarray) -> None:
    arr = np.ascontiguousarray(images, dtype=np.uint8)
    if arr.ndim != 3:
        raise DatasetError("image stack must be [N, rows, cols]")
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", _IDX_IMAGES, *arr.shape))
        f.write(arr.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    arr = np.ascontiguousarray(labels, dtype=np.uint8)
    if arr.ndim != 1:
        raise DatasetError("label vector must be 1-D")
    with open(path, "wb") as f:
        f.write(struct.pack(">II", _IDX_LABELS, arr.shape[0]))
        f.write(arr.tobytes())


def read_idx(path) -> np.ndarray:
    data = Path(path).read_bytes()
    (magic,) = struct.unpack_from(">I", data, 0)
    if magic == _IDX_IMAGES:
        n, rows, cols = struct.unpack_from(">III", data, 4)
        arr = np.frombuffer(data, dtype=np.uint8, count=n * rows * cols, offset=16)
        return arr.reshape(n, rows, cols).copy()
    if magic == _IDX_LABELS:
        (n,) = struct.unpack_from(">I", data, 4)
        return np.frombuffer(data, dtype=np.uint8, count=n, offset=8).copy()
    raise DatasetError(f"{path}: bad IDX magic 0x{magic:08x}")


# -- RGTN ------------------------------------------------------------


def write_rgtn(path, arr: np.ndarray) -> None:
    a = np.ascontiguousarray(arr)
    tag = _RGTN_TAGS.get(a.dtype.newbyteorder("<") if a.dtype.byteorder == ">" else a.dtype)
    if tag is None:
        a = a.astype(np.float32)
        tag = 0
    a = a.astype(_RGTN_DTYPES[tag])
    with open(path, "wb") as f:
        f.write(_RGTN_MAGIC)
        f.write(struct.pack("<BB", tag, a.ndim))
        f.write(struct.pack(f"<{a.ndim}I", *a.shape))
        f.write(a.tobytes())


def read_rgtn(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != _RGTN_MAGIC:
        raise DatasetError(f"{path}: bad tensor magic {data[:4]!r}")
    tag, rank = struct.unpack_from("<BB", data, 4)
    if tag not in _RGTN_DTYPES:
        raise DatasetError(f"{path}: unknown dtype tag {tag}")
    dims = struct.unpack_from(f"<{rank}I", data, 6)
    count = int(np.prod(dims)) if rank else 1
    arr = np.frombuffer(data, dtype=_RGTN_DTYPES[tag], count=count, offset=6 + 4 * rank)
    return arr.reshape(dims).copy()


# -- digit images (MNIST-format stand-in) ----------------------------


def fetch_digits(out_dir, seed: int = 0, val_count: int = 1000) -> dict[str, Path]:
    """Materialize the bundled 8x8 digit scans into IDX train/val files.

    Keeps the whole downstream pipeline on the IDX loader path while staying
    network-free; pixel values are the original 0..16 intensity levels.
    """
    from sklearn.datasets import load_digits  # lazy: only this entry point needs it

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digits = load_digits()
    images = digits.images.astype(np.uint8)  # [N, 8, 8], values 0..16
    labels = digits.target.astype(np.uint8)
    order = np.random.default_rng(seed).permutation(len(images))
    images, labels = images[order], labels[order]
    if val_count >= len(images):
        raise DatasetError("val_count leaves no training data")
    paths = {
        "train_images": out / "train-images.idx3-ubyte",
        "train_labels": out / "train-labels.idx1-ubyte",
        "val_images": out / "val-images.idx3-ubyte",
        "val_labels": out / "val-labels.idx1-ubyte",
    }
    write_idx_images(paths["train_images"], images[val_count:])
    write_idx_labels(paths["train_labels"], labels[val_count:])
    write_idx_images(paths["val_images"], images[:val_count])
    write_idx_labels(paths["val_labels"], labels[:val_count])
    return paths


def load_digit_split(data_dir, split: str) -> tuple[np.ndarray, np.ndarray]:
    """Load an IDX split as ([N,8,8,1] float32 in [0,1], int labels)."""
    d = Path(data_dir)
    images = read_idx(d / f"{split}-images.idx3-ubyte").astype(np.float32) / 16.0
    labels = read_idx(d / f"{split}-labels.idx1-ubyte").astype(np.int64)
    return images[..., None], labels


# -- synthetic steering frames ---------------------------------------

STEER_IMAGE_SIZE = 16
STEER_MAX_ANGLE = 60.0


def _line_image(theta_deg: float, rng: np.random.Generator) -> np.ndarray:
    """A noisy road-line frame: bright ridge from bottom centre at theta."""
    s = STEER_IMAGE_SIZE
    ys, xs = np.mgrid[0:s, 0:s].astype(np.float64)
    # origin at bottom centre, y growing upward
    px = xs - (s - 1) / 2.0
    py = (s - 1) - ys
    theta = math.radians(theta_deg)
    # signed distance to the ray direction (sin t, cos t)
    d = px * math.cos(theta) - py * math.sin(theta)
    img = 0.15 + 0.85 * np.exp(-(d**2) / (2 * 1.2**2))
    img += rng.uniform(0.0, 0.04, size=img.shape)
    return img.astype(np.float32)


def make_steering(
    count: int, seed: int = 0, unit: str = "degrees"
) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic steering dataset: frames plus target angles.

    unit 'degrees' targets the angle directly; 'tan' targets tan(angle) so a
    trailing Atan stage recovers the angle in radians.
    """
    images = np.empty((count, STEER_IMAGE_SIZE, STEER_IMAGE_SIZE, 1), dtype=np.float32)
    angles = np.empty(count, dtype=np.float64)
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        theta = float(rng.uniform(-STEER_MAX_ANGLE, STEER_MAX_ANGLE))
        images[i, :, :, 0] = _line_image(theta, rng)
        angles[i] = theta
    if unit == "degrees":
        targets = angles
    elif unit == "tan":
        targets = np.tan(np.radians(angles))
    elif unit == "radians":
        targets = np.radians(angles)
    else:
        raise DatasetError(f"unknown steering unit {unit!r}")
    return images, targets.astype(np.float32)


def save_steering(out_dir, train_count: int, val_count: int, seed: int = 0) -> dict[str, Path]:
    """Write RGTN train/val splits; angles stored in degrees."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images, angles = make_steering(train_count + val_count, seed)
    paths = {
        "train_images": out / "steer-train-images.rgtn",
        "train_angles": out / "steer-train-angles.rgtn",
        "val_images": out / "steer-val-images.rgtn",
        "val_angles": out / "steer-val-angles.rgtn",
    }
    write_rgtn(paths["train_images"], images[val_count:])
    write_rgtn(paths["train_angles"], angles[val_count:])
    write_rgtn(paths["val_images"], images[:val_count])
    write_rgtn(paths["val_angles"], angles[:val_count])
    return paths


def load_steering_split(data_dir, split: str) -> tuple[np.ndarray, np.ndarray]:
    d = Path(data_dir)
    images = read_rgtn(d / f"steer-{split}-images.rgtn")
    angles = read_rgtn(d / f"steer-{split}-angles.rgtn")
    return images, angles
