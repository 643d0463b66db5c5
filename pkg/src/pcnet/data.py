"""Dataset ingestion and binary persistence.

Two external formats:

  - IDX (big-endian): magic 0x00000803 for 3-D u8 image stacks, 0x00000801
    for 1-D u8 label vectors; u8 payloads are scaled to [0, 1] f32.
  - PCNW weights: magic ``PCNW``, little-endian u32 version (=1) and tensor
    count, then per tensor a u16 name length + UTF-8 name, u8 dtype code
    (0 = f32), u8 ndim, u32 dims, and the row-major little-endian f32
    payload.  Round-trips are bitwise lossless.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .rng import Stream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

PCNW_MAGIC = b"PCNW"
PCNW_VERSION = 1


class IdxFormatError(ValueError):
    """Malformed IDX stream; carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class WeightsFormatError(ValueError):
    """Malformed or inconsistent PCNW stream."""


@dataclass
class Dataset:
    images: np.ndarray      # (N, C, H, W) f32 in [0, 1]
    labels: np.ndarray      # (N,) int64
    class_count: int

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise ValueError(
                f"{len(self.labels)} labels for {len(self.images)} images"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.class_count)


# --------------------------------------------------------------------------
# IDX
# --------------------------------------------------------------------------

def read_idx(data: bytes) -> np.ndarray:
    """Decode an IDX byte stream to a [0, 1]-scaled f32 tensor.

    Image stacks (magic 0x803, dims N x H x W) come back as (N, 1, H, W);
    label vectors (magic 0x801) as (N,).
    """
    if len(data) < 4:
        raise IdxFormatError("truncated magic", len(data))
    (magic,) = struct.unpack(">I", data[:4])
    if magic == IDX_IMAGES_MAGIC:
        ndim = 3
    elif magic == IDX_LABELS_MAGIC:
        ndim = 1
    else:
        raise IdxFormatError(f"bad magic 0x{magic:08x}", 0)
    header_end = 4 + 4 * ndim
    if len(data) < header_end:
        raise IdxFormatError("truncated dimension header", len(data))
    dims = struct.unpack(f">{ndim}I", data[4:header_end])
    count = int(np.prod([int(d) for d in dims]))
    if len(data) < header_end + count:
        raise IdxFormatError(
            f"truncated payload: expected {count} bytes", len(data)
        )
    if len(data) > header_end + count:
        raise IdxFormatError("trailing bytes after payload", header_end + count)
    payload = np.frombuffer(data, dtype=np.uint8, offset=header_end)
    scaled = (payload.astype(np.float32) / np.float32(255.0)).reshape(dims)
    if ndim == 3:
        return scaled.reshape(dims[0], 1, dims[1], dims[2])
    return scaled


def write_idx_images(images: np.ndarray) -> bytes:
    """Encode (N, 1, H, W) f32 [0, 1] images as an IDX u8 stream."""
    n, c, h, w = images.shape
    if c != 1:
        raise ValueError("IDX image streams are single-channel")
    payload = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    return struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + payload.tobytes()


def write_idx_labels(labels: np.ndarray) -> bytes:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() > 255:
        raise ValueError("IDX labels must fit in u8")
    return struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.astype(np.uint8).tobytes()


def load_idx_dataset(image_bytes: bytes, label_bytes: bytes, class_count: int | None = None) -> Dataset:
    """Pair an IDX image stream with an IDX label stream."""
    images = read_idx(image_bytes)
    raw = read_idx(label_bytes)
    labels = np.rint(raw * 255.0).astype(np.int64)
    if class_count is None:
        class_count = int(labels.max()) + 1 if len(labels) else 1
    return Dataset(images, labels, class_count)


# --------------------------------------------------------------------------
# Synthetic shape dataset
# --------------------------------------------------------------------------

CLASS_NAMES = ("disk", "square", "triangle", "cross", "stripes")
_BACKGROUND_SIGMA = 0.05


def _draw_shape(cls: int, size: int, stream: Stream) -> np.ndarray:
    cx = size / 2 - 0.5 + (stream.uniform(1)[0] * 4.0 - 2.0)
    cy = size / 2 - 0.5 + (stream.uniform(1)[0] * 4.0 - 2.0)
    scale = 0.75 + stream.uniform(1)[0] * 0.4
    intensity = 0.75 + stream.uniform(1)[0] * 0.25
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if cls == 0:      # disk
        r = 4.2 * scale
        mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    elif cls == 1:    # square
        h = 3.6 * scale
        mask = (np.abs(xx - cx) <= h) & (np.abs(yy - cy) <= h)
    elif cls == 2:    # triangle (apex up)
        h = 4.5 * scale
        rel = (yy - (cy - h)) / (2.0 * h)
        mask = (yy >= cy - h) & (yy <= cy + h) & (np.abs(xx - cx) <= rel * h)
    elif cls == 3:    # cross
        arm, thick = 4.8 * scale, 1.3 * scale
        mask = ((np.abs(xx - cx) <= thick) & (np.abs(yy - cy) <= arm)) | (
            (np.abs(yy - cy) <= thick) & (np.abs(xx - cx) <= arm)
        )
    elif cls == 4:    # horizontal stripes
        phase = float(stream.integers(0, 4, 1)[0])
        mask = ((yy + phase) // 2.0) % 2 == 0
    else:
        raise ValueError(f"unknown class {cls}")
    img = mask.astype(np.float64) * intensity
    img += stream.normal((size, size)) * _BACKGROUND_SIGMA
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_dataset(seed: int, n: int, image_size: int = 16) -> Dataset:
    """Balanced 5-class grayscale shapes with jitter and background noise.

    Image ``i`` is class ``i mod 5`` and is drawn entirely from the
    per-image stream (seed, i), so any slice of the dataset is reproducible
    independent of generation order.
    """
    if n < 1:
        raise ValueError(f"dataset size must be >= 1, got {n}")
    images = np.empty((n, 1, image_size, image_size), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        cls = i % len(CLASS_NAMES)
        images[i, 0] = _draw_shape(cls, image_size, Stream(seed, i))
        labels[i] = cls
    return Dataset(images, labels, len(CLASS_NAMES))


# --------------------------------------------------------------------------
# PCNW weights
# --------------------------------------------------------------------------

def save_weights(weights: dict) -> bytes:
    """Serialize a name -> f32 tensor map; iteration order is preserved."""
    blobs = [PCNW_MAGIC, struct.pack("<II", PCNW_VERSION, len(weights))]
    for name, arr in weights.items():
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        if arr.ndim < 1 or min(arr.shape) < 1:
            raise WeightsFormatError(f"tensor '{name}' must have all dims >= 1")
        encoded = name.encode("utf-8")
        blobs.append(struct.pack("<H", len(encoded)))
        blobs.append(encoded)
        blobs.append(struct.pack("<BB", 0, arr.ndim))
        blobs.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        blobs.append(arr.astype("<f4").tobytes())
    return b"".join(blobs)


def load_weights(data: bytes) -> dict:
    """Parse a PCNW stream back to a name -> f32 tensor map."""
    if data[:4] != PCNW_MAGIC:
        raise WeightsFormatError(f"bad magic {data[:4]!r}")
    if len(data) < 12:
        raise WeightsFormatError("truncated header")
    version, count = struct.unpack("<II", data[4:12])
    if version != PCNW_VERSION:
        raise WeightsFormatError(f"unsupported version {version}")
    pos = 12
    out: dict = {}
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + name_len].decode("utf-8")
            pos += name_len
            dtype_code, ndim = struct.unpack_from("<BB", data, pos)
            pos += 2
            dims = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
        except struct.error:
            raise WeightsFormatError("truncated tensor header") from None
        if dtype_code != 0:
            raise WeightsFormatError(f"tensor '{name}': unknown dtype code {dtype_code}")
        if ndim < 1 or min(dims) < 1:
            raise WeightsFormatError(f"tensor '{name}': invalid dims {dims}")
        if name in out:
            raise WeightsFormatError(f"duplicate tensor name '{name}'")
        nbytes = 4 * int(np.prod(dims))
        if pos + nbytes > len(data):
            raise WeightsFormatError(f"tensor '{name}': payload truncated")
        out[name] = np.frombuffer(data, dtype="<f4", count=int(np.prod(dims)), offset=pos).reshape(dims).copy()
        pos += nbytes
    if pos != len(data):
        raise WeightsFormatError(f"trailing bytes after tensor {count - 1}")
    return out


def write_file_atomic(path, data: bytes) -> None:
    """Whole-file atomic write: temp file in the same directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".pcnet-tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_weights_file(path, weights: dict) -> None:
    write_file_atomic(path, save_weights(weights))


def load_weights_file(path) -> dict:
    with open(path, "rb") as f:
        return load_weights(f.read())
