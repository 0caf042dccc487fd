"""Input image loading: IDX files (the classic big-endian digit-dataset
container) and a plain CSV fallback, with transparent gzip support."""

import gzip
import struct

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _read_bytes(path):
    if str(path).endswith(".gz"):
        with gzip.open(path, "rb") as f:
            return f.read()
    with open(path, "rb") as f:
        return f.read()


def load_images(path) -> np.ndarray:
    """Images as uint8 (N, H, W); IDX by magic, otherwise CSV rows of 784."""
    buf = _read_bytes(path)
    if len(buf) >= 4 and struct.unpack(">I", buf[:4])[0] == IDX_IMAGES_MAGIC:
        n, h, w = struct.unpack(">III", buf[4:16])
        data = np.frombuffer(buf, dtype=np.uint8, count=n * h * w, offset=16)
        return data.reshape(n, h, w)
    # CSV fallback: one image per row, 784 values in [0, 255].
    rows = np.loadtxt(buf.decode("ascii").splitlines(), delimiter=",", ndmin=2)
    if rows.shape[1] != 784:
        raise ValueError(f"CSV rows must have 784 values, got {rows.shape[1]}")
    if rows.min() < 0 or rows.max() > 255:
        raise ValueError("CSV pixel values must lie in [0, 255]")
    return rows.reshape(-1, 28, 28).astype(np.uint8)


def load_labels(path) -> np.ndarray:
    """Labels as int64 (N,); IDX by magic, otherwise one label per line."""
    buf = _read_bytes(path)
    if len(buf) >= 4 and struct.unpack(">I", buf[:4])[0] == IDX_LABELS_MAGIC:
        n = struct.unpack(">I", buf[4:8])[0]
        return np.frombuffer(buf, dtype=np.uint8, count=n, offset=8).astype(np.int64)
    return np.loadtxt(buf.decode("ascii").splitlines(), dtype=np.int64, ndmin=1)


def save_idx_images(path, images: np.ndarray):
    images = np.asarray(images, dtype=np.uint8)
    n, h, w = images.shape
    header = struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w)
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(header)
        f.write(images.tobytes())


def save_idx_labels(path, labels: np.ndarray):
    labels = np.asarray(labels, dtype=np.uint8)
    header = struct.pack(">II", IDX_LABELS_MAGIC, len(labels))
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(header)
        f.write(labels.tobytes())
