"""IDX (MNIST / Fashion-MNIST) and CSV loaders."""

import csv
import struct

import numpy as np

from .dataset import Dataset

LABEL_MAGIC = 0x00000801
IMAGE_MAGIC = 0x00000803


class IdxFormatError(ValueError):
    pass


def parse_idx(data):
    """Parse IDX bytes. Images come back as float64 in [0, 1], labels as int64."""
    if len(data) < 4:
        raise IdxFormatError("truncated header")
    (magic,) = struct.unpack(">I", data[:4])
    if magic not in (LABEL_MAGIC, IMAGE_MAGIC):
        raise IdxFormatError(f"bad magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxFormatError("truncated dimension header")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    count = int(np.prod(dims))
    payload = data[header:]
    if len(payload) < count:
        raise IdxFormatError(f"truncated payload: expected {count} bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8, count=count).reshape(dims)
    if magic == LABEL_MAGIC:
        return arr.astype(np.int64)
    return arr.astype(np.float64) / 255.0


def load_idx(path):
    with open(path, "rb") as f:
        return parse_idx(f.read())


def write_idx(path, arr, labels=False):
    arr = np.asarray(arr, dtype=np.uint8)
    magic = LABEL_MAGIC if labels else IMAGE_MAGIC
    if (magic & 0xFF) != arr.ndim:
        raise ValueError(f"IDX {'labels' if labels else 'images'} need ndim {magic & 0xFF}")
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


def load_idx_dataset(images_path, labels_path, n_classes=10, flatten=True):
    X = load_idx(images_path)
    y = load_idx(labels_path)
    # explicit width so a zero-item file still reshapes
    X = X.reshape(len(X), int(np.prod(X.shape[1:]))) if flatten else X[..., None]
    return Dataset(X, y, n_classes=n_classes)


def load_csv(path, label_column="label", n_classes=None):
    """Header row required; every non-label column is a float feature.

    ``n_classes`` of 0 means regression; ``None`` infers classes from the labels.
    """
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if label_column not in header:
            raise ValueError(f"{path}: missing label column {label_column!r}")
        li = header.index(label_column)
        rows = [row for row in reader if row]
    feats = np.array([[float(v) for j, v in enumerate(r) if j != li] for r in rows], dtype=np.float64)
    feats = feats.reshape(len(rows), len(header) - 1)
    raw = [r[li] for r in rows]
    if n_classes == 0:
        return Dataset(feats, np.array(raw, dtype=np.float64), n_classes=0)
    y = np.array([int(float(v)) for v in raw], dtype=np.int64)
    k = n_classes if n_classes is not None else int(y.max(initial=0)) + 1
    return Dataset(feats, y, n_classes=k)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)
