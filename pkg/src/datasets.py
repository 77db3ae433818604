"""
Readers and writers for every on-disk input the harness consumes or produces:
MNIST IDX files, landmark manifests, pair lists, fold files and DVEM embedding stores.
"""

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

from checkpoint import atomic_write_bytes, atomic_write_text
from errors import DataError
from preprocess import pixel_normalize

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}

STORE_MAGIC = b"DVEM"
STORE_VERSION = 1


# ---------------------------------------------------------------------------
# MNIST
# ---------------------------------------------------------------------------

def _open_maybe_gzip(path):
    if os.path.exists(path):
        return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")
    if os.path.exists(path + ".gz"):
        return gzip.open(path + ".gz", "rb")
    raise DataError(f"missing IDX file: {path}[.gz]")


def read_idx(path, expected_magic):
    """Parse an IDX file (big-endian header, unsigned-byte payload)."""
    with _open_maybe_gzip(path) as f:
        payload = f.read()
    if len(payload) < 8:
        raise DataError(f"{path}: too short for an IDX header")
    (magic,) = struct.unpack(">I", payload[:4])
    if magic != expected_magic:
        raise DataError(f"{path}: IDX magic {magic}, expected {expected_magic}")
    ndim = magic & 0xFF
    dims = struct.unpack(f">{ndim}I", payload[4:4 + 4 * ndim])
    data = np.frombuffer(payload, dtype=np.uint8, offset=4 + 4 * ndim)
    if data.size != int(np.prod(dims)):
        raise DataError(f"{path}: header promises {int(np.prod(dims))} values, found {data.size}")
    return data.reshape(dims)


def load_mnist(directory, split="train"):
    """Return (images uint8 [N,28,28], labels int64 [N])."""
    images = read_idx(os.path.join(directory, MNIST_FILES[f"{split}_images"]), IDX_IMAGES_MAGIC)
    labels = read_idx(os.path.join(directory, MNIST_FILES[f"{split}_labels"]), IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise DataError(f"MNIST {split}: {len(images)} images but {len(labels)} labels")
    return images, labels.astype(np.int64)


def load_mnist_normalized(directory, split="train", limit=None):
    """MNIST as pixel-normalized float32 [N, 1, 28, 28] plus labels."""
    images, labels = load_mnist(directory, split)
    if limit:
        images, labels = images[:limit], labels[:limit]
    return pixel_normalize(images).data[:, None], labels


def write_idx(path, array):
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x0800 | array.ndim
    header = struct.pack(f">I{array.ndim}I", magic, *array.shape)
    atomic_write_bytes(path, header + array.tobytes())


# ---------------------------------------------------------------------------
# Landmark manifest
# ---------------------------------------------------------------------------

@dataclass
class ManifestRecord:
    image_path: str
    landmarks: np.ndarray     # [5, 2]
    bbox: tuple               # (x, y, w, h)
    detected: bool
    line: int


def read_landmark_manifest(path):
    """image_path x1 y1 ... x5 y5 bbox_x bbox_y bbox_w bbox_h detected_flag"""
    records = []
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.readlines()
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e}")
    for number, raw in enumerate(lines, 1):
        parts = raw.split()
        if not parts or parts[0].startswith("#"):
            continue
        if len(parts) != 16:
            raise DataError(f"{path}:{number}: expected 16 fields, got {len(parts)}")
        try:
            values = [float(v) for v in parts[1:15]]
            detected = parts[15] not in ("0", "false", "False")
        except ValueError as e:
            raise DataError(f"{path}:{number}: {e}")
        records.append(ManifestRecord(
            image_path=parts[0],
            landmarks=np.array(values[:10]).reshape(5, 2),
            bbox=tuple(values[10:14]),
            detected=detected,
            line=number,
        ))
    return records


def identity_from_path(image_path):
    """Identity label of an image stored as <identity>/<file>."""
    parent = os.path.basename(os.path.dirname(image_path))
    return parent or os.path.splitext(os.path.basename(image_path))[0]


# ---------------------------------------------------------------------------
# Pair lists and folds
# ---------------------------------------------------------------------------

def read_pair_list(path):
    """path_a,path_b,label with label in {0,1}."""
    pairs = []
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.readlines()
    except OSError as e:
        raise DataError(f"cannot read pair list {path}: {e}")
    for number, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 3 or parts[2] not in ("0", "1"):
            raise DataError(f"{path}:{number}: expected 'path_a,path_b,label' with label 0/1, got '{line}'")
        pairs.append((parts[0], parts[1], int(parts[2])))
    return pairs


def read_fold_file(path):
    """One fold per line, whitespace-separated pair indices."""
    folds = []
    try:
        with open(path, "r", encoding="utf-8") as f:
            for number, raw in enumerate(f, 1):
                if raw.strip():
                    try:
                        folds.append([int(v) for v in raw.split()])
                    except ValueError as e:
                        raise DataError(f"{path}:{number}: {e}")
    except OSError as e:
        raise DataError(f"cannot read fold file {path}: {e}")
    return folds


# ---------------------------------------------------------------------------
# DVEM embedding store
# ---------------------------------------------------------------------------

def store_manifest_path(store_path):
    return os.path.splitext(store_path)[0] + ".txt"


def write_embedding_store(path, embeddings, image_paths, identities):
    embeddings = np.ascontiguousarray(embeddings, dtype="<f4")
    if embeddings.ndim != 2:
        raise DataError(f"embedding store needs a [count, dim] matrix, got shape {embeddings.shape}")
    count, dim = embeddings.shape
    if len(image_paths) != count or len(identities) != count:
        raise DataError(f"store has {count} rows but {len(image_paths)} paths and {len(identities)} labels")
    header = STORE_MAGIC + struct.pack("<IQQ", STORE_VERSION, count, dim)
    atomic_write_bytes(path, header + embeddings.tobytes())
    lines = [f"{i} {p} {label}" for i, (p, label) in enumerate(zip(image_paths, identities))]
    atomic_write_text(store_manifest_path(path), "\n".join(lines) + ("\n" if lines else ""))


def read_embedding_store(path):
    """Return (embeddings float32 [count, dim], image_paths, identities)."""
    try:
        with open(path, "rb") as f:
            payload = f.read()
        with open(store_manifest_path(path), "r", encoding="utf-8") as f:
            manifest = [line.rstrip("\n") for line in f if line.strip()]
    except OSError as e:
        raise DataError(f"cannot read embedding store {path}: {e}")
    if len(payload) < 24 or payload[:4] != STORE_MAGIC:
        raise DataError(f"{path}: not a DVEM store (magic {payload[:4]!r})")
    version, count, dim = struct.unpack_from("<IQQ", payload, 4)
    if version != STORE_VERSION:
        raise DataError(f"{path}: unsupported store version {version}")
    body = payload[24:]
    if len(body) != 4 * count * dim:
        raise DataError(f"{path}: expected {count}x{dim} values, found {len(body) // 4}")
    embeddings = np.frombuffer(body, dtype="<f4").reshape(count, dim).astype(np.float32)
    if len(manifest) != count:
        raise DataError(f"{store_manifest_path(path)}: {len(manifest)} rows for {count} embeddings")
    paths, identities = [], []
    for expected, row in enumerate(manifest):
        # row_index image_path identity_label; the path may contain spaces
        index, _, rest = row.partition(" ")
        image_path, _, label = rest.rpartition(" ")
        if index != str(expected) or not image_path:
            raise DataError(f"{store_manifest_path(path)}: malformed row {expected}: {row}")
        paths.append(image_path)
        identities.append(label)
    return embeddings, paths, identities
