"""
DVCK checkpoint files.

Layout (all little-endian): magic ``DVCK``, uint32 format version, then records up
to the end of the file. A record is a uint32 name length, the UTF-8 name, uint32
rank, rank x uint64 extents and float32 values in row-major order. The
architecture text sits next to the checkpoint in ``<stem>.arch``.
"""

import os
import struct
import tempfile

import numpy as np

from architectures import parse_spec, serialize_spec
from errors import DataError
from network import Network

MAGIC = b"DVCK"
VERSION = 1


def atomic_write_bytes(path, payload):
    """Write to a temp file in the target directory, then rename over the target."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def encode_checkpoint(state):
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    for name, value in state.items():
        array = np.ascontiguousarray(value, dtype="<f4")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        chunks.append(array.tobytes())
    return b"".join(chunks)


def decode_checkpoint(payload, source="<bytes>"):
    if payload[:4] != MAGIC:
        raise DataError(f"{source}: not a DVCK checkpoint (magic {payload[:4]!r})")
    try:
        (version,) = struct.unpack_from("<I", payload, 4)
        if version != VERSION:
            raise DataError(f"{source}: unsupported checkpoint version {version}")
        offset, state = 8, {}
        while offset < len(payload):
            (name_len,) = struct.unpack_from("<I", payload, offset)
            offset += 4
            name = payload[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", payload, offset)
            offset += 4
            shape = struct.unpack_from(f"<{rank}Q", payload, offset)
            offset += 8 * rank
            size = int(np.prod(shape, dtype=np.int64))
            values = np.frombuffer(payload, dtype="<f4", count=size, offset=offset)
            offset += 4 * size
            state[name] = values.reshape(shape).astype(np.float32)
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise DataError(f"{source}: truncated or corrupt checkpoint ({e})")
    return state


def save_checkpoint(path, state):
    atomic_write_bytes(path, encode_checkpoint(state))


def load_checkpoint(path):
    try:
        with open(path, "rb") as f:
            payload = f.read()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}")
    return decode_checkpoint(payload, source=path)


def arch_path(checkpoint_path):
    return os.path.splitext(checkpoint_path)[0] + ".arch"


def save_model(path, network, include_head=False):
    save_checkpoint(path, network.state_dict(include_head=include_head))
    atomic_write_text(arch_path(path), serialize_spec(network.spec))


def save_head(path, network):
    """Classifier head and center-loss state, i.e. everything the feature checkpoint leaves out."""
    features = network.state_dict(include_head=False)
    full = network.state_dict(include_head=True)
    save_checkpoint(path, {name: value for name, value in full.items() if name not in features})


def load_model(path, head_path=None, **network_kwargs):
    """Rebuild a Network from a checkpoint and its ``.arch`` sidecar."""
    try:
        with open(arch_path(path), "r", encoding="utf-8") as f:
            spec = parse_spec(f.read())
    except OSError as e:
        raise DataError(f"cannot read architecture file for {path}: {e}")
    network = Network(spec, **network_kwargs)
    state = load_checkpoint(path)
    if head_path is not None:
        state.update(load_checkpoint(head_path))
    network.load_state_dict(state)
    network.eval()
    return network
