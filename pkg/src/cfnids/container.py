"""Self-describing model container: a plain-text header (format version,
kind, JSON metadata, array directory) followed by raw little-endian
float32 arrays in declaration order.
"""

from __future__ import annotations

import json
import hashlib

import numpy as np

MAGIC = "#cfnids-container v1"


class ContainerError(ValueError):
    """Malformed or mismatching container file."""


def save(path, kind: str, meta: dict, arrays: list[tuple[str, np.ndarray]]) -> None:
    header = [MAGIC, f"kind: {kind}", "meta: " + json.dumps(meta, sort_keys=True)]
    blobs = []
    for name, arr in arrays:
        arr = np.ascontiguousarray(np.asarray(arr, dtype=np.float32))
        header.append(f"array: {name} " + " ".join(str(d) for d in arr.shape))
        blobs.append(arr.astype("<f4").tobytes())
    header.append("data:")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("utf-8"))
        for blob in blobs:
            fh.write(blob)


def load(path):
    """Returns (kind, meta, {name: float32 array})."""
    with open(path, "rb") as fh:
        raw = fh.read()
    end = raw.find(b"data:\n")
    if not raw.startswith(MAGIC.encode()) or end < 0:
        raise ContainerError(f"{path}: not a cfnids container")
    lines = raw[:end].decode("utf-8").splitlines()
    kind, meta, directory = None, None, []
    for line in lines[1:]:
        if line.startswith("kind: "):
            kind = line[len("kind: "):]
        elif line.startswith("meta: "):
            meta = json.loads(line[len("meta: "):])
        elif line.startswith("array: "):
            name, *dims = line[len("array: "):].split()
            directory.append((name, tuple(int(d) for d in dims)))
    if kind is None or meta is None:
        raise ContainerError(f"{path}: header missing kind or meta")
    arrays = {}
    offset = end + len(b"data:\n")
    for name, shape in directory:
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 4
        chunk = raw[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise ContainerError(f"{path}: truncated array {name}")
        arrays[name] = np.frombuffer(chunk, dtype="<f4").reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise ContainerError(f"{path}: {len(raw) - offset} trailing bytes")
    return kind, meta, arrays


def schema_hash(schema_meta) -> str:
    return hashlib.sha256(
        json.dumps(schema_meta, sort_keys=True).encode("utf-8")
    ).hexdigest()[:16]


def save_net(path, net, kind: str, extra_meta: dict | None = None) -> None:
    from . import nn

    meta = {
        "sizes": [net.input_dim] + [l.w.shape[1] for l in net.layers],
        "activations": [l.activation for l in net.layers],
    }
    meta.update(extra_meta or {})
    arrays = []
    for i, layer in enumerate(net.layers):
        arrays.append((f"w{i}", layer.w))
        arrays.append((f"b{i}", layer.b))
    save(path, kind, meta, arrays)


def net_from_arrays(meta: dict, arrays: dict):
    from . import nn

    layers = []
    for i, act in enumerate(meta["activations"]):
        layers.append(nn.Layer(arrays[f"w{i}"], arrays[f"b{i}"], act))
    return nn.DenseNet(layers)
