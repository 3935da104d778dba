"""Binary model files.

Layout (all integers little-endian)::

    b"CADCNN01"
    uint32 header length, then that many bytes of UTF-8 JSON
    uint32 tensor count
    per tensor: uint32 ndim, ndim x uint32 extents, float64 values (row-major)

Tensors appear in ``NetworkModel.parameters()`` order; their names are listed
in the header.  The header is written with sorted keys so identical models and
metadata give identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptModel
from .network import ConvLayer, DenseLayer, NetworkModel

MAGIC = b"CADCNN01"


def dumps(model: NetworkModel, metadata: dict | None = None) -> bytes:
    params = model.parameters()
    header = {
        "architecture": model.architecture(),
        "parameters": list(params),
    }
    header.update(metadata or {})
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", len(head)), head, struct.pack("<I", len(params))]
    for value in params.values():
        chunks.append(struct.pack(f"<I{value.ndim}I", value.ndim, *value.shape))
        chunks.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    return b"".join(chunks)


def loads(data: bytes) -> tuple[NetworkModel, dict]:
    if data[: len(MAGIC)] != MAGIC:
        raise CorruptModel("bad magic bytes: not a model file")
    pos = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CorruptModel("model file is truncated")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    try:
        (head_len,) = struct.unpack("<I", take(4))
        header = json.loads(take(head_len).decode("utf-8"))
        (count,) = struct.unpack("<I", take(4))
        tensors = []
        for _ in range(count):
            (ndim,) = struct.unpack("<I", take(4))
            shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            tensors.append(np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(shape))
    except (UnicodeDecodeError, json.JSONDecodeError, struct.error) as exc:
        raise CorruptModel(f"unreadable model file: {exc}") from exc
    if pos != len(data):
        raise CorruptModel(f"{len(data) - pos} trailing bytes after the last tensor")

    names = header.get("parameters", [])
    if len(names) != len(tensors) or len(tensors) != 10:
        raise CorruptModel("parameter table does not match the architecture")
    p = dict(zip(names, tensors))
    arch = header["architecture"]
    try:
        model = NetworkModel(
            ConvLayer(p["conv1.kernels"], p["conv1.biases"]),
            ConvLayer(p["conv2.kernels"], p["conv2.biases"]),
            ConvLayer(p["conv3.kernels"], p["conv3.biases"]),
            DenseLayer(p["fc1.weights"], p["fc1.biases"]),
            DenseLayer(p["fc2.weights"], p["fc2.biases"]),
            dropout=arch["dropout"],
            patch_size=arch["patch_size"],
        )
    except (KeyError, ValueError) as exc:
        raise CorruptModel(f"inconsistent model file: {exc}") from exc
    return model, header


def save(model: NetworkModel, path: str | Path, metadata: dict | None = None) -> None:
    Path(path).write_bytes(dumps(model, metadata))


def load(path: str | Path) -> tuple[NetworkModel, dict]:
    return loads(Path(path).read_bytes())
