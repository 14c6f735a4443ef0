"""MATF checkpoint container.

Layout (all integers little-endian)::

    b"MATF" | u32 version | u64 header length | header (UTF-8 JSON) | payload

The header holds the model config, a tensor manifest (name, shape, byte
offset into the payload) and optional free-form metadata. Payload tensors are
raw little-endian float64 in manifest order. Serialization is deterministic:
the same model always produces the same bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from matformer import nn
from matformer.config import ModelConfig
from matformer.errors import MatformerError
from matformer.model import MatDecoderModel

MAGIC = b"MATF"
VERSION = 1


class CheckpointError(MatformerError, ValueError):
    pass


def dumps(model: MatDecoderModel, extra_tensors: dict[str, np.ndarray] | None = None, metadata: dict | None = None) -> bytes:
    tensors = {name: p.data for name, p in model.params.items()}
    for name, arr in (extra_tensors or {}).items():
        if name in tensors:
            raise CheckpointError(f"extra tensor {name!r} collides with a model parameter")
        tensors[f"extra/{name}"] = np.asarray(arr, dtype=np.float64)
    manifest = []
    offset = 0
    for name, arr in tensors.items():
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {
        "config": model.config.to_dict(),
        "tensors": manifest,
        "metadata": metadata or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(blob)), blob]
    parts.extend(np.ascontiguousarray(arr, dtype="<f8").tobytes() for arr in tensors.values())
    return b"".join(parts)


def loads(raw: bytes) -> tuple[MatDecoderModel, dict[str, np.ndarray], dict]:
    if raw[:4] != MAGIC:
        raise CheckpointError("not a MATF checkpoint (bad magic)")
    version, header_len = struct.unpack_from("<IQ", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported MATF version {version}")
    body = 4 + struct.calcsize("<IQ")
    header = json.loads(raw[body : body + header_len].decode("utf-8"))
    payload = memoryview(raw)[body + header_len :]
    params = {}
    extras = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        if start + count * 8 > len(payload):
            raise CheckpointError(f"tensor {entry['name']!r} runs past the end of the file")
        arr = np.frombuffer(payload[start : start + count * 8], dtype="<f8").astype(np.float64).reshape(shape)
        if entry["name"].startswith("extra/"):
            extras[entry["name"][len("extra/") :]] = arr
        else:
            params[entry["name"]] = nn.parameter(arr, entry["name"])
    model = MatDecoderModel(ModelConfig.from_dict(header["config"]), params=params)
    return model, extras, header.get("metadata", {})


def save(path, model: MatDecoderModel, extra_tensors=None, metadata=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(model, extra_tensors, metadata))
    return path


def load(path) -> tuple[MatDecoderModel, dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())


def load_model(path) -> MatDecoderModel:
    return load(path)[0]
