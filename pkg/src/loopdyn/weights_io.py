"""Weight container: length-prefixed JSON header plus a float32 payload.

Layout::

    u64 little-endian  header length in bytes (including the trailing newline)
    header             UTF-8 JSON {"version", "config", "tensors": {name: {shape, offset, dtype}}}, then "\\n"
    payload            contiguous little-endian float32, offsets relative to payload start
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .model import LayerWeights, ModelConfig, ModelWeights

FORMAT_VERSION = 1
_PREFIX = struct.Struct("<Q")


def encode_weights(weights: ModelWeights) -> bytes:
    tensors = weights.named_tensors()
    index, chunks, offset = {}, [], 0
    for name, t in tensors.items():
        data = np.ascontiguousarray(t, dtype="<f4")
        if not np.array_equal(data.astype(np.float64), t):
            raise InvalidInputError(f"tensor {name} is not exactly representable in float32")
        raw = data.tobytes()
        index[name] = {"shape": list(t.shape), "offset": offset, "dtype": "f32"}
        chunks.append(raw)
        offset += len(raw)
    header = {"version": FORMAT_VERSION, "config": weights.config.to_dict(), "tensors": index}
    head = (json.dumps(header, sort_keys=True) + "\n").encode("utf-8")
    return _PREFIX.pack(len(head)) + head + b"".join(chunks)


def decode_weights(blob: bytes) -> ModelWeights:
    if len(blob) < _PREFIX.size:
        raise InvalidInputError("weight file truncated")
    (hlen,) = _PREFIX.unpack_from(blob, 0)
    head = blob[_PREFIX.size : _PREFIX.size + hlen]
    if len(head) != hlen or not head.endswith(b"\n"):
        raise InvalidInputError("malformed weight header")
    header = json.loads(head.decode("utf-8"))
    if header.get("version") != FORMAT_VERSION:
        raise InvalidInputError(f"unsupported weight format version {header.get('version')}")
    config = ModelConfig.from_dict(header["config"])
    payload = memoryview(blob)[_PREFIX.size + hlen :]
    tensors = {}
    for name, meta in header["tensors"].items():
        if meta["dtype"] != "f32":
            raise InvalidInputError(f"unsupported dtype {meta['dtype']}")
        shape = tuple(meta["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = meta["offset"]
        if start + 4 * count > len(payload):
            raise InvalidInputError(f"tensor {name} overruns payload")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start)
        tensors[name] = arr.astype(np.float64).reshape(shape)

    layers = []
    for i in range(config.n_layers):
        kw = {n: tensors.get(f"layers.{i}.{n}") for n in LayerWeights.TENSORS}
        layers.append(LayerWeights(**kw))
    return ModelWeights(config, layers, tensors.get("w_inject"), tensors.get("loop_norm"), tensors.get("embedding"))


def save_weights(weights: ModelWeights, path) -> None:
    Path(path).write_bytes(encode_weights(weights))


def load_weights(path) -> ModelWeights:
    return decode_weights(Path(path).read_bytes())


def inspect_weights(path) -> dict:
    """Header summary plus checksum, without building the model."""
    blob = Path(path).read_bytes()
    (hlen,) = _PREFIX.unpack_from(blob, 0)
    header = json.loads(blob[_PREFIX.size : _PREFIX.size + hlen].decode("utf-8"))
    w = decode_weights(blob)
    n_params = sum(int(np.prod(m["shape"])) for m in header["tensors"].values())
    return {
        "version": header["version"],
        "config": header["config"],
        "n_tensors": len(header["tensors"]),
        "n_parameters": n_params,
        "checksum": w.checksum(),
    }
