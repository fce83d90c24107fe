## segmentation/network/checkpoint.py

"""Versioned binary container for NetworkParams.

Layout (little-endian):
    b"LSEG" | uint16 version | uint32 n + n bytes UTF-8 JSON config echo
    | uint32 record count | records

Each record is uint16 name length, name, uint8 rank, rank x uint32 dims,
then the float64 payload in row-major order.
"""

import json
import logging
import os
import struct
from collections import OrderedDict
from typing import Dict

import numpy as np

from segmentation.autodiff import Tensor
from segmentation.exceptions import CheckpointError, SegmentationError
from segmentation.network.config import BackboneConfig
from segmentation.network.params import Layer, NetworkParams, layer_shapes

logger = logging.getLogger(__name__)

MAGIC = b"LSEG"
FORMAT_VERSION = 1


def to_bytes(params: NetworkParams) -> bytes:
    echo = json.dumps(params.config.to_dict(), sort_keys=True).encode("utf-8")
    tensors = list(params.tensors())

    chunks = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(echo)), echo]
    chunks.append(struct.pack("<I", len(tensors)))
    for name, tensor in tensors:
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", tensor.ndim))
        chunks.append(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        chunks.append(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, blob: bytes, path=None):
        self.blob = blob
        self.offset = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.blob):
            raise CheckpointError(
                f"Truncated checkpoint at byte {self.offset}, needed {n} more", self.path
            )
        chunk = self.blob[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(blob: bytes, path=None) -> NetworkParams:
    reader = _Reader(blob, path)
    if reader.take(4) != MAGIC:
        raise CheckpointError("Not a checkpoint (bad magic)", path)
    (version,) = reader.unpack("<H")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {version}", path)

    (echo_len,) = reader.unpack("<I")
    try:
        config = BackboneConfig.from_dict(json.loads(reader.take(echo_len).decode("utf-8")))
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"Unreadable config echo: {e}", path) from e

    (count,) = reader.unpack("<I")
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (rank,) = reader.unpack("<B")
        dims = reader.unpack(f"<{rank}I")
        size = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(reader.take(8 * size), dtype="<f8").reshape(dims)
        arrays[name] = data.astype(np.float64)

    if reader.offset != len(blob):
        raise CheckpointError(f"{len(blob) - reader.offset} trailing bytes", path)

    layers = OrderedDict()
    for shape in layer_shapes(config):
        try:
            weight = arrays.pop(f"{shape.name}.weight")
            bias = arrays.pop(f"{shape.name}.bias")
        except KeyError as e:
            raise CheckpointError(f"Missing tensor {e.args[0]}", path) from None
        layers[shape.name] = Layer(
            Tensor(weight, True, f"{shape.name}.weight"),
            Tensor(bias, True, f"{shape.name}.bias"),
            shape.kind,
        )
    if arrays:
        raise CheckpointError(f"Unexpected tensors {sorted(arrays)}", path)

    try:
        return NetworkParams(config, layers)
    except SegmentationError as e:
        raise CheckpointError(str(e), path) from e


def save_checkpoint(params: NetworkParams, path) -> str:
    path = os.fspath(path)
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        f.write(to_bytes(params))
    logger.info(f"Saved checkpoint {path} ({params.parameter_count()} parameters)")
    return path


def load_checkpoint(path) -> NetworkParams:
    path = os.fspath(path)
    with open(path, "rb") as f:
        blob = f.read()
    params = from_bytes(blob, path)
    logger.info(f"Loaded checkpoint {path}")
    return params
