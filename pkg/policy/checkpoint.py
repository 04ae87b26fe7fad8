"""
CORDCKPT checkpoint files.

Layout (all integers little-endian)::

    b"CORDCKPT"  u32 version  4-byte precision tag  u32 config length  config JSON
    u32 tensor count
    per tensor: u16 name length, name, u8 ndim, u32 dims..., raw scalars

Tensors are written in layout order, so two saves of equal parameters are
byte-identical.
"""
import json
import logging
import struct
from pathlib import Path

import numpy as np

from autodiff.tensor import Tensor
from cord_lab.exceptions import ArtifactIOError, CheckpointError

from .model import ModelConfig, ModelParams, parameter_shapes

logger = logging.getLogger(__name__)

MAGIC = b'CORDCKPT'
FORMAT_VERSION = 1
PRECISION_TAGS = {'f32': b'f32\x00', 'f64': b'f64\x00'}
WIRE_DTYPES = {'f32': '<f4', 'f64': '<f8'}


def encode_checkpoint(params):
    config = params.config
    chunks = [MAGIC, struct.pack('<I', FORMAT_VERSION), PRECISION_TAGS[config.precision]]
    blob = json.dumps(config.to_dict(), sort_keys=True, separators=(',', ':')).encode('utf-8')
    chunks += [struct.pack('<I', len(blob)), blob, struct.pack('<I', len(params))]
    wire = WIRE_DTYPES[config.precision]
    for name, tensor in params.items():
        encoded = name.encode('utf-8')
        chunks.append(struct.pack('<H', len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack('<B', tensor.data.ndim))
        chunks.append(struct.pack(f'<{tensor.data.ndim}I', *tensor.shape))
        chunks.append(np.ascontiguousarray(tensor.data, dtype=wire).tobytes())
    return b''.join(chunks)


class _Reader:
    def __init__(self, payload):
        self.payload = payload
        self.offset = 0

    def take(self, size):
        if self.offset + size > len(self.payload):
            raise CheckpointError(f"Checkpoint truncated at byte {self.offset}")
        chunk = self.payload[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(payload, config=None):
    """Rebuild ModelParams, verifying the header and the tensor layout"""
    reader = _Reader(payload)
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("Not a CORDCKPT file (bad magic)")
    (version,) = reader.unpack('<I')
    if version != FORMAT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {version}, expected {FORMAT_VERSION}")
    tag = reader.take(4)
    precision = next((name for name, value in PRECISION_TAGS.items() if value == tag), None)
    if precision is None:
        raise CheckpointError(f"Unknown precision tag {tag!r}")
    (blob_length,) = reader.unpack('<I')
    try:
        stored = ModelConfig.from_dict(json.loads(reader.take(blob_length).decode('utf-8')))
    except (ValueError, TypeError) as e:
        raise CheckpointError(f"Unreadable model config: {e}") from e
    if stored.precision != precision:
        raise CheckpointError(f"Precision tag {precision} disagrees with stored config {stored.precision}")
    if config is not None and config != stored:
        raise CheckpointError(f"Checkpoint was written for {stored}, not {config}")

    expected = parameter_shapes(stored)
    (count,) = reader.unpack('<I')
    if count != len(expected):
        raise CheckpointError(f"Checkpoint holds {count} tensors, layout needs {len(expected)}")
    wire = np.dtype(WIRE_DTYPES[precision])
    tensors = {}
    for name, shape in expected:
        (name_length,) = reader.unpack('<H')
        found = reader.take(name_length).decode('utf-8')
        (ndim,) = reader.unpack('<B')
        dims = reader.unpack(f'<{ndim}I')
        if found != name or tuple(dims) != shape:
            raise CheckpointError(f"Tensor '{found}' {tuple(dims)} does not match expected '{name}' {shape}")
        size = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(reader.take(size * wire.itemsize), dtype=wire).reshape(shape)
        tensors[name] = Tensor(values.astype(stored.dtype), requires_grad=True, name=name)
    if reader.offset != len(payload):
        raise CheckpointError(f"{len(payload) - reader.offset} trailing bytes after the last tensor")
    return ModelParams(stored, tensors)


def save_checkpoint(params, path):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_checkpoint(params))
    except OSError as e:
        raise ArtifactIOError(path, f"cannot write checkpoint ({e.strerror or e})") from e
    logger.info(f"Saved checkpoint {path} ({params.parameter_count()} scalars)")
    return path


def load_checkpoint(path, config=None):
    path = Path(path)
    try:
        payload = path.read_bytes()
    except OSError as e:
        raise ArtifactIOError(path, f"cannot read checkpoint ({e.strerror or e})") from e
    try:
        return decode_checkpoint(payload, config=config)
    except CheckpointError as e:
        raise CheckpointError(f"{path}: {e}") from e
