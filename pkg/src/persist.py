import math
import os
import struct
import zlib
from typing import (
    List,
    Set,
)

import numpy as np
import torch

from src.config import (
    TrainConfig,
    apply_overrides,
    parse_config_text,
)
from src.constants import (
    CODES_MAGIC,
    CODES_VERSION,
    MANIFOLD_TOLERANCE,
    MODEL_MAGIC,
    MODEL_VERSION,
)
from src.errors import (
    FormatError,
    InvalidArgumentError,
)
from src.geometry import (
    DTYPE,
    manifold_residual,
)
from src.index import EncodedDatabase
from src.model import Model
from src.quantizer import (
    Codebook,
    QuantCode,
)

_MODEL_HEADER = struct.Struct('<4sHIIII')
"""magic, version, D_in, M, K, d"""
_CODES_HEADER = struct.Struct('<4sHIII32s')
"""magic, version, N, M, K, codebook hash"""
_LENGTH = struct.Struct('<I')
_CRC = struct.Struct('<I')


def _write_bytes(path: str, content: bytes) -> None:
    # Readers never see a partially written file
    temp_path = f'{path}.tmp'
    with open(temp_path, 'wb') as file:
        file.write(content)
    os.replace(temp_path, path)


def _read_bytes(path: str) -> bytes:
    with open(path, 'rb') as file:
        return file.read()


def read_features(path: str) -> np.ndarray:
    """
    Read a feature file: records of an int32 dimension D followed by D float32 (little-endian).

    Args:
        path (str): The path to the feature file.

    Returns:
        np.ndarray: Float32 features of shape `(N, D)`; an empty file gives `(0, 0)`.
    """
    content = _read_bytes(path)
    size = len(content)
    if size == 0:
        return np.zeros((0, 0), dtype=np.float32)
    if size < 4:
        raise FormatError(f'`{path}`: truncated record 0 at byte 0')

    dim = int(np.frombuffer(content, dtype='<i4', count=1)[0])
    if dim < 1:
        raise FormatError(f'`{path}`: record 0 at byte 0 claims dimension {dim}')

    record_size = 4 * (1 + dim)
    if size % record_size == 0:
        records = np.frombuffer(content, dtype='<i4').reshape(-1, 1 + dim)
        if np.all(records[:, 0] == dim):
            return np.frombuffer(content, dtype='<f4').reshape(-1, 1 + dim)[:, 1:].astype(np.float32)

    # Locate the first faulty record
    offset = 0
    index = 0
    while offset < size:
        if offset + 4 > size:
            raise FormatError(f'`{path}`: truncated record {index} at byte {offset}')
        claimed = int.from_bytes(content[offset : offset + 4], 'little', signed=True)
        if claimed != dim:
            raise FormatError(f'`{path}`: record {index} at byte {offset} claims dimension {claimed}, expected {dim}')
        if offset + record_size > size:
            raise FormatError(f'`{path}`: truncated record {index} at byte {offset}')
        offset += record_size
        index += 1

    raise FormatError(f'`{path}`: inconsistent feature file')


def write_features(
    path: str,
    features: np.ndarray,
) -> None:
    """
    Write a feature file.

    Args:
        path (str): The path to the feature file.
        features (np.ndarray): Features of shape `(N, D)`, stored as float32.
    """
    features = np.asarray(features)
    if features.ndim != 2:
        raise InvalidArgumentError(f'Expected a (N, D) matrix, got shape {features.shape}')

    n, dim = features.shape
    records = np.empty((n, 1 + dim), dtype='<f4')
    records[:, 1:] = features
    records.view('<i4')[:, 0] = dim

    _write_bytes(path, records.tobytes())


def read_labels(path: str) -> List[Set[int]]:
    """
    Read a label file: one line per item, comma-separated non-negative integers.

    A blank line is an item without label.

    Args:
        path (str): The path to the label file.
    """
    with open(path, 'r', encoding='utf-8') as file:
        lines = file.read().splitlines()

    labels: List[Set[int]] = []
    for number, line in enumerate(lines, start=1):
        item: Set[int] = set()
        for token in line.split(','):
            token = token.strip()
            if not token:
                continue
            if not (token.isascii() and token.isdigit()):
                raise FormatError(f'`{path}`, line {number}: invalid label `{token}`')
            item.add(int(token))
        labels.append(item)

    return labels


def _f64(tensor: torch.Tensor) -> bytes:
    return tensor.detach().numpy().astype('<f8').tobytes()


def save_model(
    path: str,
    model: Model,
) -> None:
    """
    Save a model: header, curvatures, projector, codewords, configuration echo and CRC32.

    Args:
        path (str): The path to the model file.
        model (Model): The model.
    """
    codebook = model.codebook
    config_text = model.config.to_text().encode('utf-8')

    payload = b''.join(
        [
            _MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, model.input_dim, codebook.M, codebook.K, codebook.d),
            _f64(codebook.curvatures),
            _f64(model.projector.weight),
            _f64(model.projector.bias),
            _f64(codebook.codewords),
            _LENGTH.pack(len(config_text)),
            config_text,
        ]
    )

    _write_bytes(path, payload + _CRC.pack(zlib.crc32(payload)))


class _Reader:
    """Sequential reader over a byte payload."""

    def __init__(self, path: str, content: bytes) -> None:
        self.path = path
        self.content = content
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.content):
            raise FormatError(f'`{self.path}`: truncated at byte {self.offset}')
        chunk = self.content[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def f64(self, *shape: int) -> torch.Tensor:
        count = math.prod(shape)
        values = np.frombuffer(self.take(8 * count), dtype='<f8').astype(np.float64)
        return torch.from_numpy(values.reshape(shape))


def load_model(path: str) -> Model:
    """
    Load a model saved with `save_model`.

    Args:
        path (str): The path to the model file.
    """
    content = _read_bytes(path)
    if len(content) < _MODEL_HEADER.size + _CRC.size:
        raise FormatError(f'`{path}`: truncated model file ({len(content)} bytes)')

    payload, crc = content[: -_CRC.size], content[-_CRC.size :]
    magic, version, input_dim, m, k, d = _MODEL_HEADER.unpack_from(payload)
    if magic != MODEL_MAGIC:
        raise FormatError(f'`{path}`: not a model file (magic {magic!r})')
    if version != MODEL_VERSION:
        raise FormatError(f'`{path}`: unsupported model version {version}')
    if _CRC.unpack(crc)[0] != zlib.crc32(payload):
        raise FormatError(f'`{path}`: CRC mismatch')

    reader = _Reader(path, payload)
    reader.take(_MODEL_HEADER.size)
    curvatures = reader.f64(m)
    weight = reader.f64(m * (d + 1), input_dim)
    bias = reader.f64(m * (d + 1))
    codewords = reader.f64(m, k, d + 1)
    (length,) = _LENGTH.unpack(reader.take(_LENGTH.size))
    config_text = reader.take(length).decode('utf-8')
    if reader.offset != len(payload):
        raise FormatError(f'`{path}`: {len(payload) - reader.offset} trailing bytes at byte {reader.offset}')

    try:
        config = apply_overrides(TrainConfig(), parse_config_text(config_text))
        codebook = Codebook(codewords, curvatures, tau=config.tau, learnable_curvature=config.learnable_curvature)
    except InvalidArgumentError as error:
        raise FormatError(f'`{path}`: {error}') from None

    residual = float(manifold_residual(codebook.codewords.detach(), codebook.curvatures.detach().unsqueeze(-1)).max())
    if not residual <= MANIFOLD_TOLERANCE:
        raise FormatError(f'`{path}`: codewords are off their manifolds (residual {residual:.3g})')

    model = Model(input_dim, config, codebook)
    with torch.no_grad():
        model.projector.weight.copy_(weight.to(DTYPE))
        model.projector.bias.copy_(bias.to(DTYPE))

    return model


def _code_bits(k: int) -> int:
    return int(math.log2(k))


def code_bytes_per_item(m: int, k: int) -> int:
    """Bytes taken by the code of one item, ceil(M * log2(K) / 8)."""
    return -(-m * _code_bits(k) // 8)


def save_codes(
    path: str,
    db: EncodedDatabase,
) -> None:
    """
    Save database codes: header, then log2(K) bits per index, little-endian bit order, byte-padded per item.

    Args:
        path (str): The path to the code file.
        db (EncodedDatabase): The encoded database.
    """
    indices = db.codes.indices.astype(np.int64)
    n, m = indices.shape
    bits = _code_bits(db.codes.K)

    unpacked = ((indices[:, :, None] >> np.arange(bits)) & 1).astype(np.uint8).reshape(n, m * bits)
    packed = np.packbits(unpacked, axis=1, bitorder='little')

    header = _CODES_HEADER.pack(CODES_MAGIC, CODES_VERSION, n, m, db.codes.K, db.codebook_hash)
    _write_bytes(path, header + packed.tobytes())


def load_codes(path: str) -> EncodedDatabase:
    """
    Load database codes saved with `save_codes`; item ids are the row indices.

    Args:
        path (str): The path to the code file.
    """
    content = _read_bytes(path)
    if len(content) < _CODES_HEADER.size:
        raise FormatError(f'`{path}`: truncated code header ({len(content)} bytes)')

    magic, version, n, m, k, codebook_hash = _CODES_HEADER.unpack_from(content)
    if magic != CODES_MAGIC:
        raise FormatError(f'`{path}`: not a code file (magic {magic!r})')
    if version != CODES_VERSION:
        raise FormatError(f'`{path}`: unsupported code version {version}')
    if k < 1 or k & (k - 1):
        raise FormatError(f'`{path}`: K must be a power of two, got {k}')

    item_bytes = code_bytes_per_item(m, k)
    expected = _CODES_HEADER.size + n * item_bytes
    if len(content) != expected:
        raise FormatError(f'`{path}`: expected {expected} bytes for {n} codes, got {len(content)}')

    bits = _code_bits(k)
    packed = np.frombuffer(content, dtype=np.uint8, offset=_CODES_HEADER.size).reshape(n, item_bytes)
    unpacked = np.unpackbits(packed, axis=1, count=m * bits, bitorder='little').reshape(n, m, bits)
    indices = (unpacked.astype(np.int64) << np.arange(bits)).sum(axis=-1)

    return EncodedDatabase(QuantCode(indices, k), np.arange(n, dtype=np.int64), codebook_hash)
