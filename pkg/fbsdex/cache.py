"""
Versioned binary cache of StatePaths

    magic 'FBSX' | '<H' version | '<H' name length | utf-8 name | '<I' n_steps | '<d' horizon
    | values as an .npy array ('<f8', 2 or 3 dimensions)
"""
import io
import logging
import struct
from pathlib import Path
from typing import IO, Union

import numpy as np

from fbsdex.exceptions import CacheDecodeError
from fbsdex.paths import StatePaths, TimeGrid

__all__ = [
    'CACHE_MAGIC',
    'CACHE_VERSION',
    'encode_name',
    'decode_name',
    'encode_state_paths',
    'decode_state_paths',
    'write_cache',
    'read_cache',
]

logger = logging.getLogger(__name__)

CACHE_MAGIC = b'FBSX'
CACHE_VERSION = 2

_VERSION = struct.Struct('<H')
_NAME_LENGTH = struct.Struct('<H')
_GRID = struct.Struct('<Id')


def _read_exact(stream: IO, length: int) -> bytes:
    data = stream.read(length)

    if len(data) < length:
        raise CacheDecodeError(f'Expected to read {length} bytes, {len(data)} bytes read instead')

    return data


def encode_name(name: str) -> bytes:
    data = name.encode('utf-8')

    if len(data) > 0xFFFF:
        raise ValueError(f'Process name is too long: {len(data)} bytes')

    return _NAME_LENGTH.pack(len(data)) + data


def decode_name(stream: IO) -> str:
    (length,) = _NAME_LENGTH.unpack(_read_exact(stream, _NAME_LENGTH.size))

    try:
        return _read_exact(stream, length).decode('utf-8')
    except UnicodeDecodeError as e:
        raise CacheDecodeError(f'Process name is not valid UTF-8: {e}') from e


def encode_state_paths(paths: StatePaths) -> bytes:
    buffer = io.BytesIO()
    buffer.write(CACHE_MAGIC)
    buffer.write(_VERSION.pack(CACHE_VERSION))
    buffer.write(encode_name(paths.name))
    buffer.write(_GRID.pack(paths.grid.n_steps, paths.grid.horizon))

    np.lib.format.write_array(
        buffer, np.ascontiguousarray(paths.values, dtype='<f8'), version=(1, 0), allow_pickle=False,
    )

    return buffer.getvalue()


def decode_state_paths(data: Union[bytes, IO]) -> StatePaths:
    """
    :raises:
        CacheDecodeError: on a foreign or truncated payload, or a version this build cannot read
    """
    stream = io.BytesIO(data) if isinstance(data, (bytes, bytearray)) else data

    magic = stream.read(len(CACHE_MAGIC))

    if magic != CACHE_MAGIC:
        raise CacheDecodeError(f'Expected cache magic {CACHE_MAGIC!r}, got {magic!r}')

    (version,) = _VERSION.unpack(_read_exact(stream, _VERSION.size))

    if version != CACHE_VERSION:
        raise CacheDecodeError(f'Unsupported cache version {version}, expected {CACHE_VERSION}')

    name = decode_name(stream)
    n_steps, horizon = _GRID.unpack(_read_exact(stream, _GRID.size))

    try:
        values = np.lib.format.read_array(stream, allow_pickle=False)
    except ValueError as e:
        raise CacheDecodeError(f'Invalid array payload: {e}') from e

    if values.dtype != np.dtype('<f8'):
        raise CacheDecodeError(f"Expected '<f8' values, got {values.dtype.str!r}")

    if values.ndim not in (2, 3):
        raise CacheDecodeError(f'Expected 2 or 3 dimensions, got {values.ndim}')

    if values.shape[1] != n_steps + 1:
        raise CacheDecodeError(f'Array of shape {values.shape} does not match {n_steps} steps')

    try:
        grid = TimeGrid(n_steps, horizon)
    except ValueError as e:
        raise CacheDecodeError(f'Invalid time grid: {e}') from e

    return StatePaths(name, grid, values.astype(float))


def write_cache(path: Union[str, Path], paths: StatePaths):
    Path(path).write_bytes(encode_state_paths(paths))
    logger.debug('Cached %s to %s', paths.name, path)


def read_cache(path: Union[str, Path]) -> StatePaths:
    with open(path, 'rb') as f:
        return decode_state_paths(f)
