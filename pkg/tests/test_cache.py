import io
import struct

import numpy as np
import pytest

from fbsdex.cache import (
    CACHE_MAGIC, CACHE_VERSION, decode_name, decode_state_paths, encode_name, encode_state_paths, read_cache,
    write_cache,
)
from fbsdex.exceptions import CacheDecodeError
from fbsdex.paths import StatePaths, TimeGrid

name_test_cases = [
    ('X', b'\x01\x00X'),
    ('pi', b'\x02\x00pi'),
    ('', b'\x00\x00'),
]

name_bad_input = [
    b'',
    b'\x01',
    b'\x05\x00abc',
    b'\x01\x00\xff',
]


def _header(n_steps=4, horizon=1.0, version=CACHE_VERSION) -> bytes:
    return b''.join([
        CACHE_MAGIC,
        struct.pack('<H', version),
        encode_name('X'),
        struct.pack('<Id', n_steps, horizon),
    ])


def _array(values) -> bytes:
    buffer = io.BytesIO()
    np.save(buffer, values, allow_pickle=False)
    return buffer.getvalue()


class TestName:
    @pytest.mark.parametrize('value, expected_value', name_test_cases)
    def test_encode(self, value, expected_value):
        assert encode_name(value) == expected_value

    @pytest.mark.parametrize('expected_value, value', name_test_cases)
    def test_decode(self, value, expected_value):
        assert decode_name(io.BytesIO(value)) == expected_value

    @pytest.mark.parametrize('bad_input', name_bad_input)
    def test_decode_bad_input(self, bad_input):
        with pytest.raises(CacheDecodeError):
            decode_name(io.BytesIO(bad_input))

    def test_encode_too_long(self):
        with pytest.raises(ValueError):
            encode_name('x' * 70_000)


class TestStatePaths:
    def test_scalar_process(self):
        values = np.random.default_rng(0).standard_normal((3, 5))
        paths = StatePaths('X', TimeGrid(4, 2.0), values)

        decoded = decode_state_paths(encode_state_paths(paths))

        assert decoded.name == 'X'
        assert decoded.grid == TimeGrid(4, 2.0)
        assert np.array_equal(decoded.values, values)

    def test_vector_process(self):
        values = np.arange(30, dtype=float).reshape(3, 5, 2)

        decoded = decode_state_paths(encode_state_paths(StatePaths('Z', TimeGrid(4, 1.0), values)))

        assert decoded.values.shape == (3, 5, 2)
        assert decoded.components == 2
        assert np.array_equal(decoded.values, values)

    def test_encoding_is_deterministic(self):
        paths = StatePaths('Y', TimeGrid(4, 1.0), np.linspace(0.0, 1.0, 15).reshape(3, 5))

        assert encode_state_paths(paths) == encode_state_paths(paths)

    def test_layout(self):
        values = np.ones((2, 5))

        data = encode_state_paths(StatePaths('X', TimeGrid(4, 1.0), values))

        assert data == _header() + _array(values)

    def test_bad_magic(self):
        with pytest.raises(CacheDecodeError):
            decode_state_paths(b'FBSZ' + _header()[4:] + _array(np.ones((3, 5))))

    def test_unsupported_version(self):
        with pytest.raises(CacheDecodeError):
            decode_state_paths(_header(version=1) + _array(np.ones((3, 5))))

    def test_truncated_header(self):
        with pytest.raises(CacheDecodeError):
            decode_state_paths(_header()[:-3])

    def test_truncated_values(self):
        with pytest.raises(CacheDecodeError):
            decode_state_paths(_header() + _array(np.ones((3, 5)))[:-16])

    def test_not_an_array(self):
        with pytest.raises(CacheDecodeError):
            decode_state_paths(_header() + b'\x00' * 120)

    @pytest.mark.parametrize('values', [
        np.ones((3, 5), dtype=np.float32),
        np.ones((3, 5), dtype=np.int64),
    ])
    def test_bad_dtype(self, values):
        with pytest.raises(CacheDecodeError):
            decode_state_paths(_header() + _array(values))

    def test_bad_dimensions(self):
        with pytest.raises(CacheDecodeError):
            decode_state_paths(_header() + _array(np.ones((3, 5, 1, 1))))

    def test_shape_does_not_match_grid(self):
        with pytest.raises(CacheDecodeError):
            decode_state_paths(_header(n_steps=8) + _array(np.ones((3, 5))))

    def test_invalid_grid(self):
        with pytest.raises(CacheDecodeError):
            decode_state_paths(_header(horizon=0.0) + _array(np.ones((3, 5))))


def test_write_and_read(tmp_path):
    values = np.linspace(0.0, 1.0, 10).reshape(2, 5)
    path = tmp_path / 'X.fbsx'

    write_cache(path, StatePaths('X', TimeGrid(4, 1.0), values))
    cached = read_cache(path)

    assert path.read_bytes().startswith(CACHE_MAGIC)
    assert np.array_equal(cached.values, values)
