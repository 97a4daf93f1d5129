"""XVOL1 volumes and checkpoint containers: round trips and corruption handling."""

import struct
import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from xmas.errors import ChecksumError, MalformedHeaderError, TruncatedFileError, VolumeIOError
from xmas.field import LabelVolume, ScalarVolume, SpatialGrid
from xmas.io import (
    decode_volume,
    encode_volume,
    read_checkpoint,
    read_volume,
    write_checkpoint,
    write_volume,
)


@given(
    st.tuples(st.integers(2, 6), st.integers(2, 6), st.integers(2, 6)),
    st.tuples(*[st.floats(0.1, 5)] * 3),
    st.integers(0, 2**31 - 1),
)
def test_scalar_round_trip(shape, spacing, seed):
    values = np.random.default_rng(seed).normal(size=shape).astype(np.float32)
    vol = ScalarVolume(SpatialGrid(shape, spacing), values)
    raw = encode_volume(vol)
    back = decode_volume(raw)
    assert back.grid == vol.grid
    assert back.values.dtype == np.float32
    assert back.values.tobytes() == values.tobytes()
    assert encode_volume(back) == raw


def test_label_round_trip(tmp_path, rng):
    lab = LabelVolume.from_array(rng.choice([0, 1, 4], size=(3, 4, 5)), (0, 1, 4))
    write_volume(tmp_path / "l.xvol", lab)
    back = read_volume(tmp_path / "l.xvol")
    assert isinstance(back, LabelVolume)
    assert back.label_set == (0, 1, 4)
    assert np.array_equal(back.labels, lab.labels)
    assert (tmp_path / "l.xvol").read_bytes() == encode_volume(back)


def test_layout_is_x_fastest_little_endian():
    values = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    raw = encode_volume(ScalarVolume.from_array(values))
    header, rest = raw.split(b"\0", 1)
    assert b"magic=XVOL1" in header and b"byte_order=LE" in header
    payload = rest[:-4]
    first = struct.unpack("<3f", payload[:12])
    assert first == (values[0, 0, 0], values[1, 0, 0], values[0, 1, 0])
    assert struct.unpack("<I", rest[-4:])[0] == zlib.crc32(payload)


def _raw(rng):
    return encode_volume(ScalarVolume.from_array(rng.normal(size=(3, 3, 3)).astype(np.float32)))


def test_truncated_payload(rng):
    raw = _raw(rng)
    with pytest.raises(TruncatedFileError):
        decode_volume(raw[:-10])


def test_checksum_mismatch(rng):
    raw = bytearray(_raw(rng))
    raw[-8] ^= 0xFF
    with pytest.raises(ChecksumError):
        decode_volume(bytes(raw))


def test_header_size_mismatch(rng):
    raw = _raw(rng).replace(b"payload_bytes=108", b"payload_bytes=100")
    with pytest.raises(MalformedHeaderError):
        decode_volume(raw)


@pytest.mark.parametrize("mutate", [
    lambda r: r.replace(b"XVOL1", b"XVOL2"),
    lambda r: r.replace(b"dtype=f32", b"dtype=f64"),
    lambda r: r.replace(b"\0", b"", 1),
    lambda r: r.replace(b"shape=3 3 3", b"shape=3 3"),
    lambda r: r + b"xx",
])
def test_malformed_headers(rng, mutate):
    with pytest.raises(MalformedHeaderError):
        decode_volume(mutate(_raw(rng)))


def test_missing_file_is_io_error(tmp_path):
    with pytest.raises(VolumeIOError):
        read_volume(tmp_path / "nope.xvol")


def test_atomic_write_leaves_no_temp_files(tmp_path, rng):
    write_volume(tmp_path / "v.xvol", ScalarVolume.from_array(rng.normal(size=(2, 2, 2))))
    assert [p.name for p in tmp_path.iterdir()] == ["v.xvol"]


def test_checkpoint_round_trip(tmp_path, rng):
    blocks = {"w": rng.normal(size=(2, 3)).astype(np.float32), "b": np.zeros(4, dtype=np.float32)}
    path = tmp_path / "c.xckpt"
    write_checkpoint(path, "xmas-reg-v1", config={"a": 1}, seed=3, iteration=7, blocks=blocks, extra={"k": "v"})
    header, back = read_checkpoint(path, "xmas-reg-v1")
    assert header["seed"] == 3 and header["iteration"] == 7 and header["config"] == {"a": 1}
    assert list(back) == ["w", "b"]
    assert all(np.array_equal(back[k], blocks[k]) for k in blocks)
    with pytest.raises(MalformedHeaderError):
        read_checkpoint(path, "xmas-sim-v1")
    raw = path.read_bytes()
    path.write_bytes(raw[:-3])
    with pytest.raises(TruncatedFileError):
        read_checkpoint(path, "xmas-reg-v1")
