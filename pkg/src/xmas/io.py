"""On-disk formats.

Volumes (``XVOL1``)::

    magic=XVOL1\\n shape=X Y Z\\n spacing=sx sy sz\\n dtype=f32|i32\\n
    byte_order=LE\\n payload_bytes=N\\n [label_set=0 1 2\\n] \\0
    <N bytes, little-endian, x fastest> <CRC32 of payload, uint32 LE>

Checkpoints use the same framing with a JSON header carrying ``format``
(``xmas-reg-v1`` / ``xmas-sim-v1``), the config echo, seed, iteration and a
block table; every block is little-endian float32.

All writers go through a temporary file and ``os.replace``.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .errors import ChecksumError, MalformedHeaderError, TruncatedFileError, VolumeIOError
from .field import LabelVolume, ScalarVolume, SpatialGrid

MAGIC = "XVOL1"
_DTYPES = {"f32": np.dtype("<f4"), "i32": np.dtype("<i4")}


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _frame(header: bytes, payload: bytes) -> bytes:
    return header + b"\0" + payload + struct.pack("<I", zlib.crc32(payload))


def _unframe(raw: bytes, path) -> tuple[bytes, bytes]:
    """Split into (header, rest); rest still carries payload + CRC."""
    end = raw.find(b"\0")
    if end < 0:
        raise MalformedHeaderError(f"{path}: header is not NUL-terminated")
    return raw[:end], raw[end + 1:]


def _check_payload(rest: bytes, nbytes: int, path) -> bytes:
    if len(rest) < nbytes + 4:
        raise TruncatedFileError(f"{path}: expected {nbytes} payload bytes + CRC, found {len(rest)} bytes")
    if len(rest) > nbytes + 4:
        raise MalformedHeaderError(f"{path}: {len(rest) - nbytes - 4} trailing bytes after CRC")
    payload = rest[:nbytes]
    (crc,) = struct.unpack("<I", rest[nbytes:nbytes + 4])
    if zlib.crc32(payload) != crc:
        raise ChecksumError(f"{path}: payload CRC mismatch")
    return payload


# ---------------------------------------------------------------------------
# volumes


def encode_volume(vol: ScalarVolume | LabelVolume) -> bytes:
    if isinstance(vol, LabelVolume):
        code, values = "i32", vol.labels
    elif isinstance(vol, ScalarVolume):
        code, values = "f32", vol.values
    else:
        raise TypeError(f"cannot write {type(vol).__name__}")
    payload = np.asarray(values).astype(_DTYPES[code]).tobytes(order="F")
    g = vol.grid
    lines = [
        f"magic={MAGIC}",
        "shape=" + " ".join(str(n) for n in g.shape),
        "spacing=" + " ".join(repr(float(s)) for s in g.spacing),
        f"dtype={code}",
        "byte_order=LE",
        f"payload_bytes={len(payload)}",
    ]
    if isinstance(vol, LabelVolume):
        lines.append("label_set=" + " ".join(str(l) for l in vol.label_set))
    header = ("\n".join(lines) + "\n").encode("utf-8")
    return _frame(header, payload)


def decode_volume(raw: bytes, path="<bytes>") -> ScalarVolume | LabelVolume:
    head, rest = _unframe(raw, path)
    try:
        text = head.decode("utf-8")
        fields = dict(line.split("=", 1) for line in text.splitlines() if line.strip())
    except (UnicodeDecodeError, ValueError) as exc:
        raise MalformedHeaderError(f"{path}: unreadable header ({exc})") from exc
    if fields.get("magic") != MAGIC:
        raise MalformedHeaderError(f"{path}: bad magic {fields.get('magic')!r}")
    try:
        shape = tuple(int(v) for v in fields["shape"].split())
        spacing = tuple(float(v) for v in fields["spacing"].split())
        code = fields["dtype"]
        nbytes = int(fields["payload_bytes"])
        order = fields["byte_order"]
    except (KeyError, ValueError) as exc:
        raise MalformedHeaderError(f"{path}: missing or invalid header field ({exc})") from exc
    if code not in _DTYPES or order != "LE" or len(shape) != 3 or len(spacing) != 3:
        raise MalformedHeaderError(f"{path}: unsupported dtype/byte order/rank")
    dtype = _DTYPES[code]
    if nbytes != int(np.prod(shape)) * dtype.itemsize:
        raise MalformedHeaderError(f"{path}: payload_bytes={nbytes} does not match shape {shape} x {code}")
    payload = _check_payload(rest, nbytes, path)
    values = np.frombuffer(payload, dtype=dtype).reshape(shape, order="F")
    grid = SpatialGrid(shape, spacing)
    if code == "i32":
        label_set = tuple(int(v) for v in fields.get("label_set", "").split())
        return LabelVolume(grid, values.astype(np.int32), label_set)
    return ScalarVolume(grid, values.astype(np.float32))


def write_volume(path, vol: ScalarVolume | LabelVolume) -> None:
    """Scalar volumes are stored as float32, label volumes as int32."""
    atomic_write(path, encode_volume(vol))


def read_volume(path) -> ScalarVolume | LabelVolume:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise VolumeIOError(f"cannot read {path}: {exc}") from exc
    return decode_volume(raw, path)


# ---------------------------------------------------------------------------
# checkpoints


def write_checkpoint(path, fmt: str, *, config: dict, seed: int, iteration: int,
                     blocks: dict[str, np.ndarray], extra: dict | None = None) -> None:
    table, chunks, offset = [], [], 0
    for name, arr in blocks.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    header = {
        "format": fmt,
        "config": config,
        "seed": int(seed),
        "iteration": int(iteration),
        "blocks": table,
        "payload_bytes": len(payload),
        "extra": extra or {},
    }
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    atomic_write(path, _frame(text, payload))


def read_checkpoint(path, fmt: str) -> tuple[dict, dict[str, np.ndarray]]:
    """Return (header, blocks); ``fmt`` must match the stored format tag."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise VolumeIOError(f"cannot read checkpoint {path}: {exc}") from exc
    head, rest = _unframe(raw, path)
    try:
        header = json.loads(head.decode("utf-8"))
        nbytes = int(header["payload_bytes"])
        table = header["blocks"]
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise MalformedHeaderError(f"{path}: unreadable checkpoint header ({exc})") from exc
    if header.get("format") != fmt:
        raise MalformedHeaderError(f"{path}: format {header.get('format')!r}, expected {fmt!r}")
    payload = _check_payload(rest, nbytes, path)
    blocks = {}
    for entry in table:
        start, size = entry["offset"], entry["nbytes"]
        if start + size > nbytes or size != 4 * int(np.prod(entry["shape"], dtype=np.int64)):
            raise MalformedHeaderError(f"{path}: block {entry['name']} lies outside the payload")
        blocks[entry["name"]] = np.frombuffer(payload[start:start + size], dtype="<f4").reshape(entry["shape"]).copy()
    return header, blocks
