"""Blob frame wire format.

All integers little-endian::

    magic      4s   b"DCNN"
    version    u8
    length     u32  bytes that follow this field, through the checksum
    inference  u64
    layer      u16  index of the next layer to execute
    ndims      u8   >= 1
    dims       u32 * ndims
    payload    f32 * prod(dims)
    crc32      u32  CRC-32 of the payload bytes

``length`` makes frames self-delimiting, so a byte stream can carry them back
to back and a checksum failure consumes exactly one frame.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

MAGIC = b"DCNN"
VERSION = 1
PREFIX = struct.Struct("<4sBI")
FIXED = struct.Struct("<QHB")
MAX_FRAME = 64 * 1024 * 1024


class FrameError(ValueError):
    pass


class BadMagic(FrameError):
    pass


class BadVersion(FrameError):
    pass


class ChecksumMismatch(FrameError):
    pass


class TruncatedFrame(FrameError):
    pass


class MalformedFrame(FrameError):
    pass


@dataclass
class BlobFrame:
    inference_id: int
    layer_index: int
    blob: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, BlobFrame):
            return NotImplemented
        return (self.inference_id == other.inference_id
                and self.layer_index == other.layer_index
                and self.blob.shape == other.blob.shape
                and self.blob.astype("<f4").tobytes() == other.blob.astype("<f4").tobytes())


def encode_frame(frame: BlobFrame) -> bytes:
    blob = np.asarray(frame.blob)
    if blob.ndim < 1:
        raise MalformedFrame("blob must have at least one dimension")
    if blob.ndim > 255:
        raise MalformedFrame(f"too many dimensions: {blob.ndim}")
    payload = np.ascontiguousarray(blob, dtype="<f4").tobytes()
    body = b"".join((
        FIXED.pack(frame.inference_id, frame.layer_index, blob.ndim),
        struct.pack(f"<{blob.ndim}I", *blob.shape),
        payload,
        struct.pack("<I", zlib.crc32(payload)),
    ))
    return PREFIX.pack(MAGIC, VERSION, len(body)) + body


def _check_prefix(prefix: bytes) -> int:
    magic, version, length = PREFIX.unpack(prefix)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != VERSION:
        raise BadVersion(f"unsupported frame version {version}")
    if length > MAX_FRAME or length < FIXED.size + 4 + 4:
        raise MalformedFrame(f"implausible frame length {length}")
    return length


def _decode_body(body: bytes) -> BlobFrame:
    inference_id, layer_index, ndims = FIXED.unpack_from(body, 0)
    if ndims < 1:
        raise MalformedFrame("frame declares zero dimensions")
    pos = FIXED.size
    if len(body) < pos + 4 * ndims + 4:
        raise TruncatedFrame("frame ends inside the dimension block")
    dims = struct.unpack_from(f"<{ndims}I", body, pos)
    pos += 4 * ndims
    nbytes = 4 * int(np.prod(dims))
    if len(body) != pos + nbytes + 4:
        raise MalformedFrame(
            f"dims {list(dims)} need {nbytes} payload bytes, frame carries {len(body) - pos - 4}"
        )
    payload = body[pos:pos + nbytes]
    (crc,) = struct.unpack_from("<I", body, pos + nbytes)
    if zlib.crc32(payload) != crc:
        raise ChecksumMismatch(f"payload CRC mismatch for inference {inference_id}")
    blob = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    return BlobFrame(inference_id, layer_index, blob)


def decode_frame(data: bytes) -> BlobFrame:
    """Decode exactly one frame from ``data``."""
    if len(data) < PREFIX.size:
        raise TruncatedFrame(f"{len(data)} bytes is shorter than a frame prefix")
    length = _check_prefix(data[:PREFIX.size])
    if len(data) < PREFIX.size + length:
        raise TruncatedFrame(f"frame declares {length} body bytes, got {len(data) - PREFIX.size}")
    if len(data) > PREFIX.size + length:
        raise MalformedFrame(f"{len(data) - PREFIX.size - length} trailing bytes after frame")
    return _decode_body(data[PREFIX.size:])


def read_frame(stream, timeout: float | None = None) -> BlobFrame:
    """Read the next frame from a stream exposing ``recv_exact(n, timeout)``.

    On a bad prefix the offending bytes are consumed and the error raised; the
    caller may call again, which scans forward to the next magic.
    """
    prefix = stream.recv_exact(PREFIX.size, timeout)
    if prefix[:4] != MAGIC:
        _resync(stream, prefix, timeout)
        raise BadMagic(f"bad magic {prefix[:4]!r}; skipped to next frame boundary")
    try:
        length = _check_prefix(prefix)
    except FrameError:
        # the length field cannot be trusted, so skip ahead to the next magic
        _resync(stream, prefix, timeout)
        raise
    try:
        body = stream.recv_exact(length, timeout)
    except TimeoutError:
        stream.unread(prefix)  # keep the frame intact for the next call
        raise
    except EOFError as exc:
        raise TruncatedFrame(f"stream ended inside a {length}-byte frame body") from exc
    return _decode_body(body)


def _resync(stream, seen: bytes, timeout) -> None:
    window = bytearray(seen[1:])
    while True:
        idx = bytes(window).find(MAGIC)
        if idx >= 0:
            stream.unread(bytes(window[idx:]))
            return
        keep = bytes(window[-(len(MAGIC) - 1):])
        try:
            chunk = stream.recv_some(timeout)
        except TimeoutError:
            stream.unread(keep)
            raise
        window = bytearray(keep) + chunk
