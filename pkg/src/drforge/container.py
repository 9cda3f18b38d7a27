"""Binary file envelope shared by shard and model files.

Layout: magic(4) | version u16 LE | meta_len u32 LE | meta JSON (UTF-8) |
payload | crc u32 LE | end magic "DREN".  The CRC32 covers every byte after
the leading magic and before the trailer, so any single-byte flip in the
body is detected.  Writes are atomic: temp file in the same directory,
fsync, rename.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
import zlib
from typing import Callable, Optional

VERSION = 1
END_MAGIC = b"DREN"

_HEAD = struct.Struct("<HI")  # version, meta_len
_TRAILER_SIZE = 4 + len(END_MAGIC)
_MIN_SIZE = 4 + _HEAD.size + _TRAILER_SIZE


def content_hash(data: bytes) -> str:
    """64-bit content hash, hex encoded."""
    return hashlib.blake2b(data, digest_size=8).hexdigest()


def serialize(magic: bytes, meta: dict, payload: bytes) -> bytes:
    if len(magic) != 4:
        raise ValueError(f"magic must be 4 bytes, got {len(magic)}")
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = _HEAD.pack(VERSION, len(meta_bytes)) + meta_bytes + payload
    crc = zlib.crc32(body) & 0xFFFFFFFF
    return magic + body + struct.pack("<I", crc) + END_MAGIC


def write_container(path: str, magic: bytes, meta: dict, payload: bytes) -> str:
    """Atomically write an envelope file; returns its content hash."""
    data = serialize(magic, meta, payload)
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(prefix=os.path.basename(path) + ".", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return content_hash(data)


def read_container(
    path: str,
    magic: bytes,
    kind: str,
    expected_payload: Optional[Callable[[dict], int]] = None,
) -> tuple[dict, bytes]:
    """Read and fully validate an envelope file.

    Validation order matters for error wording: structural and size checks
    (which classify short files as truncation) run before the CRC check
    (which classifies in-place damage as corruption).  expected_payload, if
    given, maps parsed metadata to the exact payload size in bytes so that
    truncation inside the payload is reported as truncation rather than as a
    checksum failure.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    size = len(data)

    if size < 4:
        raise ValueError(f"{kind} file truncated at byte offset {size}")
    if data[:4] != magic:
        raise ValueError(f"not a {kind} file: bad magic {data[:4]!r}")
    if size < _MIN_SIZE:
        raise ValueError(f"{kind} file truncated at byte offset {size}")

    version, meta_len = _HEAD.unpack_from(data, 4)
    if version > VERSION:
        raise ValueError(f"unsupported {kind} version {version} (reader supports <= {VERSION})")
    meta_end = 4 + _HEAD.size + meta_len
    if meta_end + _TRAILER_SIZE > size:
        raise ValueError(f"{kind} file truncated at byte offset {size}")

    try:
        meta = json.loads(data[4 + _HEAD.size : meta_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"corrupt {kind}: metadata unreadable ({exc})") from None
    if not isinstance(meta, dict):
        raise ValueError(f"corrupt {kind}: metadata is not an object")

    payload_end = size - _TRAILER_SIZE
    if expected_payload is not None:
        want = int(expected_payload(meta))
        have = payload_end - meta_end
        if have < want:
            raise ValueError(f"{kind} file truncated at byte offset {size}")
        if have > want:
            raise ValueError(f"corrupt {kind}: {have - want} unexpected trailing bytes")

    (stored_crc,) = struct.unpack_from("<I", data, payload_end)
    actual_crc = zlib.crc32(data[4:payload_end]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise ValueError(
            f"corrupt {kind}: CRC mismatch (stored {stored_crc:#010x}, computed {actual_crc:#010x})"
        )
    if data[payload_end + 4 :] != END_MAGIC:
        raise ValueError(f"corrupt {kind}: bad end magic")

    return meta, data[meta_end:payload_end]


def file_hash(path: str) -> str:
    with open(path, "rb") as fh:
        return content_hash(fh.read())
