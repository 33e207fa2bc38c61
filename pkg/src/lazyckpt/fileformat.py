"""Shard file layout: a self-describing header followed by raw payloads.

Header (all integers little-endian)::

    0   magic           8s   b"LZCKPT01"
    8   format_version  u32
    12  entry_count     u32
    16  header_length   u64  total header bytes, trailing checksum included
    24  entries         entry_count x (u16 key_len, key utf-8, u64 offset,
                                       u64 length, u64 checksum)
    ..  header_checksum u64  checksum of every header byte before it

Payload regions follow the header, sorted by offset and non-overlapping.
Checksums are ``crc32 << 32 | adler32`` so they can be computed incrementally
while chunks stream to disk; the CRC half guarantees that any single corrupted
byte (any burst up to 32 bits) is detected.
"""
from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field
from typing import BinaryIO, Dict, List, Tuple, Union

from .errors import BadMagic, CheckpointFormatError, ChecksumMismatch, TruncatedFile

MAGIC = b"LZCKPT01"
FORMAT_VERSION = 1

_PREFIX = struct.Struct("<8sIIQ")
_KEYLEN = struct.Struct("<H")
_ENTRY = struct.Struct("<QQQ")
_CHECKSUM = struct.Struct("<Q")
MAX_KEY_BYTES = 0xFFFF


class RollingChecksum:
    """Incremental 64-bit checksum (CRC-32 in the high word, Adler-32 low)."""

    __slots__ = ("crc", "adler")

    def __init__(self):
        self.crc = 0
        self.adler = 1

    def update(self, data) -> "RollingChecksum":
        self.crc = zlib.crc32(data, self.crc)
        self.adler = zlib.adler32(data, self.adler)
        return self

    @property
    def value(self) -> int:
        return (self.crc << 32) | self.adler


def checksum64(data) -> int:
    return RollingChecksum().update(data).value


@dataclass(frozen=True)
class HeaderEntry:
    key: str
    offset: int
    length: int
    checksum: int = 0


@dataclass
class CheckpointFileHeader:
    entries: List[HeaderEntry] = field(default_factory=list)
    format_version: int = FORMAT_VERSION

    magic = MAGIC

    @property
    def entry_count(self) -> int:
        return len(self.entries)

    @property
    def header_length(self) -> int:
        return header_length([e.key for e in self.entries])

    @property
    def payload_end(self) -> int:
        if not self.entries:
            return self.header_length
        last = self.entries[-1]
        return last.offset + last.length

    def entry(self, key: str) -> HeaderEntry:
        for e in self.entries:
            if e.key == key:
                return e
        raise KeyError(key)

    def validate(self) -> None:
        hlen = self.header_length
        pos = hlen
        seen = set()
        for e in self.entries:
            if e.key in seen:
                raise CheckpointFormatError(f"duplicate key {e.key!r}")
            seen.add(e.key)
            if e.offset < pos:
                raise CheckpointFormatError(
                    f"entry {e.key!r} at {e.offset} overlaps header or previous entry (expected >= {pos})"
                )
            if e.length < 0:
                raise CheckpointFormatError(f"entry {e.key!r} has negative length")
            if not 0 <= e.checksum < 2**64:
                raise CheckpointFormatError(f"entry {e.key!r} checksum out of range")
            pos = e.offset + e.length

    def with_checksums(self, checksums: Dict[str, int]) -> "CheckpointFileHeader":
        return CheckpointFileHeader(
            [HeaderEntry(e.key, e.offset, e.length, checksums.get(e.key, e.checksum)) for e in self.entries],
            self.format_version,
        )


def _encode_key(key: str) -> bytes:
    raw = key.encode("utf-8")
    if len(raw) > MAX_KEY_BYTES:
        raise CheckpointFormatError(f"key too long ({len(raw)} bytes)")
    return raw


def header_length(keys) -> int:
    n = _PREFIX.size + _CHECKSUM.size
    for k in keys:
        n += _KEYLEN.size + len(_encode_key(k)) + _ENTRY.size
    return n


def layout(keys_and_lengths: List[Tuple[str, int]]) -> CheckpointFileHeader:
    """Assign contiguous payload offsets right after the header."""
    pos = header_length([k for k, _ in keys_and_lengths])
    entries = []
    for key, length in keys_and_lengths:
        entries.append(HeaderEntry(key, pos, length))
        pos += length
    return CheckpointFileHeader(entries)


def encode_header(header: CheckpointFileHeader) -> bytes:
    header.validate()
    parts = [_PREFIX.pack(MAGIC, header.format_version, len(header.entries), header.header_length)]
    for e in header.entries:
        raw = _encode_key(e.key)
        parts.append(_KEYLEN.pack(len(raw)))
        parts.append(raw)
        parts.append(_ENTRY.pack(e.offset, e.length, e.checksum))
    body = b"".join(parts)
    return body + _CHECKSUM.pack(checksum64(body))


def decode_header(buf: bytes) -> CheckpointFileHeader:
    if len(buf) < _PREFIX.size:
        if MAGIC.startswith(bytes(buf[:8])):
            raise TruncatedFile(f"header prefix needs {_PREFIX.size} bytes, got {len(buf)}")
        raise BadMagic(f"bad magic {bytes(buf[:8])!r}")
    magic, version, count, hlen = _PREFIX.unpack_from(buf, 0)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if hlen < _PREFIX.size + _CHECKSUM.size:
        raise CheckpointFormatError(f"implausible header length {hlen}")
    if len(buf) < hlen:
        raise TruncatedFile(f"header declares {hlen} bytes, only {len(buf)} available")
    body = bytes(buf[: hlen - _CHECKSUM.size])
    (stored,) = _CHECKSUM.unpack_from(buf, hlen - _CHECKSUM.size)
    if checksum64(body) != stored:
        raise ChecksumMismatch("<header>", "header checksum mismatch")
    pos = _PREFIX.size
    entries = []
    try:
        for _ in range(count):
            (klen,) = _KEYLEN.unpack_from(body, pos)
            pos += _KEYLEN.size
            key = body[pos:pos + klen].decode("utf-8")
            pos += klen
            offset, length, checksum = _ENTRY.unpack_from(body, pos)
            pos += _ENTRY.size
            entries.append(HeaderEntry(key, offset, length, checksum))
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointFormatError(f"malformed header entries: {exc}") from exc
    if pos != len(body):
        raise CheckpointFormatError("header length does not match its entries")
    header = CheckpointFileHeader(entries, version)
    header.validate()
    return header


def write_header(fp: BinaryIO, header: CheckpointFileHeader) -> int:
    """Write the encoded header at offset 0 of ``fp``; returns its length."""
    data = encode_header(header)
    fp.seek(0)
    fp.write(data)
    return len(data)


def _read_prefix(fp: BinaryIO) -> bytes:
    fp.seek(0)
    head = fp.read(_PREFIX.size)
    if len(head) < _PREFIX.size:
        return head
    _, _, _, hlen = _PREFIX.unpack(head)
    if head[:8] != MAGIC or hlen > 1 << 32:
        return head
    return head + fp.read(hlen - _PREFIX.size)


def read_header(fp: BinaryIO, verify: bool = True) -> CheckpointFileHeader:
    """Parse the header of ``fp``.

    With ``verify`` the file length is checked against the header extent and
    every payload checksum is validated (ChecksumMismatch names the entry).
    """
    header = decode_header(_read_prefix(fp))
    if verify:
        fp.seek(0, os.SEEK_END)
        size = fp.tell()
        if size < header.payload_end:
            raise TruncatedFile(f"file has {size} bytes, header declares {header.payload_end}")
        for e in header.entries:
            if checksum_region(fp, e.offset, e.length) != e.checksum:
                raise ChecksumMismatch(e.key)
    return header


def checksum_region(fp: BinaryIO, offset: int, length: int, block: int = 1 << 22) -> int:
    ck = RollingChecksum()
    fp.seek(offset)
    remaining = length
    while remaining:
        data = fp.read(min(block, remaining))
        if not data:
            raise TruncatedFile(f"payload ends early at {offset + length - remaining}")
        ck.update(data)
        remaining -= len(data)
    return ck.value


def read_entry(fp: BinaryIO, entry: HeaderEntry, verify: bool = True) -> bytes:
    fp.seek(entry.offset)
    data = fp.read(entry.length)
    if len(data) != entry.length:
        raise TruncatedFile(f"entry {entry.key!r} truncated")
    if verify and checksum64(data) != entry.checksum:
        raise ChecksumMismatch(entry.key)
    return data


PathLike = Union[str, os.PathLike]


def read_checkpoint_file(path: PathLike, verify: bool = True) -> Tuple[CheckpointFileHeader, Dict[str, bytes]]:
    with open(path, "rb") as fp:
        header = read_header(fp, verify=verify)
        return header, {e.key: read_entry(fp, e, verify=False) for e in header.entries}


def write_checkpoint_file(path: PathLike, payloads: List[Tuple[str, bytes]]) -> CheckpointFileHeader:
    """Synchronous one-shot writer (used for tests and the restore path)."""
    header = layout([(k, len(v)) for k, v in payloads])
    header = header.with_checksums({k: checksum64(v) for k, v in payloads})
    with open(path, "wb") as fp:
        write_header(fp, header)
        for e, (_, data) in zip(header.entries, payloads):
            fp.seek(e.offset)
            fp.write(data)
    return header
