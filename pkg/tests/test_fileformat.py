import io
import os
import random
import struct

import pytest
from hypothesis import given, settings, strategies as st

from lazyckpt.errors import BadMagic, CheckpointFormatError, ChecksumMismatch, TruncatedFile
from lazyckpt.fileformat import (
    MAGIC,
    CheckpointFileHeader,
    HeaderEntry,
    checksum64,
    decode_header,
    encode_header,
    header_length,
    layout,
    read_checkpoint_file,
    read_header,
    write_checkpoint_file,
    write_header,
)


def random_header(rng: random.Random) -> CheckpointFileHeader:
    n = rng.randint(0, 12)
    keys = []
    while len(keys) < n:
        k = "".join(rng.choice("abcxyz/_.0123é") for _ in range(rng.randint(1, 24)))
        if k not in keys:
            keys.append(k)
    pos = header_length(keys)
    entries = []
    for k in keys:
        pos += rng.choice([0, 0, rng.randint(1, 64)])  # optional gaps
        length = rng.randint(0, 2**40)
        entries.append(HeaderEntry(k, pos, length, rng.getrandbits(64)))
        pos += length
    return CheckpointFileHeader(entries)


def test_empty_header_roundtrip():
    h = CheckpointFileHeader([])
    buf = io.BytesIO()
    n = write_header(buf, h)
    assert n == h.header_length == len(buf.getvalue())
    buf.seek(0)
    assert read_header(buf) == h


def test_layout_example_three_entries(tmp_path):
    payloads = [("L1", os.urandom(100)), ("L2", os.urandom(50)), ("optimizer", os.urandom(600))]
    path = tmp_path / "s.ckpt"
    h = write_checkpoint_file(path, payloads)
    offsets = [e.offset for e in h.entries]
    assert offsets == sorted(offsets) and offsets[0] == h.header_length
    assert sum(e.length for e in h.entries) == 750
    assert os.path.getsize(path) == h.payload_end
    h2, data = read_checkpoint_file(path)
    assert h2 == h and data == dict(payloads)


def test_known_layout_is_little_endian():
    h = layout([("ab", 3)])
    raw = encode_header(h)
    assert raw[:8] == MAGIC
    version, count, hlen = struct.unpack_from("<IIQ", raw, 8)
    assert (version, count, hlen) == (1, 1, len(raw))
    assert struct.unpack_from("<H", raw, 24)[0] == 2 and raw[26:28] == b"ab"
    offset, length, _ = struct.unpack_from("<QQQ", raw, 28)
    assert (offset, length) == (len(raw), 3)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32))
def test_header_roundtrip_property(seed):
    h = random_header(random.Random(seed))
    raw = encode_header(h)
    assert decode_header(raw) == h
    assert encode_header(decode_header(raw)) == raw


def test_bad_magic():
    raw = bytearray(encode_header(layout([("x", 1)])))
    raw[0] ^= 0xFF
    with pytest.raises(BadMagic):
        decode_header(bytes(raw))


def test_truncated_header():
    raw = encode_header(layout([("x", 1), ("y", 2)]))
    with pytest.raises(TruncatedFile):
        decode_header(raw[:-3])
    with pytest.raises(TruncatedFile):
        decode_header(raw[:5])


def test_truncated_payload(tmp_path):
    path = tmp_path / "t.ckpt"
    write_checkpoint_file(path, [("a", b"x" * 100)])
    with open(path, "r+b") as fp:
        fp.truncate(os.path.getsize(path) - 1)
    with open(path, "rb") as fp:
        with pytest.raises(TruncatedFile):
            read_header(fp)


def test_header_corruption_detected():
    raw = encode_header(layout([("key", 10)]))
    for i in range(8, len(raw)):
        bad = bytearray(raw)
        bad[i] ^= 0x01
        with pytest.raises(CheckpointFormatError):
            decode_header(bytes(bad))


def test_payload_corruption_names_entry(tmp_path):
    payloads = [("L1", os.urandom(64)), ("L2", os.urandom(64)), ("opt", os.urandom(64))]
    path = tmp_path / "c.ckpt"
    h = write_checkpoint_file(path, payloads)
    target = h.entry("L2")
    with open(path, "r+b") as fp:
        fp.seek(target.offset + 17)
        b = fp.read(1)
        fp.seek(target.offset + 17)
        fp.write(bytes([b[0] ^ 0x40]))
    with pytest.raises(ChecksumMismatch) as info:
        read_checkpoint_file(path)
    assert info.value.key == "L2"


def test_overlapping_entries_rejected():
    hlen = header_length(["a", "b"])
    h = CheckpointFileHeader([HeaderEntry("a", hlen, 10), HeaderEntry("b", hlen + 5, 10)])
    with pytest.raises(CheckpointFormatError):
        encode_header(h)
    with pytest.raises(CheckpointFormatError):
        encode_header(CheckpointFileHeader([HeaderEntry("a", 0, 1)]))  # inside the header


def test_checksum_is_incremental():
    data = os.urandom(10_000)
    from lazyckpt.fileformat import RollingChecksum

    r = RollingChecksum()
    for i in range(0, len(data), 333):
        r.update(data[i:i + 333])
    assert r.value == checksum64(data)
