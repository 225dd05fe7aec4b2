"""
"SUMN" checkpoint container.

Layout (little-endian): magic "SUMN", version u32, entry count u32, then per
entry a u16 name length, UTF-8 name, u8 rank, rank x u32 dims and the f64
payload in row-major order. A CRC32 of every preceding byte closes the file.
"""
import os
import struct
import zlib
from collections import OrderedDict

import numpy as np

from .config import CHECKPOINT_MAGIC, CHECKPOINT_VERSION
from .errors import FormatError
from .utils import get_logger

logger = get_logger(__name__)


def encode_entries(entries):
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr, dtype="<f8")
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise FormatError(f"entry name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise FormatError(f"entry {name} has rank {arr.ndim}")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, buf, label):
        self.buf = buf
        self.pos = 0
        self.label = label

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint: {self.label}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_entries(buf, label="<bytes>"):
    if len(buf) < 4 or buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"not a SUMN checkpoint (bad magic): {label}")
    if len(buf) < 16:
        raise FormatError(f"truncated checkpoint: {label}")
    body = buf[:-4]
    reader = _Reader(body, label)
    reader.take(4)
    version, count = reader.unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}: {label}")

    entries = OrderedDict()
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (rank,) = reader.unpack("<B")
        dims = reader.unpack(f"<{rank}I") if rank else ()
        size = int(np.prod(dims)) if rank else 1
        payload = reader.take(8 * size)
        entries[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
    if reader.pos != len(body):
        raise FormatError(f"trailing bytes before checksum: {label}")

    (stored_crc,) = struct.unpack("<I", buf[-4:])
    if stored_crc != (zlib.crc32(body) & 0xFFFFFFFF):
        raise FormatError(f"checksum mismatch: {label}")
    return entries


def write_checkpoint(path, entries):
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(encode_entries(entries))
    os.replace(tmp, path)
    logger.debug("wrote %d entries to %s", len(entries), path)
    return path


def read_checkpoint(path):
    if not os.path.exists(path):
        raise FormatError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        buf = f.read()
    return decode_entries(buf, label=path)
