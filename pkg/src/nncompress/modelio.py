"""NCMF model files and JSON report files.

NCMF layout, all integers little-endian::

    "NCMF"                      4 bytes magic
    version                     u16 (= 1)
    arch name                   u16 length + UTF-8 bytes
    repeated until the checksum, one per weight class:
        class id                u16 length + UTF-8 bytes
        dtype code              u8 (0 = float32)
        rank                    u8
        dims                    rank x u32
        weights                 4 * prod(dims) bytes, float32
        mask                    ceil(prod(dims) / 8) bytes, LSB-first bit packing, zero padded
    checksum                    u32 CRC-32 of every preceding byte
"""

import json
import math
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import (BadMagicError, ChecksumError, InvalidInputError, ParseError,
                     TruncatedFileError, UnsupportedVersionError)
from .model import build_from_arch

MAGIC = b"NCMF"
VERSION = 1
DTYPE_F32 = 0


def _pack_str(s):
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def encode_model(model):
    parts = [MAGIC, struct.pack("<H", VERSION), _pack_str(model.arch_name)]
    for cid, p in model.params.items():
        mask = model.masks[cid]
        parts.append(_pack_str(cid))
        parts.append(struct.pack("<BB", DTYPE_F32, p.ndim))
        parts.append(struct.pack(f"<{p.ndim}I", *p.shape))
        parts.append(np.ascontiguousarray(p, dtype="<f4").tobytes())
        parts.append(np.packbits(mask.ravel(), bitorder="little").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf, end):
        self.buf, self.pos, self.end = buf, 0, end

    def take(self, n):
        if self.pos + n > self.end:
            raise TruncatedFileError(f"file truncated at byte {self.pos} (needed {n} more bytes)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self):
        (n,) = self.unpack("<H")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"invalid UTF-8 string at byte {self.pos}") from exc


def decode_model(buf):
    if len(buf) < 6:
        raise TruncatedFileError("file too short for an NCMF header")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<H", buf[4:6])
    if version != VERSION:
        raise UnsupportedVersionError(f"NCMF version {version} is not supported (expected {VERSION})")
    if len(buf) < 10:
        raise TruncatedFileError("file too short for an NCMF checksum")
    r = _Reader(buf, len(buf) - 4)
    r.take(6)
    arch = r.string()
    params, masks = {}, {}
    while r.pos < r.end:
        cid = r.string()
        dtype, rank = r.unpack("<BB")
        if dtype != DTYPE_F32:
            raise ParseError(f"{cid}: unsupported dtype code {dtype}")
        dims = r.unpack(f"<{rank}I")
        n = math.prod(dims)
        params[cid] = np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float32).reshape(dims)
        bits = np.frombuffer(r.take((n + 7) // 8), dtype=np.uint8)
        masks[cid] = np.unpackbits(bits, count=n, bitorder="little").astype(bool).reshape(dims)
    (stored,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != stored:
        raise ChecksumError("NCMF checksum mismatch")
    try:
        model = build_from_arch(arch)
    except InvalidInputError as exc:
        raise ParseError(str(exc)) from exc
    expected = {k: v.shape for k, v in model.params.items()}
    if {k: v.shape for k, v in params.items()} != expected:
        raise ParseError(f"weight classes in file do not match architecture {arch!r}")
    model.params = {k: params[k].copy() for k in expected}
    model.masks = {k: masks[k] for k in expected}
    return model


def save_model(model, path):
    Path(path).write_bytes(encode_model(model))


def load_model(path):
    return decode_model(Path(path).read_bytes())


def dumps_json(obj):
    return json.dumps(obj, indent=2, allow_nan=False) + "\n"


def save_report(report, path, format="json"):
    if format != "json":
        raise InvalidInputError(f"unsupported report format {format!r}")
    Path(path).write_text(dumps_json(report.to_dict()))


def load_report(path):
    from .report import CompressionReport
    try:
        return CompressionReport.from_dict(json.loads(Path(path).read_text()))
    except (json.JSONDecodeError, KeyError) as exc:
        raise ParseError(f"cannot read report {path}: {exc}") from exc
