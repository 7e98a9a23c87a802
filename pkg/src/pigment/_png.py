"""Minimal PNG reader/writer (non-interlaced, 8/16-bit gray, RGB, RGBA, palette)."""

import struct
import zlib

import numpy as np

from .errors import ImageFormatError

SIGNATURE = b"\x89PNG\r\n\x1a\n"
_CHANNELS = {0: 1, 2: 3, 3: 1, 4: 2, 6: 4}


def _chunks(data):
    pos = len(SIGNATURE)
    while pos < len(data):
        if pos + 8 > len(data):
            raise ImageFormatError("truncated PNG chunk header")
        length, kind = struct.unpack(">I4s", data[pos:pos + 8])
        body = data[pos + 8:pos + 8 + length]
        if len(body) != length or pos + 12 + length > len(data):
            raise ImageFormatError("truncated PNG chunk")
        (crc,) = struct.unpack(">I", data[pos + 8 + length:pos + 12 + length])
        if zlib.crc32(kind + body) & 0xFFFFFFFF != crc:
            raise ImageFormatError(f"bad CRC in PNG chunk {kind!r}")
        yield kind, body
        pos += 12 + length


def _paeth(a, b, c):
    p = a + b - c
    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
    if pa <= pb and pa <= pc:
        return a
    return b if pb <= pc else c


def _unfilter(raw, height, stride, bpp):
    out = np.zeros((height, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.int32)
    pos = 0
    for y in range(height):
        ftype = raw[pos]
        line = np.frombuffer(raw, dtype=np.uint8, count=stride, offset=pos + 1).astype(np.int32)
        pos += stride + 1
        if ftype == 0:
            cur = line
        elif ftype == 1:
            cur = (line.reshape(-1, bpp).cumsum(axis=0) & 0xFF).ravel()
        elif ftype == 2:
            cur = (line + prev) & 0xFF
        elif ftype == 3:
            cur = line.copy()
            for i in range(stride):
                left = cur[i - bpp] if i >= bpp else 0
                cur[i] = (cur[i] + ((left + prev[i]) >> 1)) & 0xFF
        elif ftype == 4:
            cur = line.copy()
            for i in range(stride):
                left = cur[i - bpp] if i >= bpp else 0
                upleft = prev[i - bpp] if i >= bpp else 0
                cur[i] = (cur[i] + _paeth(left, prev[i], upleft)) & 0xFF
        else:
            raise ImageFormatError(f"unknown PNG filter type {ftype}")
        out[y] = cur
        prev = cur
    return out


def read_png(data: bytes):
    """Decode PNG bytes into ``(array uint8/uint16 of shape (H, W, C), bit depth)``."""
    if not data.startswith(SIGNATURE):
        raise ImageFormatError("not a PNG file")
    header = None
    palette = None
    idat = []
    for kind, body in _chunks(data):
        if kind == b"IHDR":
            header = struct.unpack(">IIBBBBB", body)
        elif kind == b"PLTE":
            palette = np.frombuffer(body, dtype=np.uint8).reshape(-1, 3)
        elif kind == b"IDAT":
            idat.append(body)
        elif kind == b"IEND":
            break
    if header is None:
        raise ImageFormatError("PNG without IHDR")
    width, height, depth, ctype, _, _, interlace = header
    if width == 0 or height == 0:
        raise ImageFormatError("PNG has zero dimensions")
    if interlace:
        raise ImageFormatError("interlaced PNG is not supported")
    if ctype not in _CHANNELS or depth not in (8, 16):
        raise ImageFormatError(f"unsupported PNG color type {ctype} / depth {depth}")
    try:
        raw = zlib.decompress(b"".join(idat))
    except zlib.error as exc:
        raise ImageFormatError(f"corrupt PNG data: {exc}") from None
    chans = _CHANNELS[ctype]
    bpp = chans * depth // 8
    stride = width * bpp
    if len(raw) < height * (stride + 1):
        raise ImageFormatError("truncated PNG image data")
    rows = _unfilter(raw, height, stride, bpp)
    if depth == 16:
        arr = rows.view(">u2").astype(np.uint16).reshape(height, width, chans)
    else:
        arr = rows.reshape(height, width, chans)
    if ctype == 3:
        if palette is None:
            raise ImageFormatError("palette PNG without PLTE")
        arr = palette[arr[..., 0]]
    return arr, depth


def _chunk(kind, body):
    return struct.pack(">I", len(body)) + kind + body + struct.pack(">I", zlib.crc32(kind + body) & 0xFFFFFFFF)


def write_png(arr, depth: int) -> bytes:
    """Encode an ``(H, W, 3)`` integer array as an RGB PNG (filter type 0)."""
    h, w, _ = arr.shape
    if depth == 16:
        body = arr.astype(">u2").tobytes()
    else:
        body = arr.astype(np.uint8).tobytes()
    stride = len(body) // h
    lines = b"".join(b"\x00" + body[y * stride:(y + 1) * stride] for y in range(h))
    ihdr = struct.pack(">IIBBBBB", w, h, depth, 2, 0, 0, 0)
    return SIGNATURE + _chunk(b"IHDR", ihdr) + _chunk(b"IDAT", zlib.compress(lines, 6)) + _chunk(b"IEND", b"")
