"""Minimal PNG decoding, standard library only.

The bridge owns image loading, and the stub backend only needs pixel access
good enough to find a uniformly colored region: 8-bit RGB or RGBA PNGs with
the five standard row filters. Anything fancier (palettes, interlacing,
16-bit channels) is out of scope and raises, which the server reports as an
image-load failure.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"

Pixel = tuple[int, int, int]


def _paeth(a: int, b: int, c: int) -> int:
    p = a + b - c
    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
    if pa <= pb and pa <= pc:
        return a
    if pb <= pc:
        return b
    return c


def read_png(path: str | Path) -> tuple[int, int, list[list[Pixel]]]:
    """Decode a PNG into (width, height, rows of RGB pixels)."""
    data = Path(path).read_bytes()
    if data[:8] != PNG_MAGIC:
        raise ValueError(f"{path} is not a PNG file")
    pos = 8
    width = height = 0
    color_type = bit_depth = 0
    idat = bytearray()
    while pos + 8 <= len(data):
        length, tag = struct.unpack(">I4s", data[pos:pos + 8])
        body = data[pos + 8:pos + 8 + length]
        pos += 12 + length
        if tag == b"IHDR":
            width, height, bit_depth, color_type, _, _, interlace = struct.unpack(
                ">IIBBBBB", body
            )
            if bit_depth != 8 or color_type not in (2, 6) or interlace != 0:
                raise ValueError(
                    f"{path}: only 8-bit non-interlaced RGB/RGBA PNGs are supported"
                )
        elif tag == b"IDAT":
            idat.extend(body)
        elif tag == b"IEND":
            break
    if not width or not height:
        raise ValueError(f"{path}: missing image header")
    channels = 3 if color_type == 2 else 4
    raw = zlib.decompress(bytes(idat))
    stride = width * channels
    if len(raw) != height * (stride + 1):
        raise ValueError(f"{path}: pixel data has the wrong length")

    rows: list[list[Pixel]] = []
    previous = bytearray(stride)
    for y in range(height):
        offset = y * (stride + 1)
        filter_type = raw[offset]
        line = bytearray(raw[offset + 1:offset + 1 + stride])
        if filter_type == 1:
            for i in range(channels, stride):
                line[i] = (line[i] + line[i - channels]) & 0xFF
        elif filter_type == 2:
            for i in range(stride):
                line[i] = (line[i] + previous[i]) & 0xFF
        elif filter_type == 3:
            for i in range(stride):
                left = line[i - channels] if i >= channels else 0
                line[i] = (line[i] + (left + previous[i]) // 2) & 0xFF
        elif filter_type == 4:
            for i in range(stride):
                left = line[i - channels] if i >= channels else 0
                above_left = previous[i - channels] if i >= channels else 0
                line[i] = (line[i] + _paeth(left, previous[i], above_left)) & 0xFF
        elif filter_type != 0:
            raise ValueError(f"{path}: unknown row filter {filter_type}")
        rows.append(
            [tuple(line[x * channels:x * channels + 3]) for x in range(width)]
        )
        previous = line
    return width, height, rows
