"""Minimal PNG I/O: 16-bit grayscale in/out, 8-bit RGB out for figures.

Writes use filter type 0 everywhere; reads understand all five row filters
so grayscale files produced by other encoders load too. Samples are
big-endian per the PNG byte order.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

_SIGNATURE = bytes([137, 80, 78, 71, 13, 10, 26, 10])


class PngFormatError(Exception):
    """Structurally invalid or unsupported PNG."""


class UnsupportedDepth(PngFormatError):
    """PNG bit depth other than 16-bit grayscale."""


def _chunk(tag: bytes, payload: bytes) -> bytes:
    crc = zlib.crc32(tag + payload) & 0xFFFFFFFF
    return struct.pack(">I", len(payload)) + tag + payload + struct.pack(">I", crc)


def encode_gray16(pixels: np.ndarray) -> bytes:
    """Encode an (h, w) uint16 array as a 16-bit grayscale PNG byte string."""
    if pixels.ndim != 2:
        raise ValueError("expected an (h, w) pixel array")
    h, w = pixels.shape
    ihdr = struct.pack(">IIBBBBB", w, h, 16, 0, 0, 0, 0)
    rows = pixels.astype(">u2").tobytes()
    stride = 2 * w
    raw = b"".join(b"\x00" + rows[i * stride : (i + 1) * stride] for i in range(h))
    return (
        _SIGNATURE
        + _chunk(b"IHDR", ihdr)
        + _chunk(b"IDAT", zlib.compress(raw, 6))
        + _chunk(b"IEND", b"")
    )


def _unfilter(raw: bytes, height: int, stride: int, bpp: int) -> bytearray:
    out = bytearray(height * stride)
    prev = bytearray(stride)
    pos = 0
    for y in range(height):
        ftype = raw[pos]
        line = bytearray(raw[pos + 1 : pos + 1 + stride])
        pos += 1 + stride
        if ftype == 0:
            pass
        elif ftype == 1:  # Sub
            for i in range(bpp, stride):
                line[i] = (line[i] + line[i - bpp]) & 0xFF
        elif ftype == 2:  # Up
            for i in range(stride):
                line[i] = (line[i] + prev[i]) & 0xFF
        elif ftype == 3:  # Average
            for i in range(stride):
                left = line[i - bpp] if i >= bpp else 0
                line[i] = (line[i] + ((left + prev[i]) >> 1)) & 0xFF
        elif ftype == 4:  # Paeth
            for i in range(stride):
                a = line[i - bpp] if i >= bpp else 0
                b = prev[i]
                c = prev[i - bpp] if i >= bpp else 0
                p = a + b - c
                pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
                if pa <= pb and pa <= pc:
                    pred = a
                elif pb <= pc:
                    pred = b
                else:
                    pred = c
                line[i] = (line[i] + pred) & 0xFF
        else:
            raise PngFormatError(f"unknown row filter {ftype}")
        out[y * stride : (y + 1) * stride] = line
        prev = line
    return out


def decode_gray16(blob: bytes) -> np.ndarray:
    """Decode a 16-bit grayscale PNG byte string to an (h, w) uint16 array."""
    if blob[: len(_SIGNATURE)] != _SIGNATURE:
        raise PngFormatError("bad PNG signature")
    pos = len(_SIGNATURE)
    width = height = None
    idat = b""
    while pos + 8 <= len(blob):
        (length,) = struct.unpack_from(">I", blob, pos)
        tag = blob[pos + 4 : pos + 8]
        payload = blob[pos + 8 : pos + 8 + length]
        if len(payload) < length:
            raise PngFormatError("truncated chunk")
        (crc,) = struct.unpack_from(">I", blob, pos + 8 + length)
        if crc != (zlib.crc32(tag + payload) & 0xFFFFFFFF):
            raise PngFormatError(f"bad CRC in {tag!r} chunk")
        pos += 12 + length
        if tag == b"IHDR":
            width, height, depth, color, comp, filt, interlace = struct.unpack(
                ">IIBBBBB", payload
            )
            if depth != 16:
                raise UnsupportedDepth(f"expected 16-bit depth, got {depth}")
            if color != 0:
                raise PngFormatError(f"expected grayscale (color type 0), got {color}")
            if comp or filt:
                raise PngFormatError("nonstandard compression or filter method")
            if interlace:
                raise PngFormatError("interlaced PNG not supported")
        elif tag == b"IDAT":
            idat += payload
        elif tag == b"IEND":
            break
    if width is None:
        raise PngFormatError("missing IHDR")
    if not idat:
        raise PngFormatError("missing IDAT")

    stride = 2 * width
    raw = zlib.decompress(idat)
    if len(raw) != height * (stride + 1):
        raise PngFormatError("IDAT size does not match dimensions")
    data = _unfilter(raw, height, stride, bpp=2)
    return np.frombuffer(bytes(data), dtype=">u2").reshape(height, width).astype(np.uint16)


def write_png(pixels_or_image, path, meta=None) -> None:
    """Write a 16-bit grayscale PNG (GrayImage or uint16 array).

    When `meta` is given its key=value sidecar is written next to the
    image (same stem, .meta suffix).
    """
    pixels = getattr(pixels_or_image, "pixels", pixels_or_image)
    Path(path).write_bytes(encode_gray16(np.asarray(pixels)))
    if meta is not None:
        meta.write(Path(path).with_suffix(".meta"))


def read_png(path):
    """Read a 16-bit grayscale PNG into a GrayImage."""
    from melfix.codec import GrayImage

    pixels = decode_gray16(Path(path).read_bytes())
    return GrayImage(pixels)


def encode_rgb8(pixels: np.ndarray) -> bytes:
    """Encode an (h, w, 3) uint8 array as an 8-bit RGB PNG byte string."""
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError("expected an (h, w, 3) pixel array")
    h, w = pixels.shape[:2]
    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    rows = pixels.astype(np.uint8).tobytes()
    stride = 3 * w
    raw = b"".join(b"\x00" + rows[i * stride : (i + 1) * stride] for i in range(h))
    return (
        _SIGNATURE
        + _chunk(b"IHDR", ihdr)
        + _chunk(b"IDAT", zlib.compress(raw, 6))
        + _chunk(b"IEND", b"")
    )


def write_png_rgb8(pixels: np.ndarray, path) -> None:
    Path(path).write_bytes(encode_rgb8(pixels))


def read_png_header(path) -> tuple[int, int, int, int]:
    """Return (width, height, bit_depth, color_type) without decoding."""
    blob = Path(path).read_bytes()
    if blob[: len(_SIGNATURE)] != _SIGNATURE or blob[12:16] != b"IHDR":
        raise PngFormatError("bad PNG signature")
    width, height, depth, color = struct.unpack_from(">IIBB", blob, 16)
    return width, height, depth, color
