"""Grayscale image files and synthetic noise.

Images live in [0, 1] as float arrays; quantization to 8 bits happens only
here.  Binary PGM (P5, maxval 255) is read and written directly; 8-bit
grayscale PNG goes through Pillow.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

__all__ = [
    "ImageFormatError",
    "MalformedHeaderError",
    "TruncatedDataError",
    "UnsupportedDepthError",
    "UnsupportedFormatError",
    "add_gaussian_noise",
    "decode_pgm",
    "encode_pgm",
    "load_image",
    "quantize",
    "save_image",
]

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class ImageFormatError(ValueError):
    """Base class for unreadable image files."""


class MalformedHeaderError(ImageFormatError):
    pass


class UnsupportedDepthError(ImageFormatError):
    pass


class TruncatedDataError(ImageFormatError):
    pass


class UnsupportedFormatError(ImageFormatError):
    pass


def quantize(u: np.ndarray) -> np.ndarray:
    """``round(255 clamp(u, 0, 1))`` as ``uint8``."""
    u = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(u)):
        raise ValueError("image contains non-finite values")
    return np.rint(255.0 * np.clip(u, 0.0, 1.0)).astype(np.uint8)


def _pgm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments.

    Returns the tokens and the offset just past the single whitespace byte
    that ends the last one.
    """
    tokens: list[bytes] = []
    pos = 0
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise MalformedHeaderError("PGM header ended early")
        tokens.append(data[start:pos])
    if pos >= n or not data[pos : pos + 1].isspace():
        raise MalformedHeaderError("PGM header must end with a single whitespace byte")
    return tokens, pos + 1


def decode_pgm(data: bytes) -> np.ndarray:
    """Decode P5 bytes to a float image in [0, 1]."""
    if data[:1] != b"P" or len(data) < 2:
        raise MalformedHeaderError("not a PNM file")
    magic = data[:2]
    if magic in (b"P1", b"P2", b"P3", b"P4", b"P6", b"P7"):
        raise UnsupportedFormatError(f"unsupported PNM variant {magic.decode()}; only P5 grayscale is read")
    if magic != b"P5":
        raise MalformedHeaderError(f"unknown magic {magic!r}")
    tokens, offset = _pgm_tokens(data[2:], 3)
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise MalformedHeaderError(f"non-numeric PGM header fields {tokens!r}")
    if width <= 0 or height <= 0 or maxval <= 0 or maxval > 65535:
        raise MalformedHeaderError(f"invalid PGM dimensions/maxval {width}x{height}/{maxval}")
    if maxval != 255:
        raise UnsupportedDepthError(f"maxval {maxval} not supported; only 8-bit (255) PGM is read")
    payload = data[2 + offset :]
    if len(payload) < width * height:
        raise TruncatedDataError(f"PGM payload has {len(payload)} bytes, expected {width * height}")
    pixels = np.frombuffer(payload, dtype=np.uint8, count=width * height)
    return pixels.reshape(height, width).astype(float) / 255.0


def encode_pgm(u: np.ndarray) -> bytes:
    q = quantize(u)
    if q.ndim != 2:
        raise ValueError("only 2-D grayscale images can be written")
    h, w = q.shape
    return b"P5\n%d %d\n255\n" % (w, h) + q.tobytes()


def _decode_png(data: bytes) -> np.ndarray:
    try:
        img = Image.open(io.BytesIO(data))
    except UnidentifiedImageError as exc:
        raise MalformedHeaderError(f"unreadable PNG header: {exc}")
    if img.mode in ("I;16", "I;16B", "I", "1"):
        raise UnsupportedDepthError(f"PNG mode {img.mode} not supported; only 8-bit grayscale")
    if img.mode != "L":
        raise UnsupportedFormatError(f"PNG mode {img.mode} not supported; only 8-bit grayscale")
    try:
        img.load()
    except (OSError, SyntaxError) as exc:
        raise TruncatedDataError(f"PNG payload unreadable: {exc}")
    return np.asarray(img, dtype=np.uint8).astype(float) / 255.0


def load_image(path) -> np.ndarray:
    """Read a P5 PGM or 8-bit grayscale PNG as floats in [0, 1]."""
    data = Path(path).read_bytes()
    if data.startswith(PNG_SIGNATURE):
        return _decode_png(data)
    if data[:1] == b"P":
        return decode_pgm(data)
    raise UnsupportedFormatError(f"{path}: neither PGM nor PNG")


def save_image(u: np.ndarray, path) -> None:
    """Write ``u`` quantized to 8 bits; ``.png`` suffix selects PNG, anything else P5."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        q = quantize(u)
        if q.ndim != 2:
            raise ValueError("only 2-D grayscale images can be written")
        Image.fromarray(q).save(path, format="PNG")
    else:
        path.write_bytes(encode_pgm(u))


def add_gaussian_noise(u: np.ndarray, sigma: float, seed: int, mask=None) -> np.ndarray:
    """``u + sigma * mask * n`` with ``n`` standard normal.

    ``n`` comes from a counter-based Philox stream keyed by ``seed`` and
    read in raster order, so pixel ``i`` always receives draw ``i``.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    u = np.asarray(u, dtype=float)
    if sigma == 0:
        return u.copy()
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    noise = rng.standard_normal(u.size).reshape(u.shape)
    scale = sigma if mask is None else sigma * np.broadcast_to(np.asarray(mask, dtype=float), u.shape)
    return u + scale * noise
