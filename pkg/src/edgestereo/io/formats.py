"""Readers and writers for PGM/PNG images, PFM disparity maps and GT masks.

Every parser works on an in-memory byte string, so a missing file surfaces as
an ``OSError`` while malformed content always raises :class:`FormatError`.
"""

from __future__ import annotations

import io
import os
import re
import tempfile
from pathlib import Path

import numpy as np

from ..errors import FormatError, ValidationError
from ..model import ImageBuf
from ..stereo import DisparityMap

# Refuse headers that would allocate absurd buffers before the length check.
MAX_PIXELS = 1 << 28

_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*([^\s#]+)")


def atomic_write(path, data: bytes):
    """Write ``data`` to a temporary sibling file and rename it over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dims(w, h, where):
    if w <= 0 or h <= 0:
        raise FormatError(f"{where}: dimensions must be positive, got {w}x{h}")
    if w * h > MAX_PIXELS:
        raise FormatError(f"{where}: {w}x{h} exceeds the supported frame size")


def parse_pgm(data: bytes, where: str = "<pgm>") -> ImageBuf:
    if data[:2] != b"P5":
        raise FormatError(f"{where}: magic is {data[:2]!r}, expected b'P5' (binary PGM)")
    pos = 2
    fields = []
    for name in ("width", "height", "maxval"):
        m = _PGM_TOKEN.match(data, pos)
        if not m:
            raise FormatError(f"{where}: header ends before the {name} field")
        try:
            fields.append(int(m.group(1)))
        except ValueError:
            raise FormatError(f"{where}: {name} field {m.group(1)[:16]!r} is not an integer") from None
        pos = m.end()
    w, h, maxval = fields
    _dims(w, h, where)
    if maxval > 255:
        raise FormatError(f"{where}: maxval {maxval} means 16-bit samples; only 8-bit PGM is supported")
    if maxval < 1:
        raise FormatError(f"{where}: maxval must be in [1, 255], got {maxval}")
    if pos >= len(data) or data[pos:pos + 1] not in (b" ", b"\t", b"\n", b"\r"):
        raise FormatError(f"{where}: missing whitespace after the maxval field")
    payload = data[pos + 1:]
    if len(payload) != w * h:
        raise FormatError(f"{where}: header declares {w * h} pixel bytes, file holds {len(payload)}")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(h, w)
    if pixels.max() > maxval:
        raise FormatError(f"{where}: pixel value {pixels.max()} exceeds maxval {maxval}")
    return ImageBuf(pixels.astype(np.float64))


def image_bytes(image: ImageBuf) -> np.ndarray:
    return np.clip(np.floor(image.pixels + 0.5), 0, 255).astype(np.uint8)


def encode_pgm(image: ImageBuf) -> bytes:
    header = f"P5\n{image.width} {image.height}\n255\n".encode("ascii")
    return header + image_bytes(image).tobytes()


def _pil():
    from PIL import Image
    return Image


def parse_png(data: bytes, where: str = "<png>") -> np.ndarray:
    """Decode an 8-bit grayscale PNG to a uint8 array."""
    Image = _pil()
    try:
        with Image.open(io.BytesIO(data)) as img:
            mode = img.mode
            if mode != "L":
                raise FormatError(
                    f"{where}: PNG mode is {mode!r}; only 8-bit grayscale ('L') is supported")
            img.load()
            arr = np.asarray(img, dtype=np.uint8).copy()
    except FormatError:
        raise
    except Exception as exc:  # PIL raises a wide variety of types on corrupt data
        raise FormatError(f"{where}: unreadable PNG ({type(exc).__name__}: {exc})") from None
    if arr.ndim != 2 or arr.size == 0:
        raise FormatError(f"{where}: PNG is not a single-channel raster")
    return arr


def encode_png(pixels: np.ndarray) -> bytes:
    Image = _pil()
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8), mode="L").save(buf, format="PNG")
    return buf.getvalue()


def load_image(path) -> ImageBuf:
    data = Path(path).read_bytes()
    if data[:2] == b"P5":
        return parse_pgm(data, str(path))
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        return ImageBuf(parse_png(data, str(path)).astype(np.float64))
    raise FormatError(f"{path}: magic {data[:4]!r} is neither binary PGM nor PNG")


def save_image(image: ImageBuf, path):
    path = Path(path)
    if path.suffix.lower() == ".png":
        atomic_write(path, encode_png(image_bytes(image)))
    else:
        atomic_write(path, encode_pgm(image))


def visualization(dmap: DisparityMap, max_disparity: float | None = None) -> np.ndarray:
    v = dmap.values
    finite = np.isfinite(v)
    top = max_disparity if max_disparity else (float(v[finite].max()) if finite.any() else 0.0)
    out = np.zeros(v.shape, dtype=np.uint8)
    if top > 0:
        scaled = np.clip(np.where(finite, v, 0) * (255.0 / top), 0, 255)
        out = np.where(finite, np.floor(scaled + 0.5), 0).astype(np.uint8)
    return out


def save_visualization(dmap: DisparityMap, path, max_disparity: float | None = None):
    """8-bit PNG, disparities mapped linearly onto [0, 255], invalid pixels black."""
    atomic_write(path, encode_png(visualization(dmap, max_disparity)))


def parse_pfm(data: bytes, where: str = "<pfm>") -> DisparityMap:
    lines = []
    pos = 0
    for name in ("magic", "dimensions", "scale"):
        end = data.find(b"\n", pos)
        if end < 0 or end - pos > 64:
            raise FormatError(f"{where}: truncated header while reading the {name} line")
        lines.append(data[pos:end].strip())
        pos = end + 1
    magic, dims, scale_text = lines
    if magic == b"PF":
        raise FormatError(f"{where}: colour PFM ('PF') is not supported; expected 'Pf'")
    if magic != b"Pf":
        raise FormatError(f"{where}: magic is {magic[:8]!r}, expected b'Pf'")
    parts = dims.split()
    if len(parts) != 2:
        raise FormatError(f"{where}: dimension line {dims[:32]!r} must hold width and height")
    try:
        w, h = int(parts[0]), int(parts[1])
    except ValueError:
        raise FormatError(f"{where}: non-numeric dimensions {dims[:32]!r}") from None
    _dims(w, h, where)
    try:
        scale = float(scale_text)
    except ValueError:
        raise FormatError(f"{where}: non-numeric scale {scale_text[:32]!r}") from None
    if scale == 0 or not np.isfinite(scale):
        raise FormatError(f"{where}: scale must be finite and nonzero, got {scale}")
    payload = data[pos:]
    if len(payload) != 4 * w * h:
        raise FormatError(f"{where}: header declares {4 * w * h} payload bytes, file holds {len(payload)}")
    dtype = "<f4" if scale < 0 else ">f4"
    values = np.frombuffer(payload, dtype=dtype).reshape(h, w)[::-1]
    return DisparityMap(values.astype(np.float64))


def encode_pfm(dmap: DisparityMap) -> bytes:
    v = np.asarray(dmap.values, dtype="<f4")
    header = f"Pf\n{v.shape[1]} {v.shape[0]}\n-1.0\n".encode("ascii")
    return header + np.ascontiguousarray(v[::-1]).tobytes()


def read_pfm(path) -> DisparityMap:
    return parse_pfm(Path(path).read_bytes(), str(path))


def write_pfm(dmap: DisparityMap, path):
    atomic_write(path, encode_pfm(dmap))


def load_mask(path) -> np.ndarray:
    """MiddEval3-style mask: 255 non-occluded, 128 occluded, 0 undefined."""
    mask = parse_png(Path(path).read_bytes(), str(path))
    bad = ~np.isin(mask, (0, 128, 255))
    if bad.any():
        raise FormatError(f"{path}: mask value {mask[bad][0]} is not one of 0, 128, 255")
    return mask


def save_mask(mask: np.ndarray, path):
    if not np.isin(mask, (0, 128, 255)).all():
        raise ValidationError("mask values must be 0, 128 or 255")
    atomic_write(path, encode_png(mask.astype(np.uint8)))
