"""Image file I/O: binary PGM (P5) as the mandatory format, PNG optional."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .errors import DataError

__all__ = [
    "read_pgm",
    "write_pgm",
    "write_ppm",
    "read_image",
    "list_frame_files",
]

FRAME_EXTENSIONS = (".pgm", ".png")


def _read_pnm_tokens(data: bytes, count: int, path) -> tuple[list[int], int]:
    """Parse `count` whitespace/comment-separated header integers; return
    them plus the offset just past the single whitespace ending the header."""
    tokens: list[int] = []
    pos = 0
    while len(tokens) < count:
        if pos >= len(data):
            raise DataError(f"{path}: truncated header")
        ch = data[pos : pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            eol = data.find(b"\n", pos)
            pos = len(data) if eol < 0 else eol + 1
        else:
            m = re.match(rb"\d+", data[pos:])
            if not m:
                raise DataError(f"{path}: malformed header near byte {pos}")
            tokens.append(int(m.group()))
            pos += m.end()
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise DataError(f"{path}: missing whitespace after header")
    return tokens, pos + 1


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM (P5) into a float image normalized to [0, 1]."""
    data = Path(path).read_bytes()
    if not data.startswith(b"P5"):
        raise DataError(f"{path}: not a binary PGM (P5) file")
    (width, height, maxval), offset = _read_pnm_tokens(data[2:], 3, path)
    offset += 2
    if maxval < 1 or maxval > 65535:
        raise DataError(f"{path}: unsupported maxval {maxval}")
    dtype = np.uint8 if maxval < 256 else ">u2"
    count = width * height
    itemsize = 1 if maxval < 256 else 2
    if len(data) - offset < count * itemsize:
        raise DataError(f"{path}: truncated pixel data")
    pixels = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
    return pixels.reshape(height, width).astype(np.float64) / maxval


def write_pgm(path, image: np.ndarray) -> None:
    """Write an 8-bit binary PGM; float inputs are quantized by round(255*v)."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise DataError("PGM output requires a 2-D image")
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + img.tobytes())


def write_ppm(path, image: np.ndarray) -> None:
    """Write an 8-bit binary PPM (P6) for RGB output such as palette frames."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DataError("PPM output requires an (h, w, 3) image")
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    header = f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + img.tobytes())


def read_png(path) -> np.ndarray:
    """Read a grayscale PNG into [0, 1]; requires the optional Pillow install."""
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise DataError(
            f"{path}: PNG support requires Pillow (install tircal[png])"
        ) from exc
    with Image.open(path) as im:
        gray = im.convert("L")
        return np.asarray(gray, dtype=np.float64) / 255.0


def read_image(path) -> np.ndarray:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".pgm":
        return read_pgm(path)
    if suffix == ".png":
        return read_png(path)
    raise DataError(f"{path}: unsupported image format {suffix!r}")


def list_frame_files(directory) -> list[Path]:
    """Frame files in lexicographic order; sequences are named so this is
    also temporal order."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory}: not a directory")
    files = sorted(
        p for p in directory.iterdir() if p.suffix.lower() in FRAME_EXTENSIONS
    )
    if not files:
        raise DataError(f"{directory}: no PGM/PNG frames found")
    return files
