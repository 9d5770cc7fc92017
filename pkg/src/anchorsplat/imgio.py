"""Image file formats: 8-bit PNG for color, 16-bit PGM (P5) for binary and
depth maps, and a small raw float32 container for feature maps."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InvalidInput

FEATURE_MAGIC = b"AGFM"


def write_png(image: np.ndarray, path) -> None:
    """Write an (H, W, 3) float image in [0, 1] as 8-bit RGB PNG."""
    arr = np.clip(np.asarray(image, dtype=float), 0.0, 1.0)
    Image.fromarray((arr * 255).round().astype(np.uint8), mode="RGB").save(path)


def read_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=float)
    return arr / 255.0


def write_pgm16(image: np.ndarray, path, scale: float | None = None) -> float:
    """Write an (H, W) array as binary 16-bit PGM.

    Values are scaled by `scale` (default: 65535 / max for depth-like data,
    65535 for boolean masks) and clipped into [0, 65535]. Returns the scale
    used so depth maps can be recovered.
    """
    arr = np.asarray(image)
    if arr.ndim != 2:
        raise InvalidInput("PGM expects a 2D array")
    if arr.dtype == bool:
        data = arr.astype(np.uint16) * np.uint16(65535)
        scale = 65535.0
    else:
        if scale is None:
            peak = float(arr.max())
            scale = 65535.0 / peak if peak > 0 else 1.0
        data = np.clip(np.round(arr * scale), 0, 65535).astype(np.uint16)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(data.astype(">u2").tobytes())
    return scale


def read_pgm16(path) -> np.ndarray:
    """Read a binary PGM written by write_pgm16; returns uint16 values."""
    raw = Path(path).read_bytes()
    # header: magic, width/height, maxval, single whitespace, then pixels
    parts = []
    pos = 0
    while len(parts) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        parts.append(raw[start:pos])
    pos += 1
    if parts[0] != b"P5":
        raise InvalidInput("not a binary PGM file")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 65535:
        raise InvalidInput("expected 16-bit PGM")
    data = np.frombuffer(raw[pos:pos + w * h * 2], dtype=">u2")
    return data.reshape(h, w).astype(np.uint16)


def read_mask_pgm(path) -> np.ndarray:
    """Binary mask from a 16-bit PGM (any nonzero value counts as set)."""
    return read_pgm16(path) > 0


def write_feature_map(feature: np.ndarray, path) -> None:
    """Raw little-endian float32 dump with a 16-byte header:
    magic "AGFM", u32 height, u32 width, u32 channels."""
    arr = np.asarray(feature, dtype="<f4")
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise InvalidInput("feature map must be (H, W) or (H, W, C)")
    h, w, c = arr.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", h, w, c))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_feature_map(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != FEATURE_MAGIC:
        raise InvalidInput("bad feature map magic")
    h, w, c = struct.unpack("<III", raw[4:16])
    data = np.frombuffer(raw[16:16 + h * w * c * 4], dtype="<f4")
    return data.reshape(h, w, c).astype(float)
