"""Binary netpbm image IO: P5 (grayscale) and P6 (RGB), maxval 255 only."""

from __future__ import annotations

import numpy as np


class NetpbmError(ValueError):
    """Malformed netpbm file; message carries the byte offset."""


def write_image(path, image: np.ndarray) -> None:
    """Write an 8-bit image; (H, W) goes to P5, (H, W, 3) to P6."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        raise ValueError(f"expected uint8 image, got dtype {img.dtype}")
    if img.ndim == 2:
        magic = b"P5"
        h, w = img.shape
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
        h, w = img.shape[:2]
    else:
        raise ValueError(f"expected (H,W) or (H,W,3) image, got shape {img.shape}")
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(img.tobytes())


def _next_token(raw: bytes, pos: int) -> tuple[bytes, int]:
    n = len(raw)
    while pos < n:
        ch = raw[pos:pos + 1]
        if ch == b"#":
            while pos < n and raw[pos:pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    if pos >= n:
        raise NetpbmError(f"unexpected end of header at byte offset {pos}")
    start = pos
    while pos < n and not raw[pos:pos + 1].isspace():
        pos += 1
    return raw[start:pos], pos


def read_image(path) -> np.ndarray:
    """Read a P5 or P6 file; returns uint8 (H, W) or (H, W, 3)."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 2:
        raise NetpbmError(f"file truncated at byte offset {len(raw)}")
    magic = raw[:2]
    if magic not in (b"P5", b"P6"):
        raise NetpbmError(f"bad magic {magic!r} at byte offset 0")
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _next_token(raw, pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise NetpbmError(f"bad header token {tok!r} at byte offset {pos - len(tok)}") from None
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise NetpbmError(f"bad extents {width}x{height} at byte offset {pos}")
    if maxval != 255:
        raise NetpbmError(f"unsupported maxval {maxval} at byte offset {pos}")
    pos += 1  # exactly one whitespace byte before the payload
    channels = 1 if magic == b"P5" else 3
    expected = width * height * channels
    payload = raw[pos:pos + expected]
    if len(payload) != expected:
        raise NetpbmError(
            f"payload truncated at byte offset {pos + len(payload)} "
            f"(expected {pos + expected} bytes)")
    data = np.frombuffer(payload, dtype=np.uint8)
    if channels == 1:
        return data.reshape(height, width).copy()
    return data.reshape(height, width, 3).copy()
