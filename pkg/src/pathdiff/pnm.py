"""Binary PGM / PPM writers and readers (8-bit)."""

import numpy as np

from .errors import FormatError


def _to_bytes(x):
    return np.clip(np.round(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, image):
    """``image``: 3 x h x w in [0, 1]."""
    c, h, w = image.shape
    if c != 3:
        raise FormatError(f"PPM needs 3 channels, got {c}")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(_to_bytes(image).transpose(1, 2, 0).tobytes())


def write_pgm(path, image):
    """``image``: h x w or 1 x h x w in [0, 1]."""
    img = np.asarray(image)
    if img.ndim == 3:
        img = img[0]
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(_to_bytes(img).tobytes())


def read_pnm(path):
    """Returns ``c x h x w`` floats in [0, 1] for P5 / P6 files written above."""
    with open(path, "rb") as fh:
        data = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header")
        fields.append(data[start:pos])
    if fields[0] not in (b"P5", b"P6") or fields[3] != b"255":
        raise FormatError(f"{path}: not an 8-bit binary PGM/PPM")
    w, h = int(fields[1]), int(fields[2])
    c = 3 if fields[0] == b"P6" else 1
    raw = np.frombuffer(data[pos + 1:], dtype=np.uint8)  # one whitespace byte ends the header
    if raw.size != c * h * w:
        raise FormatError(f"{path}: expected {c * h * w} bytes, found {raw.size}")
    return raw.reshape(h, w, c).transpose(2, 0, 1) / 255.0
