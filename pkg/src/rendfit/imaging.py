"""Binary PPM/PFM image files and plain-array resampling helpers."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ParseError


def write_ppm(path, rgb):
    """Write an (H, W, 3) float image in [0, 1] as binary 8-bit PPM (P6)."""
    rgb = np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0)
    h, w = rgb.shape[:2]
    data = np.round(rgb * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _read_header_tokens(raw, count, path):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError(path, 1, "truncated header")
        tokens.append(raw[start:pos].decode("ascii"))
    return tokens, pos + 1


def read_ppm(path):
    raw = Path(path).read_bytes()
    tokens, offset = _read_header_tokens(raw, 4, path)
    if tokens[0] != "P6":
        raise ParseError(path, 1, f"expected P6 magic, got {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    body = raw[offset:]
    need = w * h * 3
    if len(body) < need:
        raise ParseError(path, None, f"truncated pixel data at byte {offset + len(body)}: need {need} bytes")
    return np.frombuffer(body[:need], dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / maxval


def write_pfm(path, img):
    """Single-channel little-endian PFM ("Pf"), rows stored bottom-to-top."""
    img = np.asarray(img, dtype="<f4")
    if img.ndim != 2:
        raise ValueError("write_pfm expects a 2-D array")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img[::-1]).tobytes())


def read_pfm(path):
    raw = Path(path).read_bytes()
    tokens, offset = _read_header_tokens(raw, 4, path)
    if tokens[0] != "Pf":
        raise ParseError(path, 1, f"expected single-channel Pf magic, got {tokens[0]!r}")
    w, h = int(tokens[1]), int(tokens[2])
    scale = float(tokens[3])
    dtype = "<f4" if scale < 0 else ">f4"
    need = w * h * 4
    body = raw[offset:]
    if len(body) < need:
        raise ParseError(path, None, f"truncated float data at byte {offset + len(body)}: need {need} bytes")
    data = np.frombuffer(body[:need], dtype=dtype).reshape(h, w)
    return data[::-1].astype(np.float64)


def nearest_resize(img, box, out_size):
    """Nearest-neighbour resample of ``box`` (top, left, bottom, right) to ``out_size``."""
    h, w = img.shape[:2]
    top, left, bottom, right = box
    rows = top + (np.arange(out_size[0]) + 0.5) * ((bottom - top) / out_size[0])
    cols = left + (np.arange(out_size[1]) + 0.5) * ((right - left) / out_size[1])
    ri = np.clip(np.floor(rows).astype(np.int64), 0, h - 1)
    ci = np.clip(np.floor(cols).astype(np.int64), 0, w - 1)
    return img[ri][:, ci]


def to_gray(rgb):
    return rgb @ np.array([0.299, 0.587, 0.114])
