"""Binary PGM (P5) / PPM (P6) codec, 8-bit only."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DatasetError


def encode(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise DatasetError(f"pnm: expected uint8 pixels, got {img.dtype}")
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise DatasetError(f"pnm: unsupported image shape {img.shape}")
    h, w = img.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img).tobytes()


def decode(data: bytes, name: str = "<bytes>") -> np.ndarray:
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"{name}: truncated header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise DatasetError(f"{name}: not a binary PGM/PPM (magic {magic!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:4])
    except ValueError as exc:
        raise DatasetError(f"{name}: bad header {tokens!r}") from exc
    if maxval != 255:
        raise DatasetError(f"{name}: only maxval 255 is supported, got {maxval}")
    ch = 1 if magic == b"P5" else 3
    need = w * h * ch
    body = data[pos : pos + need]
    if len(body) != need:
        raise DatasetError(f"{name}: truncated pixel data ({len(body)} of {need} bytes)")
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape((h, w) if ch == 1 else (h, w, 3)).copy()


def write(path, img: np.ndarray) -> bytes:
    blob = encode(img)
    Path(path).write_bytes(blob)
    return blob


def read(path) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError as exc:
        raise DatasetError(f"missing frame file {path}") from exc
    return decode(data, str(path))
