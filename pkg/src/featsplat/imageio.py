"""8-bit PPM images and the FEATF1 raw float container."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

FEAT_MAGIC = b"FEATF1\0\0"


class ImageFormatError(ValueError):
    pass


def to_uint8(img) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, img) -> None:
    """Write H x W x 3 (or H x W / H x W x 1 grayscale, replicated) floats in [0, 1] as binary P6."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[..., 0]
    if a.ndim == 2:
        a = np.repeat(a[..., None], 3, axis=2)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError(f"cannot write image of shape {a.shape} as PPM")
    h, w = a.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + to_uint8(a).tobytes())


def _ppm_tokens(data: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens (skipping comments); return (tokens, body offset)."""
    toks, i = [], 0
    while len(toks) < count:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if data[i:i + 1] == b"#":
            while i < len(data) and data[i:i + 1] != b"\n":
                i += 1
            continue
        j = i
        while j < len(data) and not data[j:j + 1].isspace():
            j += 1
        if j == i:
            raise ImageFormatError("truncated PPM header")
        toks.append(data[i:j])
        i = j
    return toks, i + 1


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 file into H x W x 3 floats in [0, 1]."""
    data = Path(path).read_bytes()
    toks, off = _ppm_tokens(data, 4)
    if toks[0] != b"P6":
        raise ImageFormatError(f"{path}: not a binary PPM (magic {toks[0]!r})")
    w, h, maxval = (int(t) for t in toks[1:])
    if maxval != 255:
        raise ImageFormatError(f"{path}: only 8-bit PPM is supported")
    body = data[off:off + w * h * 3]
    if len(body) != w * h * 3:
        raise ImageFormatError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def write_featf1(path, arr) -> None:
    """Write an H x W x C float array (2-D arrays get C = 1)."""
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 2:
        a = a[..., None]
    if a.ndim != 3:
        raise ValueError(f"FEATF1 needs H x W x C data, got shape {a.shape}")
    h, w, c = a.shape
    Path(path).write_bytes(FEAT_MAGIC + struct.pack("<III", h, w, c) + a.astype("<f4").tobytes())


def read_featf1(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:8] != FEAT_MAGIC:
        raise ImageFormatError(f"{path}: bad FEATF1 magic {data[:8]!r}")
    if len(data) < 20:
        raise ImageFormatError(f"{path}: truncated FEATF1 header")
    h, w, c = struct.unpack_from("<III", data, 8)
    if len(data) != 20 + 4 * h * w * c:
        raise ImageFormatError(f"{path}: expected {h}x{w}x{c} floats, file has {(len(data) - 20) // 4}")
    return np.frombuffer(data, dtype="<f4", offset=20).reshape(h, w, c).astype(np.float64)
