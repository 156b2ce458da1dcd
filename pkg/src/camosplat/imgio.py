"""Image and raw-buffer I/O.

Images are held in memory as float arrays in [0, 1], linear radiometry.
On-disk formats: binary PPM (P6, maxval 255) for images, raw little-endian
f32 (H*W*3, row-major from the top row) for environment radiance.
sRGB gamma is applied only when exporting rendered frames.
"""

from __future__ import annotations

import numpy as np

from .errors import ParseError, ValidationError


def read_ppm(path) -> np.ndarray:
    """Load a P6 PPM as float64 H x W x 3 in [0, 1]."""
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P6"):
        raise ParseError(f"{path}: not a P6 PPM")
    # header: magic, width, height, maxval; '#' comments allowed between tokens
    tokens: list[bytes] = []
    i = 2
    while len(tokens) < 3:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if i < len(data) and data[i : i + 1] == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
            continue
        j = i
        while j < len(data) and not data[j : j + 1].isspace():
            j += 1
        if j == i:
            raise ParseError(f"{path}: truncated PPM header")
        tokens.append(data[i:j])
        i = j
    i += 1  # single whitespace byte after maxval
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as e:
        raise ParseError(f"{path}: bad PPM header: {e}") from None
    if maxval != 255:
        raise ParseError(f"{path}: only maxval 255 supported, got {maxval}")
    n = width * height * 3
    raw = np.frombuffer(data, dtype=np.uint8, count=n, offset=i)
    if raw.size != n:
        raise ParseError(f"{path}: truncated PPM pixel data")
    return raw.reshape(height, width, 3).astype(np.float64) / 255.0


def write_ppm(path, image: np.ndarray) -> None:
    """Write a float image in [0, 1] as P6 with maxval 255 (no gamma)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValidationError("write_ppm expects an H x W x 3 image")
    if not np.all(np.isfinite(img)):
        raise ValidationError("write_ppm: non-finite pixel values")
    h, w, _ = img.shape
    u8 = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(u8.tobytes())


def srgb_encode(image: np.ndarray) -> np.ndarray:
    """Gamma 1/2.2 for display export; internal math stays linear."""
    return np.clip(image, 0.0, 1.0) ** (1.0 / 2.2)


def read_radiance_f32(path, width: int, height: int) -> np.ndarray:
    """Load raw little-endian f32 radiance, kept as f32 for byte-stable round trips."""
    n = width * height * 3
    raw = np.fromfile(path, dtype="<f4")
    if raw.size != n:
        raise ParseError(
            f"{path}: expected {n} f32 values for {width}x{height}x3, got {raw.size}"
        )
    return raw.reshape(height, width, 3)


def write_radiance_f32(path, radiance: np.ndarray) -> None:
    arr = np.ascontiguousarray(radiance, dtype="<f4")
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValidationError("radiance must be H x W x 3")
    with open(path, "wb") as f:
        f.write(arr.tobytes())
