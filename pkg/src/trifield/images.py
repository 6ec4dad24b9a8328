"""Binary PPM/PGM writers with bit-exact output across platforms."""

from __future__ import annotations

import numpy as np


def _quantize(values):
    return np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, image):
    """P6 portable pixmap from an (H, W, 3) array of values in [0, 1]."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"image must be (H, W, 3), got {image.shape}")
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(_quantize(image).tobytes())


def write_pgm(path, gray):
    """P5 portable graymap from an (H, W) array of values in [0, 1]."""
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise ValueError(f"gray must be (H, W), got {gray.shape}")
    h, w = gray.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(_quantize(gray).tobytes())


def _read_header(f, magic):
    fields = []
    if f.read(2) != magic:
        raise ValueError(f"not a {magic.decode()} file")
    while len(fields) < 3:
        line = f.readline()
        if not line:
            raise ValueError("truncated header")
        body = line.split(b"#", 1)[0].split()
        fields.extend(int(tok) for tok in body)
    w, h, maxval = fields[:3]
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    return w, h


def read_ppm(path):
    with open(path, "rb") as f:
        w, h = _read_header(f, b"P6")
        data = np.frombuffer(f.read(3 * w * h), dtype=np.uint8)
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


def read_pgm(path):
    with open(path, "rb") as f:
        w, h = _read_header(f, b"P5")
        data = np.frombuffer(f.read(w * h), dtype=np.uint8)
    return data.reshape(h, w).astype(np.float64) / 255.0
