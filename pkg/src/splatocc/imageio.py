"""PFM / PGM readers and writers.

PFM is written little-endian (scale -1.0). PGM is binary ``P5`` with maxval 255.
"""

import re

import numpy as np

from .errors import FormatError


def write_pfm(path, image):
    image = np.asarray(image, dtype="<f4")
    if image.ndim == 3 and image.shape[2] == 3:
        header = b"PF\n"
    elif image.ndim == 2 or (image.ndim == 3 and image.shape[2] == 1):
        header = b"Pf\n"
        image = image.reshape(image.shape[0], image.shape[1])
    else:
        raise FormatError(f"PFM supports HxW or HxWx3 images, got shape {image.shape}")
    height, width = image.shape[:2]
    with open(path, "wb") as f:
        f.write(header)
        f.write(b"%d %d\n" % (width, height))
        f.write(b"-1.0\n")
        # PFM rows are stored bottom-to-top
        f.write(np.ascontiguousarray(image[::-1]).tobytes())


def read_pfm(path):
    """Read a PFM file into an ``(H, W)`` or ``(H, W, 3)`` float32 array."""
    with open(path, "rb") as f:
        header = f.readline().rstrip()
        if header == b"PF":
            channels = 3
        elif header == b"Pf":
            channels = 1
        else:
            raise FormatError("not a PFM file")
        dims = re.match(rb"^\s*(\d+)\s+(\d+)\s*$", f.readline())
        if dims is None:
            raise FormatError("malformed PFM header")
        width, height = int(dims.group(1)), int(dims.group(2))
        try:
            scale = float(f.readline().strip())
        except ValueError as exc:
            raise FormatError("malformed PFM scale") from exc
        endian = "<" if scale < 0 else ">"
        data = f.read()
    count = width * height * channels
    if len(data) < 4 * count:
        raise FormatError("truncated PFM payload")
    arr = np.frombuffer(data[: 4 * count], dtype=endian + "f4").astype(np.float32)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return arr.reshape(shape)[::-1].copy()


def write_pgm(path, image):
    """Write an 8-bit image. Boolean arrays map to 0 / 255."""
    image = np.asarray(image)
    if image.dtype == bool:
        image = image.astype(np.uint8) * 255
    elif image.dtype != np.uint8:
        image = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    if image.ndim != 2:
        raise FormatError("PGM expects a single-channel image")
    height, width = image.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (width, height))
        f.write(np.ascontiguousarray(image).tobytes())


def read_pgm(path):
    with open(path, "rb") as f:
        data = f.read()
    tokens = []
    pos = 0
    # magic, width, height, maxval; comments allowed between tokens
    while len(tokens) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)").match(data, pos)
        if m is None:
            raise FormatError("malformed PGM header")
        tokens.append(m.group(2))
        pos = m.end()
    if tokens[0] != b"P5":
        raise FormatError("only binary P5 PGM is supported")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise FormatError("16-bit PGM is not supported")
    pos += 1
    payload = data[pos : pos + width * height]
    if len(payload) != width * height:
        raise FormatError("truncated PGM payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width).copy()
