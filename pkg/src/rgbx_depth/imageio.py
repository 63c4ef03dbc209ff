"""Netpbm (P5/P6) and PFM readers and writers, plus the on-disk sample layout.

Sample directories hold, per stem::

    <stem>_rgb.ppm      color, 8-bit P6
    <stem>_gt.pfm       ground-truth depth, non-positive = invalid
    <stem>_x.pfm        raw depth X (optional)
    <stem>_x_mask.pgm   X validity, 0/255 (optional; overrides the PFM sign rule,
                        since degraded X may hold valid zeros)
"""

import os
import re

import numpy as np

from .fields import DepthField


class ImageFormatError(ValueError):
    pass


_TOKEN = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)")


def _read_header(data, count):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    pos, tokens = 0, []
    for _ in range(count):
        m = _TOKEN.match(data, pos)
        if not m:
            raise ImageFormatError("malformed header")
        tokens.append(m.group(2))
        pos = m.end()
    # exactly one whitespace byte separates header from raster
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ImageFormatError("malformed header")
    return tokens, pos + 1


def _load(path):
    try:
        with open(path, "rb") as f:
            return f.read()
    except OSError as exc:
        raise ImageFormatError(f"cannot read {path}: {exc}") from exc


def read_pnm(path):
    """Read P5 (gray) or P6 (color) as an integer array plus its maxval."""
    data = _load(path)
    tokens, pos = _read_header(data, 4)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"{path}: unsupported magic {magic!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ImageFormatError(f"{path}: bad header numbers") from exc
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise ImageFormatError(f"{path}: bad dimensions or maxval")
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    expected = width * height * channels * dtype.itemsize
    raster = data[pos:pos + expected]
    if len(raster) < expected:
        raise ImageFormatError(f"{path}: truncated payload")
    arr = np.frombuffer(raster, dtype=dtype).reshape(height, width, channels)
    return (arr if channels == 3 else arr[..., 0]), maxval


def write_pnm(path, arr, maxval=255):
    arr = np.asarray(arr)
    if arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    elif arr.ndim == 2:
        magic = b"P5"
    else:
        raise ValueError(f"cannot write array of shape {arr.shape} as PNM")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    header = b"%s\n%d %d\n%d\n" % (magic, arr.shape[1], arr.shape[0], maxval)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def read_ppm(path):
    """Color image as H x W x 3 floats in [0, 1]."""
    arr, maxval = read_pnm(path)
    if arr.ndim != 3:
        raise ImageFormatError(f"{path}: expected a color (P6) image")
    return arr.astype(np.float64) / maxval


def write_ppm(path, rgb):
    rgb = np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0)
    write_pnm(path, np.round(rgb * 255).astype(np.uint8))


def read_pgm_mask(path):
    arr, _ = read_pnm(path)
    if arr.ndim != 2:
        raise ImageFormatError(f"{path}: expected a gray (P5) image")
    return arr > 0


def write_pgm_mask(path, mask):
    write_pnm(path, np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8))


def read_pfm(path):
    """PFM as float32 H x W (Pf) or H x W x 3 (PF), rows top to bottom."""
    data = _load(path)
    tokens, pos = _read_header(data, 4)
    if tokens[0] not in (b"Pf", b"PF"):
        raise ImageFormatError(f"{path}: not a PFM file")
    try:
        width, height = int(tokens[1]), int(tokens[2])
        scale = float(tokens[3])
    except ValueError as exc:
        raise ImageFormatError(f"{path}: bad header numbers") from exc
    if width <= 0 or height <= 0 or scale == 0:
        raise ImageFormatError(f"{path}: bad dimensions or scale")
    channels = 3 if tokens[0] == b"PF" else 1
    dtype = np.dtype("<f4") if scale < 0 else np.dtype(">f4")
    expected = width * height * channels * 4
    raster = data[pos:pos + expected]
    if len(raster) < expected:
        raise ImageFormatError(f"{path}: truncated payload")
    arr = np.frombuffer(raster, dtype=dtype).reshape(height, width, channels)[::-1]
    arr = arr.astype(np.float32)
    return arr[..., 0] if channels == 1 else arr


def write_pfm(path, arr):
    """Little-endian grayscale or color PFM (bottom-to-top rows)."""
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim == 2:
        magic = b"Pf"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"PF"
    else:
        raise ValueError(f"cannot write array of shape {arr.shape} as PFM")
    header = b"%s\n%d %d\n-1.0\n" % (magic, arr.shape[1], arr.shape[0])
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(arr[::-1], dtype="<f4").tobytes())


def read_depth(path, mask_path=None):
    """Depth field from PFM; non-positive or non-finite values are invalid."""
    values = read_pfm(path)
    if values.ndim != 2:
        raise ImageFormatError(f"{path}: depth must be single-channel")
    values = values.astype(np.float64)
    valid = np.isfinite(values) & (values > 0)
    if mask_path is not None:
        valid = read_pgm_mask(mask_path)
        if valid.shape != values.shape:
            raise ImageFormatError(f"{mask_path}: mask size does not match depth")
        valid &= np.isfinite(values)
    return DepthField(np.where(valid, values, 0.0), valid)


def write_depth(path, field, mask_path=None):
    write_pfm(path, np.where(field.valid, field.values, 0.0))
    if mask_path is not None:
        write_pgm_mask(mask_path, field.valid)


# ---------------------------------------------------------------------------
# Sample directories


def list_stems(directory, suffix="_rgb.ppm"):
    try:
        names = sorted(os.listdir(directory))
    except OSError as exc:
        raise ImageFormatError(f"cannot list {directory}: {exc}") from exc
    return [n[:-len(suffix)] for n in names if n.endswith(suffix)]


def write_scene(directory, stem, rgb, gt, x=None):
    os.makedirs(directory, exist_ok=True)
    base = os.path.join(directory, stem)
    write_ppm(base + "_rgb.ppm", rgb)
    write_depth(base + "_gt.pfm", gt)
    if x is not None:
        write_depth(base + "_x.pfm", x, base + "_x_mask.pgm")


def read_scene(directory, stem):
    """(rgb, gt, x-or-None) for one stem."""
    base = os.path.join(directory, stem)
    rgb = read_ppm(base + "_rgb.ppm")
    gt = read_depth(base + "_gt.pfm")
    x = None
    if os.path.exists(base + "_x.pfm"):
        mask = base + "_x_mask.pgm"
        x = read_depth(base + "_x.pfm", mask if os.path.exists(mask) else None)
    return rgb, gt, x


def read_scenes(directory):
    return [read_scene(directory, stem) for stem in list_stems(directory)]
