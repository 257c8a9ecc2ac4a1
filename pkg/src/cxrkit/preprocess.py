"""Deterministic radiograph canonicalization.

Pipeline order: crop dark borders -> standardize brightness -> pad to square
and bilinearly resize to 1024x1024 in [0,1] -> CLAHE. Every step is pure;
identical inputs give bit-identical outputs.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CANONICAL_SIZE = 1024
CANONICAL_MAGIC = b"CXIM"
CANONICAL_VERSION = 1

DEFAULT_DARK_THRESHOLD = 0.02
DEFAULT_DARK_ROW_FRACTION = 0.99
DEFAULT_CLAHE_CLIP = 2.0
DEFAULT_CLAHE_GRID = (8, 8)
CLAHE_BINS = 256

LOSSY_SUFFIXES = {".jpg", ".jpeg"}


class PreprocessError(ValueError):
    """Raised for invalid images or degenerate preprocessing inputs."""


@dataclass(frozen=True)
class RawImage:
    """Grayscale radiograph before canonicalization.

    pixels is a 2-D float64 array with intensities in [0, 2^bit_depth - 1].
    """

    pixels: np.ndarray
    bit_depth: int

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise PreprocessError(f"raw image must be 2-D and nonempty, got shape {px.shape}")
        if self.bit_depth not in (8, 16):
            raise PreprocessError(f"bit_depth must be 8 or 16, got {self.bit_depth}")
        if px.min() < 0 or px.max() > self.max_intensity:
            raise PreprocessError("raw intensities out of range for declared bit depth")

    @property
    def max_intensity(self) -> float:
        return float(2**self.bit_depth - 1)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


@dataclass(frozen=True)
class CanonicalImage:
    """1024x1024 [0,1] image; pad_box is the content rectangle (y0,x0,y1,x1),
    half-open, and pixels outside it are exactly 0."""

    pixels: np.ndarray
    pad_box: tuple[int, int, int, int]

    def __post_init__(self):
        px = self.pixels
        if px.shape != (CANONICAL_SIZE, CANONICAL_SIZE):
            raise PreprocessError(f"canonical image must be {CANONICAL_SIZE}x{CANONICAL_SIZE}")
        if px.dtype != np.float32:
            raise PreprocessError("canonical image must be float32")

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


FULL_FRAME_BOX = (0, 0, CANONICAL_SIZE, CANONICAL_SIZE)


@dataclass(frozen=True)
class PreprocessParams:
    dark_threshold: float = DEFAULT_DARK_THRESHOLD
    dark_row_fraction: float = DEFAULT_DARK_ROW_FRACTION
    clahe_clip_limit: float = DEFAULT_CLAHE_CLIP
    clahe_tile_grid: tuple[int, int] = DEFAULT_CLAHE_GRID
    clahe_enabled: bool = True


def crop_borders(
    img: RawImage,
    dark_threshold: float = DEFAULT_DARK_THRESHOLD,
    dark_fraction: float = DEFAULT_DARK_ROW_FRACTION,
) -> RawImage:
    """Strip leading/trailing rows and columns that are almost entirely dark.

    A row/column is dark when >= dark_fraction of its pixels fall below
    dark_threshold * max_intensity. Cropping repeats until stable, so a
    column judged over the already-row-cropped extent can still be removed.
    """
    threshold = dark_threshold * img.max_intensity
    px = img.pixels
    y0, x0 = 0, 0
    y1, x1 = px.shape
    changed = True
    while changed:
        changed = False
        view = px[y0:y1, x0:x1]
        if view.size == 0:
            raise PreprocessError("no content found")
        dark = view < threshold
        row_dark = dark.mean(axis=1) >= dark_fraction
        if row_dark.all():
            raise PreprocessError("no content found")
        while row_dark[0]:
            y0 += 1
            row_dark = row_dark[1:]
            changed = True
        while row_dark[-1]:
            y1 -= 1
            row_dark = row_dark[:-1]
            changed = True
        view = px[y0:y1, x0:x1]
        dark = view < threshold
        col_dark = dark.mean(axis=0) >= dark_fraction
        if col_dark.all():
            raise PreprocessError("no content found")
        while col_dark[0]:
            x0 += 1
            col_dark = col_dark[1:]
            changed = True
        while col_dark[-1]:
            x1 -= 1
            col_dark = col_dark[:-1]
            changed = True
    if y0 == 0 and x0 == 0 and (y1, x1) == px.shape:
        return img
    return RawImage(pixels=px[y0:y1, x0:x1].copy(), bit_depth=img.bit_depth)


def standardize_brightness(img: RawImage) -> RawImage:
    """Linearly stretch intensities so p1 -> 0 and p99 -> max, then clip.

    Order-preserving. Images with p99 <= p1 (constant or near-constant) are
    returned unchanged: the scale is undefined there.
    """
    p1, p99 = np.percentile(img.pixels, [1.0, 99.0])
    if p99 <= p1:
        return img
    scaled = (img.pixels - p1) / (p99 - p1) * img.max_intensity
    scaled = np.clip(scaled, 0.0, img.max_intensity)
    return RawImage(pixels=scaled, bit_depth=img.bit_depth)


def bilinear_resize(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with half-pixel-centered sampling and edge clamping.

    Output pixel (i, j) samples the source at
    ((i + 0.5) * H/out_h - 0.5, (j + 0.5) * W/out_w - 0.5).
    """
    src = np.asarray(src, dtype=np.float64)
    h, w = src.shape
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = src[y0[:, None], x0[None, :]] * (1.0 - fx) + src[y0[:, None], x1[None, :]] * fx
    bot = src[y1[:, None], x0[None, :]] * (1.0 - fx) + src[y1[:, None], x1[None, :]] * fx
    return top * (1.0 - fy) + bot * fy


def resize_canonical(img: RawImage) -> CanonicalImage:
    """Center the content on a square zero canvas and bilinearly resample to
    1024x1024 in [0,1], preserving aspect ratio.

    The content is resampled into its scaled rectangle and the padding is
    written as exact zeros, so pixels outside pad_box are 0 and the pad
    never bleeds into the content.
    """
    h, w = img.shape
    square = max(h, w)
    out_h = max(1, round(h * CANONICAL_SIZE / square))
    out_w = max(1, round(w * CANONICAL_SIZE / square))
    y0 = (CANONICAL_SIZE - out_h) // 2
    x0 = (CANONICAL_SIZE - out_w) // 2
    content = bilinear_resize(img.pixels, out_h, out_w) / img.max_intensity
    canvas = np.zeros((CANONICAL_SIZE, CANONICAL_SIZE), dtype=np.float64)
    canvas[y0 : y0 + out_h, x0 : x0 + out_w] = content
    pixels = np.clip(canvas, 0.0, 1.0).astype(np.float32)
    return CanonicalImage(pixels=pixels, pad_box=(y0, x0, y0 + out_h, x0 + out_w))


def _tile_lut(hist: np.ndarray, clipped: np.ndarray, area: int, nbins: int) -> np.ndarray:
    # Classical equalization of the clipped histogram:
    # (cdf - cdf_min) / (area - cdf_min). Single-valued tiles map to bin
    # centers so flat regions (image padding included) stay flat.
    occupied = np.nonzero(hist)[0]
    if occupied.size <= 1:
        return (np.arange(nbins, dtype=np.float64) + 0.5) / nbins
    cdf = np.cumsum(clipped)
    first = np.nonzero(clipped > 0)[0][0]
    cdf_min = cdf[first]
    denom = cdf[-1] - cdf_min
    if denom <= 0:
        return (np.arange(nbins, dtype=np.float64) + 0.5) / nbins
    return np.clip((cdf - cdf_min) / denom, 0.0, 1.0)


def clahe(
    img: CanonicalImage,
    clip_limit: float = DEFAULT_CLAHE_CLIP,
    tile_grid: tuple[int, int] = DEFAULT_CLAHE_GRID,
    nbins: int = CLAHE_BINS,
    preserve_pad: bool = True,
) -> CanonicalImage:
    """Contrast-limited adaptive histogram equalization.

    Per-tile histograms are clipped at clip_limit times the uniform bin
    count, the excess is redistributed evenly, and per-pixel output blends
    the four surrounding tile mappings bilinearly. A globally constant
    image is returned unchanged. With preserve_pad, pixels outside pad_box
    are forced back to 0.
    """
    gy, gx = tile_grid
    h, w = img.shape
    if gy < 1 or gx < 1 or h % gy != 0 or w % gx != 0:
        raise PreprocessError(f"tile grid {tile_grid} does not divide {h}x{w}")
    if clip_limit <= 0:
        raise PreprocessError("clip_limit must be positive")

    px = img.pixels
    if px.max() == px.min():
        return CanonicalImage(pixels=px.copy(), pad_box=img.pad_box)

    th, tw = h // gy, w // gx
    area = th * tw
    bins = np.minimum((px * nbins).astype(np.intp), nbins - 1)

    limit = max(clip_limit * area / nbins, 1.0)
    luts = np.empty((gy, gx, nbins), dtype=np.float64)
    for ty in range(gy):
        for tx in range(gx):
            tile_bins = bins[ty * th : (ty + 1) * th, tx * tw : (tx + 1) * tw]
            hist = np.bincount(tile_bins.ravel(), minlength=nbins).astype(np.float64)
            clipped = np.minimum(hist, limit)
            excess = area - clipped.sum()
            clipped += excess / nbins
            luts[ty, tx] = _tile_lut(hist, clipped, area, nbins)

    # Bilinear blend between tile mappings, clamped at the border half-tiles.
    ty_coord = (np.arange(h, dtype=np.float64) + 0.5) / th - 0.5
    tx_coord = (np.arange(w, dtype=np.float64) + 0.5) / tw - 0.5
    ty0f = np.floor(ty_coord)
    tx0f = np.floor(tx_coord)
    wy = (ty_coord - ty0f)[:, None]
    wx = (tx_coord - tx0f)[None, :]
    ty0 = np.clip(ty0f, 0, gy - 1).astype(np.intp)[:, None]
    ty1 = np.clip(ty0f + 1, 0, gy - 1).astype(np.intp)[:, None]
    tx0 = np.clip(tx0f, 0, gx - 1).astype(np.intp)[None, :]
    tx1 = np.clip(tx0f + 1, 0, gx - 1).astype(np.intp)[None, :]

    out = (
        luts[ty0, tx0, bins] * (1.0 - wy) * (1.0 - wx)
        + luts[ty0, tx1, bins] * (1.0 - wy) * wx
        + luts[ty1, tx0, bins] * wy * (1.0 - wx)
        + luts[ty1, tx1, bins] * wy * wx
    )
    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    if preserve_pad:
        y0, x0, y1, x1 = img.pad_box
        mask = np.zeros((h, w), dtype=bool)
        mask[y0:y1, x0:x1] = True
        out[~mask] = 0.0
    return CanonicalImage(pixels=out, pad_box=img.pad_box)


def canonicalize(img: RawImage, params: PreprocessParams = PreprocessParams()) -> CanonicalImage:
    """Full canonicalization: crop -> brightness -> pad/resize -> CLAHE."""
    cropped = crop_borders(img, params.dark_threshold, params.dark_row_fraction)
    standardized = standardize_brightness(cropped)
    canonical = resize_canonical(standardized)
    if params.clahe_enabled:
        canonical = clahe(canonical, params.clahe_clip_limit, params.clahe_tile_grid)
    return canonical


def resize_raw_only(img: RawImage) -> CanonicalImage:
    """The no-preprocessing path: resize to canonical geometry, nothing else."""
    return resize_canonical(img)


# ---------------------------------------------------------------------------
# Canonical image persistence: magic, version, h, w, pad_box, float32 raster.

def save_canonical(img: CanonicalImage, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = struct.pack(
        "<4sHII4I",
        CANONICAL_MAGIC,
        CANONICAL_VERSION,
        img.shape[0],
        img.shape[1],
        *img.pad_box,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(img.pixels, dtype="<f4").tobytes())
    return path


def load_canonical(path: str | Path) -> CanonicalImage:
    path = Path(path)
    with open(path, "rb") as fh:
        header = fh.read(struct.calcsize("<4sHII4I"))
        if len(header) < struct.calcsize("<4sHII4I"):
            raise PreprocessError(f"truncated canonical image file: {path}")
        magic, version, h, w, b0, b1, b2, b3 = struct.unpack("<4sHII4I", header)
        if magic != CANONICAL_MAGIC:
            raise PreprocessError(f"not a canonical image file: {path}")
        if version != CANONICAL_VERSION:
            raise PreprocessError(f"unsupported canonical image version {version}")
        raw = fh.read(h * w * 4)
        if len(raw) != h * w * 4:
            raise PreprocessError(f"truncated canonical image data: {path}")
        data = np.frombuffer(raw, dtype="<f4")
    return CanonicalImage(pixels=data.reshape(h, w).copy(), pad_box=(b0, b1, b2, b3))


# ---------------------------------------------------------------------------
# Raw image loading: raster formats via Pillow, plus raw DICOM pixel
# extraction (pixel data and bit depth only).

def load_image(path: str | Path) -> RawImage:
    path = Path(path)
    if not path.exists():
        raise PreprocessError(f"image file not found: {path}")
    suffix = path.suffix.lower()
    if suffix in (".dcm", ".dicom"):
        return _read_dicom_pixels(path)
    if suffix in LOSSY_SUFFIXES:
        warnings.warn(f"{path.name}: lossy-compressed source; prefer lossless originals")
    from PIL import Image

    with Image.open(path) as pil:
        if pil.mode in ("I;16", "I;16L", "I;16B", "I"):
            arr = np.asarray(pil, dtype=np.float64)
            bit_depth = 16
        else:
            arr = np.asarray(pil.convert("L"), dtype=np.float64)
            bit_depth = 8
    if arr.ndim != 2:
        raise PreprocessError(f"{path}: expected a grayscale image")
    return RawImage(pixels=arr, bit_depth=bit_depth)


_UNCOMPRESSED_SYNTAXES = {
    "1.2.840.10008.1.2",  # implicit VR little endian
    "1.2.840.10008.1.2.1",  # explicit VR little endian
}
_EXPLICIT_LONG_VRS = {b"OB", b"OW", b"OF", b"SQ", b"UT", b"UN"}


def _read_dicom_pixels(path: Path) -> RawImage:
    """Minimal DICOM reader: Rows, Columns, BitsAllocated/Stored, PixelData.

    Only uncompressed little-endian transfer syntaxes are supported; lossy
    or otherwise compressed files are refused.
    """
    blob = path.read_bytes()
    if len(blob) > 132 and blob[128:132] == b"DICM":
        pos = 132
        explicit = True
    else:
        pos = 0
        explicit = False

    rows = cols = None
    bits_allocated = bits_stored = None
    pixel_data = None
    syntax = None

    while pos + 8 <= len(blob):
        group, elem = struct.unpack_from("<HH", blob, pos)
        pos += 4
        in_meta = group == 0x0002
        use_explicit = explicit or in_meta
        if use_explicit:
            vr = blob[pos : pos + 2]
            if vr in _EXPLICIT_LONG_VRS:
                (length,) = struct.unpack_from("<I", blob, pos + 4)
                pos += 8
            elif vr.isalpha() and vr.isupper():
                (length,) = struct.unpack_from("<H", blob, pos + 2)
                pos += 4
            else:  # implicit VR body after an explicit meta header
                (length,) = struct.unpack_from("<I", blob, pos)
                pos += 4
                vr = b"??"
        else:
            (length,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            vr = b"??"

        if length == 0xFFFFFFFF:
            raise PreprocessError(f"{path}: undefined-length DICOM elements unsupported "
                                  "(likely a compressed transfer syntax)")
        value = blob[pos : pos + length]
        pos += length

        if (group, elem) == (0x0002, 0x0010):
            syntax = value.decode("ascii", "ignore").strip("\x00 ")
        elif (group, elem) == (0x0028, 0x0010):
            rows = struct.unpack("<H", value[:2])[0]
        elif (group, elem) == (0x0028, 0x0011):
            cols = struct.unpack("<H", value[:2])[0]
        elif (group, elem) == (0x0028, 0x0100):
            bits_allocated = struct.unpack("<H", value[:2])[0]
        elif (group, elem) == (0x0028, 0x0101):
            bits_stored = struct.unpack("<H", value[:2])[0]
        elif (group, elem) == (0x7FE0, 0x0010):
            pixel_data = value
            break

    if syntax is not None and syntax not in _UNCOMPRESSED_SYNTAXES:
        raise PreprocessError(
            f"{path}: transfer syntax {syntax} unsupported (compressed or lossy source)"
        )
    if rows is None or cols is None or bits_allocated is None or pixel_data is None:
        raise PreprocessError(f"{path}: missing Rows/Columns/BitsAllocated/PixelData")

    if bits_allocated == 8:
        arr = np.frombuffer(pixel_data[: rows * cols], dtype=np.uint8)
    elif bits_allocated == 16:
        arr = np.frombuffer(pixel_data[: rows * cols * 2], dtype="<u2")
    else:
        raise PreprocessError(f"{path}: unsupported BitsAllocated {bits_allocated}")
    if arr.size != rows * cols:
        raise PreprocessError(f"{path}: truncated PixelData")
    bit_depth = 8 if (bits_stored or bits_allocated) <= 8 else 16
    return RawImage(pixels=arr.reshape(rows, cols).astype(np.float64), bit_depth=bit_depth)
