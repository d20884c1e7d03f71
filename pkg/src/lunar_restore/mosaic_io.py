"""Windowed access to large 8-bit grayscale mosaics and selenographic coordinates.

Raster orientation: column 0 is the easternmost longitude (``lon_max_deg``) and
row 0 is the northernmost latitude (``lat_max_deg``). Moving right decreases
longitude, moving down decreases latitude. A mosaic is stored as a binary P5
PGM next to a JSON sidecar ``<stem>.geo.json`` carrying the geodetic header.

Gray images are plain ``(h, w)`` float64 arrays with values in [0, 1]; 8-bit
storage converts with ``value / 255`` and back with round-half-away-from-zero.
"""

import io
import json
import math
import os
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
from PIL import Image

from .errors import BoundsError, FormatError, ValidationError
from .validation import check_gray_image, check_positive_int

SIDECAR_FIELDS = (
    "width_px",
    "height_px",
    "lon_max_deg",
    "lon_min_deg",
    "lat_max_deg",
    "lat_min_deg",
    "px_per_degree",
    "bit_depth",
)


class GeoPoint(NamedTuple):
    lon_deg: float
    lat_deg: float


class PixelCoord(NamedTuple):
    x: int
    y: int


class PixelRect(NamedTuple):
    x0: int
    y0: int
    w: int
    h: int

    def slices(self):
        return slice(self.y0, self.y0 + self.h), slice(self.x0, self.x0 + self.w)


@dataclass(frozen=True)
class MosaicHeader:
    """Geodetic metadata binding a raster to lon/lat bounds."""

    width_px: int
    height_px: int
    lon_max_deg: float
    lon_min_deg: float
    lat_max_deg: float
    lat_min_deg: float
    px_per_degree: float
    bit_depth: int = 8

    def __post_init__(self):
        check_positive_int(self.width_px, "width_px")
        check_positive_int(self.height_px, "height_px")
        if not self.px_per_degree > 0:
            raise ValidationError(f"px_per_degree must be positive, got {self.px_per_degree}")
        if self.bit_depth != 8:
            raise FormatError(f"only 8-bit mosaics are supported, got bit_depth={self.bit_depth}")
        if not (self.lon_max_deg > self.lon_min_deg and self.lat_max_deg > self.lat_min_deg):
            raise ValidationError("max bounds must exceed min bounds")
        exp_w = round((self.lon_max_deg - self.lon_min_deg) * self.px_per_degree)
        exp_h = round((self.lat_max_deg - self.lat_min_deg) * self.px_per_degree)
        if (exp_w, exp_h) != (self.width_px, self.height_px):
            raise ValidationError(
                f"raster {self.width_px}x{self.height_px} inconsistent with bounds and "
                f"px_per_degree (expected {exp_w}x{exp_h})"
            )

    @classmethod
    def from_bounds(cls, lon_max_deg, lon_min_deg, lat_max_deg, lat_min_deg, px_per_degree):
        return cls(
            width_px=round((lon_max_deg - lon_min_deg) * px_per_degree),
            height_px=round((lat_max_deg - lat_min_deg) * px_per_degree),
            lon_max_deg=lon_max_deg,
            lon_min_deg=lon_min_deg,
            lat_max_deg=lat_max_deg,
            lat_min_deg=lat_min_deg,
            px_per_degree=px_per_degree,
        )

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        missing = [k for k in SIDECAR_FIELDS if k not in data]
        if missing:
            raise FormatError(f"sidecar is missing fields: {', '.join(missing)}")
        return cls(**{k: data[k] for k in SIDECAR_FIELDS})

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)
            f.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}: invalid sidecar JSON: {exc}") from None
        return cls.from_dict(data)


# Whole-Moon mosaic: 128 px/deg over lon +180..-180, lat +85..-85.
GLOBAL_MOSAIC_HEADER = MosaicHeader.from_bounds(180.0, -180.0, 85.0, -85.0, 128.0)


def _floor_snapped(v):
    # Snap values within float noise of an integer before flooring, so that
    # geo_to_pixel(pixel_to_geo(x, y)) == (x, y) for non power-of-two scales.
    r = round(v)
    if abs(v - r) <= 1e-9 * max(1.0, abs(v)):
        return int(r)
    return math.floor(v)


def geo_to_pixel(header, p):
    """Map a selenographic point to the pixel that contains it.

    The exact minimum bound would index one past the end; results are
    clamped to the last valid row/column.
    """
    lon, lat = float(p[0]), float(p[1])
    if not (header.lon_min_deg <= lon <= header.lon_max_deg):
        raise BoundsError(
            f"longitude {lon} outside [{header.lon_min_deg}, {header.lon_max_deg}]", axis="lon"
        )
    if not (header.lat_min_deg <= lat <= header.lat_max_deg):
        raise BoundsError(
            f"latitude {lat} outside [{header.lat_min_deg}, {header.lat_max_deg}]", axis="lat"
        )
    x = _floor_snapped((header.lon_max_deg - lon) * header.px_per_degree)
    y = _floor_snapped((header.lat_max_deg - lat) * header.px_per_degree)
    return PixelCoord(min(max(x, 0), header.width_px - 1), min(max(y, 0), header.height_px - 1))


def pixel_to_geo(header, x, y):
    """Geodetic location of the top-left corner of pixel ``(x, y)``."""
    if not 0 <= x < header.width_px:
        raise BoundsError(f"x={x} outside [0, {header.width_px})", axis="x")
    if not 0 <= y < header.height_px:
        raise BoundsError(f"y={y} outside [0, {header.height_px})", axis="y")
    return GeoPoint(
        header.lon_max_deg - x / header.px_per_degree,
        header.lat_max_deg - y / header.px_per_degree,
    )


def check_rect(header, rect):
    x0, y0, w, h = (int(v) for v in rect)
    if w < 1 or h < 1:
        raise ValidationError(f"rect must have positive size, got {w}x{h}")
    if x0 < 0 or x0 + w > header.width_px:
        raise BoundsError(f"rect columns [{x0}, {x0 + w}) outside [0, {header.width_px})", axis="x")
    if y0 < 0 or y0 + h > header.height_px:
        raise BoundsError(f"rect rows [{y0}, {y0 + h}) outside [0, {header.height_px})", axis="y")
    return PixelRect(x0, y0, w, h)


def geo_rect_to_pixel_rect(header, corner_a, corner_b):
    """Half-open pixel rectangle spanned by two geodetic corners."""
    pa, pb = geo_to_pixel(header, corner_a), geo_to_pixel(header, corner_b)
    x0, x1 = sorted((pa.x, pb.x))
    y0, y1 = sorted((pa.y, pb.y))
    if x1 == x0 or y1 == y0:
        raise ValidationError("geodetic rectangle collapses to zero pixels on one axis")
    return check_rect(header, PixelRect(x0, y0, x1 - x0, y1 - y0))


# -- PGM (P5) ---------------------------------------------------------------


def _read_pgm_header(f):
    """Parse a P5 header from a binary file object; returns (w, h, maxval, offset)."""
    tokens = []
    pos = 0
    f.seek(0)
    blob = f.read(512)
    while len(tokens) < 4:
        if pos >= len(blob):
            raise FormatError("truncated PGM header")
        ch = blob[pos : pos + 1]
        if ch == b"#":
            end = blob.find(b"\n", pos)
            if end < 0:
                raise FormatError("unterminated PGM comment")
            pos = end + 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(blob) and not blob[pos : pos + 1].isspace():
                pos += 1
            tokens.append(blob[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    pos += 1
    if tokens[0] != b"P5":
        raise FormatError(f"not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError("malformed PGM header") from None
    if maxval != 255:
        raise FormatError(f"unsupported PGM maxval {maxval}; only 8-bit (255) is supported")
    return w, h, maxval, pos


def _pgm_header_bytes(w, h):
    return b"P5\n%d %d\n255\n" % (w, h)


def sidecar_path(mosaic_path):
    root, _ = os.path.splitext(os.fspath(mosaic_path))
    return root + ".geo.json"


class MosaicSource:
    """Seekable handle on a P5 mosaic plus its geodetic header.

    ``fileobj`` may be any binary file-like object supporting ``seek`` and
    ``readinto``; tests substitute a byte-counting double.
    """

    def __init__(self, fileobj, header, name="<mosaic>"):
        self._f = fileobj
        self.header = header
        self.name = name
        w, h, _, offset = _read_pgm_header(fileobj)
        if (w, h) != (header.width_px, header.height_px):
            raise FormatError(
                f"{name}: raster is {w}x{h} but sidecar says "
                f"{header.width_px}x{header.height_px}"
            )
        self.data_offset = offset

    @classmethod
    def open(cls, path, geo_json=None):
        header = MosaicHeader.load(geo_json or sidecar_path(path))
        f = open(path, "rb")
        try:
            return cls(f, header, name=os.fspath(path))
        except Exception:
            f.close()
            raise

    def close(self):
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def read_window(self, rect):
        return read_window(self, rect)


def read_window(source, rect):
    """Read one rectangular window, one seek + read per covered row."""
    rect = check_rect(source.header, rect)
    buf = np.empty((rect.h, rect.w), dtype=np.uint8)
    f = source._f
    stride = source.header.width_px
    for r in range(rect.h):
        f.seek(source.data_offset + (rect.y0 + r) * stride + rect.x0)
        n = f.readinto(memoryview(buf[r]))
        if n != rect.w:
            raise OSError(f"{source.name}: short read at row {rect.y0 + r} ({n} of {rect.w} bytes)")
    return buf.astype(np.float64) / 255.0


def write_mosaic(path, pixels, header):
    """Write a P5 mosaic and its sidecar. Meant for fixtures, not full-scale rasters."""
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        pixels = quantize(pixels)
    if pixels.shape != (header.height_px, header.width_px):
        raise ValidationError(
            f"pixels shape {pixels.shape} does not match header "
            f"{header.height_px}x{header.width_px}"
        )
    with open(path, "wb") as f:
        f.write(_pgm_header_bytes(header.width_px, header.height_px))
        f.write(np.ascontiguousarray(pixels).tobytes())
    header.save(sidecar_path(path))


# -- resampling ---------------------------------------------------------------


def _axis_weights(n_in, n_out):
    if n_out == 1:
        pos = np.array([(n_in - 1) / 2.0])
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.clip(np.floor(pos).astype(np.intp), 0, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    return lo, hi, frac


def resize_bilinear(img, out_w, out_h):
    """Bilinear resize with corner-aligned sampling (output corners hit input corners)."""
    img = check_gray_image(img)
    out_w = check_positive_int(out_w, "out_w")
    out_h = check_positive_int(out_h, "out_h")
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    y_lo, y_hi, fy = _axis_weights(h, out_h)
    x_lo, x_hi, fx = _axis_weights(w, out_w)
    rows = img[y_lo] * (1.0 - fy)[:, None] + img[y_hi] * fy[:, None]
    out = rows[:, x_lo] * (1.0 - fx) + rows[:, x_hi] * fx
    return np.clip(out, 0.0, 1.0)


# -- image files ----------------------------------------------------------------


def quantize(img):
    """[0, 1] floats to uint8, rounding half away from zero."""
    img = check_gray_image(img)
    return np.floor(img * 255.0 + 0.5).astype(np.uint8)


def encode_png(img):
    """PNG bytes for a gray image (or a boolean mask, stored as 0/255)."""
    arr = np.asarray(img)
    if arr.dtype == bool:
        data = arr.astype(np.uint8) * 255
    elif arr.dtype == np.uint8:
        data = arr
    else:
        data = quantize(arr)
    bio = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(data), mode="L").save(bio, format="PNG")
    return bio.getvalue()


def write_image(img, path):
    path = os.fspath(path)
    ext = os.path.splitext(path)[1].lower()
    if ext == ".png":
        payload = encode_png(img)
    elif ext in (".pgm", ".pnm"):
        arr = np.asarray(img)
        data = arr.astype(np.uint8) * 255 if arr.dtype == bool else (
            arr if arr.dtype == np.uint8 else quantize(arr)
        )
        payload = _pgm_header_bytes(data.shape[1], data.shape[0]) + np.ascontiguousarray(data).tobytes()
    else:
        raise FormatError(f"{path}: unsupported image extension {ext!r} (use .png or .pgm)")
    with open(path, "wb") as f:
        f.write(payload)


def read_image_u8(path):
    """Read an 8-bit grayscale PNG or P5 PGM as a uint8 array."""
    path = os.fspath(path)
    with open(path, "rb") as f:
        magic = f.read(8)
        f.seek(0)
        if magic[:2] == b"P5":
            w, h, _, offset = _read_pgm_header(f)
            f.seek(offset)
            data = f.read(w * h)
            if len(data) != w * h:
                raise FormatError(f"{path}: truncated PGM raster")
            return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()
        if magic[:1] == b"P":
            raise FormatError(f"{path}: only binary P5 PGM is supported")
        try:
            with Image.open(f) as im:
                mode = im.mode
                if mode != "L":
                    raise FormatError(
                        f"{path}: unsupported image mode {mode!r}; need 8-bit grayscale"
                    )
                im.load()
                return np.asarray(im, dtype=np.uint8).copy()
        except FormatError:
            raise
        except Exception as exc:
            raise FormatError(f"{path}: cannot decode image: {exc}") from None


def read_image(path):
    return read_image_u8(path).astype(np.float64) / 255.0


def read_mask(path):
    data = read_image_u8(path)
    if not np.all((data == 0) | (data == 255)):
        raise FormatError(f"{path}: mask must contain only 0 and 255")
    return data == 255
