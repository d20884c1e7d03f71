"""Restoration of striped lunar mosaic imagery with a from-scratch U-Net."""

__version__ = "0.1.0"

from .errors import (
    BoundsError,
    CorruptCheckpointError,
    FormatError,
    LunarRestoreError,
    NonFiniteLossError,
    ValidationError,
)
from .estimators import StripeCorruptor, UNetInpainter
from .mosaic_io import (
    GLOBAL_MOSAIC_HEADER,
    GeoPoint,
    MosaicHeader,
    MosaicSource,
    PixelRect,
    geo_to_pixel,
    pixel_to_geo,
    read_image,
    read_window,
    resize_bilinear,
    write_image,
)
from .stripes import StripeTemplate, detect_stripes, extract_template, mask_coverage, superimpose
from .unet import UNetConfig

__all__ = [
    "BoundsError",
    "CorruptCheckpointError",
    "FormatError",
    "GLOBAL_MOSAIC_HEADER",
    "GeoPoint",
    "LunarRestoreError",
    "MosaicHeader",
    "MosaicSource",
    "NonFiniteLossError",
    "PixelRect",
    "StripeCorruptor",
    "StripeTemplate",
    "UNetConfig",
    "UNetInpainter",
    "ValidationError",
    "detect_stripes",
    "extract_template",
    "geo_to_pixel",
    "mask_coverage",
    "pixel_to_geo",
    "read_image",
    "read_window",
    "resize_bilinear",
    "superimpose",
    "write_image",
]
