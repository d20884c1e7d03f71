"""Inference: fill masked pixels of corrupted crops and restore mosaic regions.

A *model* here is anything with ``restore_batch(x) -> prediction`` over
``[N, 1, H, W]`` arrays, an ``input_multiple`` and a ``checkpoint_id``:
a fitted :class:`~lunar_restore.estimators.UNetInpainter` or one of the stub
models. Known pixels are never altered when compositing.
"""

import json
import os

import numpy as np

from .errors import ValidationError
from .estimators import ConstantModel, IdentityModel, UNetInpainter, pad_to_multiple
from .mosaic_io import geo_rect_to_pixel_rect, read_window, write_image
from .stripes import (
    DEFAULT_COL_FRAC_THRESH,
    DEFAULT_ZERO_THRESH,
    detect_stripes,
    mask_coverage,
)
from .trainer import Checkpoint
from .validation import check_gray_image, check_mask


def as_model(obj):
    """Coerce a checkpoint, checkpoint path or stub name into a model."""
    if isinstance(obj, Checkpoint):
        return UNetInpainter.from_checkpoint(obj)
    if isinstance(obj, (str, os.PathLike)):
        name = os.fspath(obj)
        if name == "stub:identity":
            return IdentityModel()
        if name.startswith("stub:constant"):
            _, _, value = name.partition("stub:constant:")
            return ConstantModel(float(value) if value else 0.5)
        return UNetInpainter.load(name)
    if not hasattr(obj, "restore_batch"):
        raise ValidationError(f"{obj!r} is not a restoration model")
    return obj


def restore_batch(model, corrupted, masks, composite=True):
    """Batch form of :func:`restore_crop` over ``[N, 1, H, W]`` arrays."""
    h, w = corrupted.shape[2:]
    multiple = getattr(model, "input_multiple", 1)
    pred = model.restore_batch(pad_to_multiple(corrupted, multiple))[:, :, :h, :w]
    if pred.shape != corrupted.shape:
        raise ValidationError(f"model returned shape {pred.shape}, expected {corrupted.shape}")
    pred = np.clip(pred, 0.0, 1.0)
    if not composite:
        return pred
    return np.where(masks, pred, corrupted)


def restore_crop(model, corrupted, mask, composite=True):
    """Restore one crop: the input off-mask, the model's prediction on-mask.

    Sizes that are not a multiple of the model's ``2**depth`` are reflect-
    padded for inference and cropped back afterwards.
    """
    corrupted = check_gray_image(corrupted, "corrupted")
    mask = check_mask(mask, corrupted.shape)
    if composite and not mask.any():
        return corrupted.copy()
    model = as_model(model)
    return restore_batch(model, corrupted[None, None], mask[None, None], composite)[0, 0]


def restore_region(
    source,
    corner_a,
    corner_b,
    model,
    out_path,
    zero_thresh=DEFAULT_ZERO_THRESH,
    col_frac_thresh=DEFAULT_COL_FRAC_THRESH,
    composite=True,
):
    """Read a geodetic rectangle from ``source``, fill its stripes, write PNG + sidecar.

    The sidecar (``<out stem>.json``) records the pixel rectangle, detected
    coverage and the checkpoint id. Returns the sidecar dict.
    """
    rect = geo_rect_to_pixel_rect(source.header, corner_a, corner_b)
    window = read_window(source, rect)
    mask = detect_stripes(window, zero_thresh, col_frac_thresh)
    model = as_model(model)
    stripes_found = bool(mask.any())
    if stripes_found:
        restored = restore_crop(model, window, mask, composite)
    else:
        restored = window
    out_dir = os.path.dirname(os.path.abspath(out_path))
    os.makedirs(out_dir, exist_ok=True)
    write_image(restored, out_path)
    sidecar = {
        "source": getattr(source, "name", None),
        "corner_a": {"lon_deg": float(corner_a[0]), "lat_deg": float(corner_a[1])},
        "corner_b": {"lon_deg": float(corner_b[0]), "lat_deg": float(corner_b[1])},
        "pixel_rect": rect._asdict(),
        "stripes_found": stripes_found,
        "verbatim_copy": not stripes_found,
        "coverage": mask_coverage(mask),
        "composited": bool(composite),
        "checkpoint_id": model.checkpoint_id,
        "zero_thresh": zero_thresh,
        "col_frac_thresh": col_frac_thresh,
    }
    with open(sidecar_for(out_path), "w") as f:
        json.dump(sidecar, f, indent=2)
        f.write("\n")
    return sidecar


def sidecar_for(out_path):
    return os.path.splitext(os.fspath(out_path))[0] + ".json"
