"""Input validation helpers shared by the functional API and the estimators."""

import numpy as np

from .errors import ValidationError


def check_gray_image(img, name="image", copy=False):
    """Return ``img`` as a 2-D float64 array with values in [0, 1].

    Gray images are plain ``(h, w)`` arrays in this package; uint8 input is
    converted with the exact ``value / 255`` rule.
    """
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be 2-D (h, w), got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValidationError(f"{name} must be nonempty, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    if arr.dtype == bool or not np.issubdtype(arr.dtype, np.number):
        raise ValidationError(f"{name} must be numeric, got dtype {arr.dtype}")
    arr = arr.astype(np.float64, copy=copy)
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValidationError(f"{name} values must lie in [0, 1]")
    return arr


def check_mask(mask, shape=None, name="mask"):
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.dtype != bool:
        if not np.all((arr == 0) | (arr == 1)):
            raise ValidationError(f"{name} must be boolean or 0/1 valued")
        arr = arr.astype(bool)
    if shape is not None and arr.shape != tuple(shape):
        raise ValidationError(f"{name} shape {arr.shape} does not match {tuple(shape)}")
    return arr


def check_tensor4(x, name="x", channels=None, dtype=None):
    """Validate an ``[N, C, H, W]`` array."""
    arr = np.asarray(x)
    if arr.ndim != 4:
        raise ValidationError(f"{name} must be 4-D [N, C, H, W], got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ValidationError(f"{name} has an empty dimension: {arr.shape}")
    if channels is not None and arr.shape[1] != channels:
        raise ValidationError(f"{name} must have {channels} channel(s), got {arr.shape[1]}")
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    return arr


def check_same_shape(a, b, names=("a", "b")):
    if np.shape(a) != np.shape(b):
        raise ValidationError(
            f"{names[0]} shape {np.shape(a)} does not match {names[1]} shape {np.shape(b)}"
        )


def as_image_batch(X, name="X"):
    """Accept a single image, a stack ``[N, H, W]`` or a tensor ``[N, 1, H, W]``.

    Returns a float64 ``[N, 1, H, W]`` tensor with values in [0, 1].
    """
    arr = np.asarray(X)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr[:, None]
    arr = check_tensor4(arr, name=name, channels=1, dtype=np.float64)
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise ValidationError(f"{name} values must be finite and lie in [0, 1]")
    return arr


def check_positive_int(value, name):
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
        raise ValidationError(f"{name} must be a positive integer, got {value!r}")
    return int(value)
