"""Image loading, saving, resizing, and color conversion.

Images are H x W x 3 float arrays with values in [0,1]; this module is the
boundary between files on disk and those arrays.  PNG (8-bit RGB) is the
canonical output format; PNG and JPEG are accepted as input.
"""

from __future__ import annotations

import os

import numpy as np
from PIL import Image, UnidentifiedImageError

from .autodiff import resample_matrix
from .errors import CorruptImageError, InvalidDimensionsError, UnsupportedFormatError

# Minimum side length for an image entering a transfer stage.
MIN_TRANSFER_SIDE = 32

_GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])


def ensure_image(img, name="image"):
    """Validate an H x W x 3 float array in [0,1]; float64 inputs stay float64."""
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InvalidDimensionsError(f"{name} must be HxWx3, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise CorruptImageError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise CorruptImageError(f"{name} has values outside [0,1]")
    return arr


def ensure_transfer_size(img, name="image"):
    img = ensure_image(img, name)
    h, w = img.shape[:2]
    if h < MIN_TRANSFER_SIDE or w < MIN_TRANSFER_SIDE:
        raise InvalidDimensionsError(
            f"{name} is {h}x{w}; transfer stages need at least "
            f"{MIN_TRANSFER_SIDE}x{MIN_TRANSFER_SIDE}"
        )
    return img


def load_image(path):
    """Load a PNG or JPEG file into an H x W x 3 array scaled to [0,1].

    Grayscale files are replicated to 3 channels; alpha is discarded.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    try:
        with Image.open(path) as im:
            if im.format not in ("PNG", "JPEG"):
                raise UnsupportedFormatError(
                    f"{path}: format {im.format!r} not supported (PNG/JPEG only)"
                )
            im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except UnidentifiedImageError as e:
        raise UnsupportedFormatError(f"{path}: not a recognizable image") from e
    except OSError as e:
        raise CorruptImageError(f"{path}: {e}") from e
    return arr


def load_image_bytes(data):
    """Decode PNG/JPEG bytes; same contract as load_image."""
    import io

    try:
        with Image.open(io.BytesIO(data)) as im:
            if im.format not in ("PNG", "JPEG"):
                raise UnsupportedFormatError(
                    f"format {im.format!r} not supported (PNG/JPEG only)"
                )
            im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except UnidentifiedImageError as e:
        raise UnsupportedFormatError("not a recognizable image") from e
    except OSError as e:
        raise CorruptImageError(str(e)) from e
    return arr


def save_image(img, path):
    """Write an image array as an 8-bit RGB PNG."""
    img = ensure_image(img)
    data = np.round(img * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def encode_png(img):
    """Encode an image array as PNG bytes."""
    import io

    img = ensure_image(img)
    data = np.round(img * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(data, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def to_grayscale(img):
    """Replace all channels with ITU-R 601 luma, keeping the 3-channel shape.

    Already-gray inputs (R=G=B everywhere) are returned unchanged, which
    makes the conversion exactly idempotent.
    """
    img = ensure_image(img)
    if np.array_equal(img[:, :, 0], img[:, :, 1]) and np.array_equal(
        img[:, :, 1], img[:, :, 2]
    ):
        return img.copy()
    luma = img @ _GRAY_WEIGHTS.astype(img.dtype)
    out = np.repeat(luma[:, :, None], 3, axis=2)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def resize(img, h, w):
    """Bilinear resize to exactly h x w, clamped to [0,1].

    Resizing to the current dimensions returns a bit-identical copy.
    """
    if h < MIN_TRANSFER_SIDE or w < MIN_TRANSFER_SIDE:
        raise InvalidDimensionsError(f"target {h}x{w} below minimum {MIN_TRANSFER_SIDE}")
    img = ensure_image(img)
    src_h, src_w = img.shape[:2]
    if (src_h, src_w) == (h, w):
        return img.copy()
    rh = resample_matrix(src_h, h, dtype=np.float64)
    rw = resample_matrix(src_w, w, dtype=np.float64)
    out = np.einsum("ij,jkc->ikc", rh, img.astype(np.float64), optimize=True)
    out = np.einsum("ikc,lk->ilc", out, rw, optimize=True)
    return np.clip(out, 0.0, 1.0).astype(np.float32)
