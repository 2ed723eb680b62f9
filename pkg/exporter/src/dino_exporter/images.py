"""Image loading: anything PIL reads, resized to the model input size."""

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import UnreadableImage

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".gif", ".tif", ".tiff", ".webp")


def load_rgb(path, size: int) -> np.ndarray:
    """Return a (size, size, 3) float32 array in [0, 1]."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (size, size):
                im = im.resize((size, size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise UnreadableImage(f"{path}: {exc}") from exc
    if arr.shape != (size, size, 3):
        raise UnreadableImage(f"{path}: decoded to shape {arr.shape}")
    return arr
