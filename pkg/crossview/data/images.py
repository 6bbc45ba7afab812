from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from crossview.core.errors import DataError

PathLike = Union[str, Path]


def read_rgb(path: PathLike) -> np.ndarray:
    """Reads an image file as an HxWx3 uint8 array."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"Image not found: {path}")
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()
    except (UnidentifiedImageError, OSError) as e:
        raise DataError(f"Cannot decode image {path}: {e}") from e


def write_png(path: PathLike, pixels: np.ndarray):
    """Writes an HxWx3 (or HxW mask) array as PNG. PNG metadata is left empty."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = np.asarray(pixels)
    if pixels.dtype == bool:
        pixels = pixels.astype(np.uint8) * 255
    if pixels.dtype != np.uint8:
        raise DataError(f"PNG output must be 8-bit, got {pixels.dtype}")
    try:
        Image.fromarray(pixels).save(path, format="PNG", optimize=False)
    except OSError as e:
        raise DataError(f"Cannot write {path}: {e}") from e


def resize_rgb(pixels: np.ndarray, width: int, height: int) -> np.ndarray:
    """Bilinear resize of an 8-bit RGB array."""
    if pixels.shape[1] == width and pixels.shape[0] == height:
        return pixels
    img = Image.fromarray(pixels).resize((width, height), Image.Resampling.BILINEAR)
    return np.asarray(img, dtype=np.uint8).copy()
