"""
Imaging

Core image and mask types shared by every stage of the pipeline, plus
graymap/PNG file I/O, bilinear resizing and the dataset directory layout:

    <root>/normal/*.pgm|*.png
    <root>/abnormal/*.pgm|*.png

Images are H x W float64 arrays with intensities in [0, 1]; masks are H x W
boolean arrays. Both are frozen after construction.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError

from errors import (
    DimensionMismatchError,
    ImageNotFoundError,
    PPADIOError,
    UnsupportedFormatError,
    ZeroDimensionError,
)

IMAGE_SUFFIXES = (".pgm", ".png")
DEFAULT_IMAGE_SIZE = 224


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


# ============================================================================
# DATA STRUCTURES
# ============================================================================

@dataclass(frozen=True)
class GrayImage:
    """
    Grayscale image with intensities in [0, 1].

    Attributes:
        data: (height, width) float64 array, row-major, read-only
    """
    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim != 2:
            raise DimensionMismatchError(f"GrayImage needs a 2-D array, got shape {arr.shape}")
        if arr.shape[0] == 0 or arr.shape[1] == 0:
            raise ZeroDimensionError(f"GrayImage has a zero side: {arr.shape}")
        if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("GrayImage intensities must lie in [0, 1]")
        object.__setattr__(self, "data", _frozen(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True)
class BinaryMask:
    """
    Binary mask. Used both for anomaly masks and for position-view regions.

    Attributes:
        data: (height, width) bool array, read-only
    """
    data: np.ndarray

    def __post_init__(self):
        raw = np.asarray(self.data)
        if raw.ndim != 2:
            raise DimensionMismatchError(f"BinaryMask needs a 2-D array, got shape {raw.shape}")
        if raw.shape[0] == 0 or raw.shape[1] == 0:
            raise ZeroDimensionError(f"BinaryMask has a zero side: {raw.shape}")
        if raw.dtype != np.bool_ and not np.all((raw == 0) | (raw == 1)):
            raise ValueError("BinaryMask values must be exactly 0 or 1")
        object.__setattr__(self, "data", _frozen(raw.astype(bool, copy=True)))

    @classmethod
    def empty(cls, height: int, width: int) -> "BinaryMask":
        return cls(np.zeros((height, width), dtype=bool))

    @classmethod
    def full(cls, height: int, width: int) -> "BinaryMask":
        return cls(np.ones((height, width), dtype=bool))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape

    @property
    def area(self) -> int:
        return int(self.data.sum())

    def is_empty(self) -> bool:
        return not self.data.any()


def check_same_shape(a, b, what: str = "arrays") -> None:
    """Raise DimensionMismatchError unless two image-like objects share a shape."""
    if tuple(a.shape) != tuple(b.shape):
        raise DimensionMismatchError(f"{what} differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")


# ============================================================================
# FILE I/O
# ============================================================================

def _decode_gray_bytes(img: Image.Image) -> np.ndarray:
    """Return the raster as float64 in 0..255, averaging RGB channels."""
    if img.mode == "1":
        img = img.convert("L")
    if img.mode == "P":
        img = img.convert("RGB")
    if img.mode == "L":
        return np.asarray(img, dtype=np.float64)
    if img.mode in ("RGB", "RGBA"):
        rgb = np.asarray(img, dtype=np.float64)[..., :3]
        return rgb.mean(axis=2)
    if img.mode == "LA":
        return np.asarray(img, dtype=np.float64)[..., 0]
    raise UnsupportedFormatError(f"Unsupported raster mode '{img.mode}' (8-bit gray or RGB only)")


def load_image(path, target_size: int = DEFAULT_IMAGE_SIZE) -> GrayImage:
    """
    Load a graymap or PNG as a square GrayImage.

    Args:
        path: File to read (.pgm or .png)
        target_size: Output side length in pixels

    Returns:
        GrayImage of shape (target_size, target_size), bilinearly resampled,
        intensities scaled by 1/255

    Raises:
        ImageNotFoundError, UnsupportedFormatError, ZeroDimensionError
    """
    path = Path(path)
    if target_size <= 0:
        raise ZeroDimensionError(f"target_size must be positive, got {target_size}")
    if not path.is_file():
        raise ImageNotFoundError(f"Image not found: {path}")
    if path.suffix.lower() not in IMAGE_SUFFIXES:
        raise UnsupportedFormatError(f"Unsupported image type '{path.suffix}' for {path}")

    try:
        with Image.open(path) as img:
            img.load()
            if img.width == 0 or img.height == 0:
                raise ZeroDimensionError(f"Image has a zero side: {path}")
            levels = _decode_gray_bytes(img)
    except (UnidentifiedImageError, SyntaxError) as e:
        raise UnsupportedFormatError(f"Cannot decode {path}: {e}") from e

    if levels.size == 0:
        raise ZeroDimensionError(f"Image has a zero side: {path}")

    if levels.shape != (target_size, target_size):
        resized = Image.fromarray(levels.astype(np.float32)).resize(
            (target_size, target_size), Image.Resampling.BILINEAR
        )
        levels = np.asarray(resized, dtype=np.float64)

    return GrayImage(np.clip(levels / 255.0, 0.0, 1.0))


def to_bytes(data: np.ndarray) -> np.ndarray:
    """Quantize [0,1] intensities to uint8 with round-half-up."""
    return np.floor(np.asarray(data, dtype=np.float64) * 255.0 + 0.5).astype(np.uint8)


def save_image(img: GrayImage, path) -> None:
    """
    Write an 8-bit binary graymap (P5) with byte round(i * 255).

    Raises:
        PPADIOError: If the file cannot be written
    """
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(to_bytes(img.data)).save(path, format="PPM")
    except OSError as e:
        raise PPADIOError(f"Cannot write {path}: {e}") from e


def save_mask(mask: BinaryMask, path) -> None:
    """Write a mask as a 0/255 graymap."""
    save_image(GrayImage(mask.data.astype(np.float64)), path)


# ============================================================================
# DATASET LAYOUT
# ============================================================================

def list_images(directory) -> List[Path]:
    """All .pgm/.png files directly inside a directory, sorted by name."""
    directory = Path(directory)
    if not directory.is_dir():
        return []
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def list_dataset(root) -> Tuple[List[Path], List[Path]]:
    """
    Return (normal paths, abnormal paths) for a dataset root.

    Missing class folders yield empty lists; callers decide whether that is an error.
    """
    root = Path(root)
    return list_images(root / "normal"), list_images(root / "abnormal")


# ============================================================================
# OVERLAYS (viz panels)
# ============================================================================

def overlay_points(img: GrayImage, points: Iterable, value: float = 1.0, radius: int = 1) -> GrayImage:
    """Mark each point with a small square of the given intensity."""
    out = np.array(img.data)
    h, w = out.shape
    for p in points:
        c, r = int(np.floor(p.x)), int(np.floor(p.y))
        out[max(r - radius, 0):min(r + radius + 1, h), max(c - radius, 0):min(c + radius + 1, w)] = value
    return GrayImage(out)


def overlay_polyline(img: GrayImage, points: Sequence, value: float = 1.0, closed: bool = True) -> GrayImage:
    """Draw a polyline by dense sampling of each segment."""
    out = np.array(img.data)
    h, w = out.shape
    pts = list(points)
    if closed and pts:
        pts = pts + [pts[0]]
    for a, b in zip(pts[:-1], pts[1:]):
        n = int(np.ceil(2 * max(abs(b.x - a.x), abs(b.y - a.y)))) + 1
        xs = np.clip(np.floor(np.linspace(a.x, b.x, n)).astype(int), 0, w - 1)
        ys = np.clip(np.floor(np.linspace(a.y, b.y, n)).astype(int), 0, h - 1)
        out[ys, xs] = value
    return GrayImage(out)
