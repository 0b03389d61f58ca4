"""Core value types passed between pipeline stages.

Images are float64 numpy arrays of shape (H, W, 3) with values in [0, 1];
``check_image`` is the single validation chokepoint. The small dataclasses
below tag 1-D vectors with their provenance (which model produced a
template, which modality an embedding came from) so mixups fail loudly
instead of silently comparing incompatible spaces.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "check_image",
    "resize_nearest",
    "FaceTemplate",
    "VLEmbedding",
    "LatentCode",
    "NoiseVector",
    "LandmarkSet",
    "make_noise",
]


def check_image(img: np.ndarray, min_side: int = 8) -> np.ndarray:
    """Validate an (H, W, 3) image in [0, 1] and return it as float64."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {arr.shape}")
    h, w = arr.shape[:2]
    if h < min_side or w < min_side:
        raise ValueError(f"image too small: {h}x{w}, minimum side is {min_side}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(
            f"image values outside [0, 1]: min={arr.min():.6g} max={arr.max():.6g}")
    return arr


def resize_nearest(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize. Exact for integer up/down factors."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    h, w = img.shape[:2]
    rows = np.minimum((np.arange(out_h) * h) // out_h, h - 1).astype(int)
    cols = np.minimum((np.arange(out_w) * w) // out_w, w - 1).astype(int)
    return img[rows][:, cols]


def _check_vector(values: np.ndarray, what: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{what} must be a 1-D vector, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{what} must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains non-finite values")
    return arr


@dataclass
class FaceTemplate:
    """Face recognition embedding plus the id of the model that produced it."""

    values: np.ndarray
    source_model_id: str

    def __post_init__(self):
        self.values = _check_vector(self.values, "template")
        if float(np.linalg.norm(self.values)) == 0.0:
            raise ValueError("template has zero norm")
        if not self.source_model_id:
            raise ValueError("template requires a source_model_id")

    @property
    def dim(self) -> int:
        return self.values.size


@dataclass
class VLEmbedding:
    """Joint vision-language embedding tagged with its input modality."""

    values: np.ndarray
    modality: str

    def __post_init__(self):
        self.values = _check_vector(self.values, "embedding")
        if self.modality not in ("image", "text"):
            raise ValueError(f"modality must be 'image' or 'text', got {self.modality!r}")

    @property
    def dim(self) -> int:
        return self.values.size


@dataclass
class LatentCode:
    """Point in the generator's intermediate latent space."""

    values: np.ndarray

    def __post_init__(self):
        self.values = _check_vector(self.values, "latent code")

    @property
    def dim(self) -> int:
        return self.values.size


@dataclass
class NoiseVector:
    """Standard-normal draw with the seed that produced it, for replay."""

    values: np.ndarray
    rng_seed: int

    def __post_init__(self):
        self.values = _check_vector(self.values, "noise vector")

    @property
    def dim(self) -> int:
        return self.values.size


def make_noise(dim: int, rng_seed: int) -> NoiseVector:
    rng = np.random.default_rng(rng_seed)
    return NoiseVector(rng.standard_normal(dim), rng_seed)


@dataclass
class LandmarkSet:
    """68 facial landmarks as (x, y) pixel coordinates, row i = point i."""

    points: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.points, dtype=np.float64)
        if arr.shape != (68, 2):
            raise ValueError(f"expected 68x2 landmark array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("landmarks contain non-finite values")
        self.points = arr

    def check_bounds(self, height: int, width: int) -> None:
        x, y = self.points[:, 0], self.points[:, 1]
        if x.min() < 0 or y.min() < 0 or x.max() >= width or y.max() >= height:
            raise ValueError("landmarks fall outside the image bounds")
