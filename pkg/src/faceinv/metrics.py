"""Image-quality and semantic-consistency metrics for attack evaluation.

``ms_ssim`` is multi-scale structural similarity on the luma channel:
Gaussian-windowed local statistics (valid padding), contrast/structure
terms accumulated across dyadic scales with the standard five-scale weight
vector, truncated without renormalization when fewer scales are requested.
Per-scale means are clamped at zero before exponentiation so fractional
powers stay real; the result lives in [0, 1] and equals 1 exactly for
identical images.

``famse`` is a facial-attribute MSE: landmark-guided crops of eyes, nose,
and mouth are passed through the attribute encoder and compared per region.

``region_semantic_similarity`` scores how well an image's joint-space
embedding matches each region segment of a semantic embedding.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .nn import cosine
from .semantics import SemanticEmbedding
from .types import check_image

__all__ = [
    "MS_SSIM_WEIGHTS",
    "REGION_LANDMARKS",
    "luma",
    "ms_ssim",
    "region_box",
    "region_crop",
    "famse",
    "pixel_mse",
    "region_semantic_similarity",
]

# standard five-scale weights; truncated (not renormalized) for fewer scales
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)

# 68-point convention: region index sets used by famse
REGION_LANDMARKS = {
    "eyes": np.arange(36, 48),
    "nose": np.arange(27, 36),
    "mouth": np.arange(48, 68),
}


def luma(image: np.ndarray) -> np.ndarray:
    """Rec. 601 luma: 0.299 R + 0.587 G + 0.114 B."""
    arr = check_image(image)
    return 0.299 * arr[:, :, 0] + 0.587 * arr[:, :, 1] + 0.114 * arr[:, :, 2]


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation of a 2-D array with a 1-D window."""
    rows = sliding_window_view(img, window.size, axis=0) @ window
    return sliding_window_view(rows, window.size, axis=1) @ window


def _ssim_means(x: np.ndarray, y: np.ndarray, window: np.ndarray,
                c1: float, c2: float) -> tuple[float, float]:
    """Mean SSIM and mean contrast-structure term over one scale."""
    mu_x = _filter_valid(x, window)
    mu_y = _filter_valid(y, window)
    var_x = _filter_valid(x * x, window) - mu_x * mu_x
    var_y = _filter_valid(y * y, window) - mu_y * mu_y
    cov = _filter_valid(x * y, window) - mu_x * mu_y
    cs_map = (2.0 * cov + c2) / (var_x + var_y + c2)
    lum_map = (2.0 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1)
    return float(np.mean(lum_map * cs_map)), float(np.mean(cs_map))


def _downsample2(img: np.ndarray) -> np.ndarray:
    """2x2 average pooling; trailing odd row/column is dropped."""
    h2, w2 = (img.shape[0] // 2) * 2, (img.shape[1] // 2) * 2
    img = img[:h2, :w2]
    return (img[0::2, 0::2] + img[1::2, 0::2]
            + img[0::2, 1::2] + img[1::2, 1::2]) / 4.0


def ms_ssim(image_a: np.ndarray, image_b: np.ndarray, scales: int = 5,
            window_size: int = 11, sigma: float = 1.5,
            k1: float = 0.01, k2: float = 0.03) -> float:
    """Multi-scale SSIM of two equal-shaped images, in [0, 1].

    Requires min(H, W) >= 2**(scales-1) * window_size so the coarsest scale
    still fits the window.
    """
    if image_a.shape != image_b.shape:
        raise ValueError(
            f"image shapes differ: {image_a.shape} vs {image_b.shape}")
    if not 1 <= scales <= len(MS_SSIM_WEIGHTS):
        raise ValueError(f"scales must be in [1, {len(MS_SSIM_WEIGHTS)}]")
    x = luma(image_a)
    y = luma(image_b)
    needed = (2 ** (scales - 1)) * window_size
    if min(x.shape) < needed:
        raise ValueError(
            f"image side {min(x.shape)} too small for {scales} scales with "
            f"window {window_size}; need at least {needed}")
    window = _gaussian_window(window_size, sigma)
    c1 = k1 * k1    # dynamic range is 1
    c2 = k2 * k2
    weights = MS_SSIM_WEIGHTS[:scales]
    result = 1.0
    for s in range(scales):
        mean_ssim, mean_cs = _ssim_means(x, y, window, c1, c2)
        if s < scales - 1:
            result *= max(mean_cs, 0.0) ** weights[s]
            x = _downsample2(x)
            y = _downsample2(y)
        else:
            result *= max(mean_ssim, 0.0) ** weights[s]
    return float(result)


def region_box(points: np.ndarray, pad_ratio: float = 0.2) -> tuple[float, float, float, float]:
    """Padded bounding box (x0, y0, x1, y1) of a landmark subset.

    Padding is pad_ratio of the box extent, applied per dimension.
    """
    pts = np.asarray(points, dtype=np.float64)
    x0, y0 = pts.min(axis=0)
    x1, y1 = pts.max(axis=0)
    dx = pad_ratio * (x1 - x0)
    dy = pad_ratio * (y1 - y0)
    return x0 - dx, y0 - dy, x1 + dx, y1 + dy


def region_crop(image: np.ndarray, points: np.ndarray,
                pad_ratio: float = 0.2) -> np.ndarray:
    """Crop the padded landmark bounding box, clipped to the image."""
    h, w = image.shape[:2]
    x0, y0, x1, y1 = region_box(points, pad_ratio)
    xi0 = max(int(np.floor(x0)), 0)
    yi0 = max(int(np.floor(y0)), 0)
    xi1 = min(int(np.ceil(x1)), w)
    yi1 = min(int(np.ceil(y1)), h)
    if xi1 <= xi0:
        xi1 = min(xi0 + 1, w)
        xi0 = xi1 - 1
    if yi1 <= yi0:
        yi1 = min(yi0 + 1, h)
        yi0 = yi1 - 1
    return image[yi0:yi1, xi0:xi1]


def famse(image_a: np.ndarray, image_b: np.ndarray, landmark_detector,
          attribute_encoder, pad_ratio: float = 0.2) -> float:
    """Facial-attribute MSE over eyes, nose, and mouth crops.

    Each image is cropped by its own landmarks; crops are encoded by the
    attribute backend and compared per region, then averaged. Propagates
    NoFaceError from the detector.
    """
    a = check_image(image_a)
    b = check_image(image_b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    lm_a = landmark_detector.detect(a).points
    lm_b = landmark_detector.detect(b).points
    errors = []
    for region, idx in REGION_LANDMARKS.items():
        feat_a = attribute_encoder.encode(region_crop(a, lm_a[idx], pad_ratio))
        feat_b = attribute_encoder.encode(region_crop(b, lm_b[idx], pad_ratio))
        diff = feat_a - feat_b
        errors.append(float(np.mean(diff * diff)))
    return float(np.mean(errors))


def pixel_mse(image_a: np.ndarray, image_b: np.ndarray) -> float:
    if image_a.shape != image_b.shape:
        raise ValueError(f"image shapes differ: {image_a.shape} vs {image_b.shape}")
    diff = np.asarray(image_a, dtype=np.float64) - np.asarray(image_b, dtype=np.float64)
    return float(np.mean(diff * diff))


def region_semantic_similarity(image: np.ndarray, semantics: SemanticEmbedding,
                               vl_encoder) -> dict[str, float]:
    """Cosine between the image's joint embedding and each region segment."""
    emb = vl_encoder.encode_image(image)
    return {region: cosine(emb.values, semantics.segment(region))
            for region in semantics.region_order}
