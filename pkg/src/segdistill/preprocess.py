"""Input preprocessing: local contrast normalization, then standardization.

Both run per channel in double precision internally and return the input
dtype.  The pipeline order is contrast first, standardize second.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, ParameterError

STD_SCALE = 127.0


def contrast_normalize(x, k: int = 7, alpha: float = 1.0, beta: float = 0.5):
    """Divisive normalization by the local mean energy.

    Each value is divided by ``(1 + alpha * m)**beta`` where ``m`` averages
    ``x**2`` over the k x k *forward* window anchored at the pixel (indices
    [i, i+k) x [j, j+k)), zero-padded on the right and bottom edges only.
    Channels are handled independently; input is (H, W) or (C, H, W).
    """
    x = np.asarray(x)
    if k < 1:
        raise ParameterError(f"contrast_normalize: k must be >= 1, got {k}")
    if alpha < 0:
        raise ParameterError(f"contrast_normalize: alpha must be >= 0, got {alpha}")
    if x.ndim == 2:
        return _contrast_plane(x, k, alpha, beta)
    if x.ndim == 3:
        return np.stack([_contrast_plane(plane, k, alpha, beta) for plane in x])
    raise DimensionError(f"contrast_normalize: expected 2-d or 3-d input, "
                         f"got {x.ndim}-d")


def _contrast_plane(plane, k, alpha, beta):
    h, w = plane.shape
    sq = np.zeros((h + k, w + k), dtype=np.float64)
    sq[:h, :w] = np.asarray(plane, dtype=np.float64) ** 2
    integral = np.zeros((h + k + 1, w + k + 1), dtype=np.float64)
    integral[1:, 1:] = sq.cumsum(axis=0).cumsum(axis=1)
    window = (integral[k:k + h, k:k + w] - integral[:h, k:k + w]
              - integral[k:k + h, :w] + integral[:h, :w])
    mean_sq = window / (k * k)
    out = plane / (1.0 + alpha * mean_sq) ** beta
    return out.astype(plane.dtype) if np.asarray(plane).dtype != np.float64 else out


def standardize(x):
    """Shift to zero mean, then scale so the largest magnitude is 127.

    The mean and maximum run over the whole image (all channels).  A constant
    image maps to all zeros.
    """
    x = np.asarray(x)
    centered = x.astype(np.float64) - x.astype(np.float64).mean()
    peak = np.abs(centered).max()
    if peak == 0.0:
        return np.zeros_like(x, dtype=x.dtype if x.dtype.kind == "f" else np.float64)
    out = centered * (STD_SCALE / peak)
    return out.astype(x.dtype) if x.dtype.kind == "f" else out


def preprocess_image(image_u8, dtype=np.float32):
    """Full input pipeline: HWC uint8 -> contrast-normalized, standardized
    CHW float."""
    image = np.asarray(image_u8)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DimensionError(f"preprocess_image: expected HxWx3, got {image.shape}")
    chw = image.astype(np.float64).transpose(2, 0, 1)
    return standardize(contrast_normalize(chw)).astype(dtype)
