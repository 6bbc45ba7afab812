import math
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy.ndimage import uniform_filter

from crossview.core.errors import UsageError

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 8


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise UsageError(f"Image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def l2_distance(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.linalg.norm((a - b).ravel()))


def psnr_from_mse(value: float, max_value: float = 255.0) -> float:
    """10 log10(MAX^2 / mse); +inf when the images are identical."""
    if value == 0:
        return math.inf
    return 10.0 * math.log10(max_value**2 / value)


def psnr(a, b, max_value: float = 255.0) -> float:
    if not max_value > 0:
        raise UsageError(f"MAX must be positive, got {max_value}")
    return psnr_from_mse(mse(a, b), max_value)


def _ssim_channel(a: np.ndarray, b: np.ndarray, c1: float, c2: float) -> float:
    h, w = a.shape
    # uniform_filter with an even size centres window i on [i - 4, i + 3]
    valid = (slice(SSIM_WINDOW // 2, h - SSIM_WINDOW // 2 + 1), slice(SSIM_WINDOW // 2, w - SSIM_WINDOW // 2 + 1))

    def local_mean(x):
        return uniform_filter(x, size=SSIM_WINDOW, mode="constant")[valid]

    mu_a, mu_b = local_mean(a), local_mean(b)
    var_a = local_mean(a * a) - mu_a * mu_a
    var_b = local_mean(b * b) - mu_b * mu_b
    cov = local_mean(a * b) - mu_a * mu_b

    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a, b, max_value: float = 255.0) -> float:
    """
    Mean SSIM over all fully contained 8x8 uniform windows, computed per
    channel and averaged. K1=0.01, K2=0.03, population statistics.

    Raises:
        UsageError: shape mismatch or an image smaller than the window.
    """
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., np.newaxis], b[..., np.newaxis]
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise UsageError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape[:2]}")
    c1 = (SSIM_K1 * max_value) ** 2
    c2 = (SSIM_K2 * max_value) ** 2
    return float(np.mean([_ssim_channel(a[..., i], b[..., i], c1, c2) for i in range(a.shape[2])]))


@dataclass
class ImageQualityReport:
    psnr: float
    ssim: float
    mse: float
    l2: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "psnr": json_float(self.psnr),
            "ssim": self.ssim,
            "mse": self.mse,
            "l2": self.l2,
        }


def image_quality(a, b, max_value: float = 255.0) -> ImageQualityReport:
    value = mse(a, b)
    return ImageQualityReport(
        psnr=psnr_from_mse(value, max_value), ssim=ssim(a, b, max_value), mse=value, l2=l2_distance(a, b)
    )


def json_float(value: float):
    """Infinite values become the string "inf" so reports stay valid JSON."""
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return value
