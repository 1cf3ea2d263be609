"""Channel-estimation and image-reconstruction metrics."""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError

PSNR_CAP_DB = 100.0


@dataclass(frozen=True)
class MetricReport:
    name: str
    value: float
    units: str
    sample_count: int

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError("sample_count must be at least 1")


def _pair(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def mse(a, b):
    """Mean of |a - b|^2 over all entries; complex entries count re^2 + im^2."""
    a, b = _pair(a, b)
    d = a - b
    return float(np.mean(d.real**2 + d.imag**2)) if np.iscomplexobj(d) else float(np.mean(d * d))


def rmse(a, b):
    return float(np.sqrt(mse(a, b)))


def mae(a, b):
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def channel_report(estimate, truth):
    n = np.asarray(truth).size
    return [MetricReport("mse", mse(estimate, truth), "normalized", n),
            MetricReport("rmse", rmse(estimate, truth), "normalized", n),
            MetricReport("mae", mae(estimate, truth), "normalized", n)]


def psnr(ref, test, max_val=1.0):
    """Peak signal-to-noise ratio in dB, capped at 100 dB (returned for zero error)."""
    if max_val <= 0:
        raise ValueError("max_val must be positive")
    err = mse(np.asarray(ref, dtype=np.float64), np.asarray(test, dtype=np.float64))
    if err == 0:
        return PSNR_CAP_DB
    return float(min(PSNR_CAP_DB, 10.0 * np.log10(max_val**2 / err)))


def luminance(image):
    image = np.asarray(image, dtype=np.float64)
    return image.mean(axis=-1) if image.ndim == 3 else image


def ssim(ref, test, max_val=1.0, window=8, k1=0.01, k2=0.03):
    """Mean structural similarity over every ``window``-square patch (stride 1)
    of the luminance plane.

    Exponents are all one and ``c3 = c2 / 2``, under which the contrast and
    structure terms collapse into ``(2 cov + c2) / (var_a + var_b + c2)``.
    That collapsed form is what is evaluated, so identical inputs give
    exactly 1.
    """
    ref, test = _pair(ref, test)
    a, b = luminance(ref), luminance(test)
    if window > min(a.shape[-2:]):
        raise DimensionError(f"window {window} exceeds image size {a.shape[-2:]}")
    c1 = (k1 * max_val) ** 2
    c2 = (k2 * max_val) ** 2
    wa = sliding_window_view(a, (window, window), axis=(-2, -1))
    wb = sliding_window_view(b, (window, window), axis=(-2, -1))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    da = wa - mu_a[..., None, None]
    db = wb - mu_b[..., None, None]
    var_a = (da * da).mean(axis=(-2, -1))
    var_b = (db * db).mean(axis=(-2, -1))
    cov = (da * db).mean(axis=(-2, -1))
    lum = (2 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1)
    con_struct = (2 * cov + c2) / (var_a + var_b + c2)
    return float(np.mean(lum * con_struct))

