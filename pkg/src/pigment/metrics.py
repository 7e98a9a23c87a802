"""Image quality metrics: PSNR, SSIM and CIE76 color difference."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidInputError

PSNR_CAP = 100.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

# linear sRGB -> XYZ, D65 reference white
SRGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
XYZ_TO_SRGB = np.linalg.inv(SRGB_TO_XYZ)
WHITE_D65 = SRGB_TO_XYZ.sum(axis=1)

_DELTA = 6.0 / 29.0


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images, capped at 100 dB."""
    a, b = _pair(a, b)
    mse = np.mean((np.clip(a, 0, 1) - np.clip(b, 0, 1)) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img, g):
    # separable correlation, 'valid' region only
    rows = sliding_window_view(img, g.size, axis=0) @ g
    return sliding_window_view(rows, g.size, axis=1) @ g


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), averaged over channels.

    Parameters
    ----------
    a, b : array_like, shape (H, W) or (H, W, C)
        Images with values nominally in ``[0, data_range]``; they are clamped.

    Returns
    -------
    float
    """
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise InvalidInputError(f"image {a.shape[:2]} smaller than the {SSIM_WINDOW}px window")
    a = np.clip(a, 0, data_range)
    b = np.clip(b, 0, data_range)
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def srgb_to_linear(c):
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(c):
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * np.abs(c) ** (1 / 2.4) - 0.055)


def _f(t):
    return np.where(t > _DELTA ** 3, np.cbrt(t), t / (3 * _DELTA ** 2) + 4.0 / 29.0)


def _f_inv(t):
    return np.where(t > _DELTA, t ** 3, 3 * _DELTA ** 2 * (t - 4.0 / 29.0))


def srgb_to_lab(c):
    """sRGB (``(..., 3)`` in [0, 1]) to CIE L*a*b* under D65."""
    xyz = srgb_to_linear(c) @ SRGB_TO_XYZ.T
    f = _f(xyz / WHITE_D65)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def lab_to_srgb(lab):
    """Inverse of :func:`srgb_to_lab` (no gamut clipping)."""
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    xyz = _f_inv(np.stack([fx, fy, fz], axis=-1)) * WHITE_D65
    return linear_to_srgb(xyz @ XYZ_TO_SRGB.T)


def quantize_8bit(img):
    """Round to the nearest 8-bit level (half up) after clamping to [0, 1]."""
    return np.floor(np.clip(img, 0, 1) * 255.0 + 0.5) / 255.0


def delta_e_ab(a, b) -> float:
    """Mean per-pixel Euclidean distance in L*a*b*, on 8-bit sRGB renderings."""
    a, b = _pair(a, b)
    la = srgb_to_lab(quantize_8bit(a))
    lb = srgb_to_lab(quantize_8bit(b))
    return float(np.mean(np.linalg.norm(la - lb, axis=-1)))
