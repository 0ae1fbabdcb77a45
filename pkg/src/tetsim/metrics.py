"""PSNR, SSIM and their high-frequency variants for images in [0, 1]."""
import math
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import InvalidInputError

DEFAULT_HF_SIGMA = 5.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03
HF_SHIFT = 0.5
# MSE at or below this is float64 rounding noise (RMS 1e-10, far under any
# quantization step), so PSNR reports the infinite sentinel.
MSE_FLOOR = 1e-20


def check_image(img, name="image", *, unit_range=True):
    """Float64 array of shape (H, W) or (H, W, C) with C in {1, 3}."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] != 3):
        raise InvalidInputError(f"{name} must have shape (H, W), (H, W, 1) or (H, W, 3), got {img.shape}")
    if img.shape[0] == 0 or img.shape[1] == 0:
        raise InvalidInputError(f"{name} is empty")
    if not np.all(np.isfinite(img)):
        raise InvalidInputError(f"{name} contains non-finite values")
    if unit_range and (img.min() < 0.0 or img.max() > 1.0):
        raise InvalidInputError(f"{name} values must lie in [0, 1]")
    return img


def _pair(a, b, unit_range=True):
    a = check_image(a, "a", unit_range=unit_range)
    b = check_image(b, "b", unit_range=unit_range)
    if a.shape != b.shape:
        raise InvalidInputError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def _channels(img):
    return [img] if img.ndim == 2 else [img[..., c] for c in range(img.shape[2])]


def highpass(img, sigma=DEFAULT_HF_SIGMA):
    """``img`` minus its Gaussian blur (reflect border, radius ceil(3 sigma))."""
    if not sigma > 0:
        raise InvalidInputError("sigma must be > 0")
    img = check_image(img, unit_range=False)
    radius = int(math.ceil(3.0 * sigma))
    sig = (sigma, sigma, 0) if img.ndim == 3 else sigma
    rad = (radius, radius, 0) if img.ndim == 3 else radius
    return img - ndimage.gaussian_filter(img, sig, mode="reflect", radius=rad)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return g


def _valid_filter(x, g):
    """Weighted means over every fully contained window."""
    out = ndimage.correlate1d(x, g, axis=0, mode="constant")
    out = ndimage.correlate1d(out, g, axis=1, mode="constant")
    r = len(g) // 2
    return out[r: x.shape[0] - r, r: x.shape[1] - r]


def ssim_map(a, b, data_range=1.0):
    """Local SSIM over valid 11x11 Gaussian windows of single-channel images."""
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise InvalidInputError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")
    g = gaussian_window()
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mu_a = _valid_filter(a, g)
    mu_b = _valid_filter(b, g)
    var_a = _valid_filter(a * a, g) - mu_a**2
    var_b = _valid_filter(b * b, g) - mu_b**2
    cov = _valid_filter(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, data_range=1.0):
    a, b = _pair(a, b)
    return float(np.mean([ssim_map(x, y, data_range).mean() for x, y in zip(_channels(a), _channels(b))]))


def _psnr_channels(a, b, data_range):
    vals = []
    for x, y in zip(_channels(a), _channels(b)):
        mse = float(np.mean((x - y) ** 2))
        vals.append(math.inf if mse <= MSE_FLOOR else 10.0 * math.log10(data_range**2 / mse))
    return float(np.mean(vals))


def psnr(a, b, data_range=1.0):
    """PSNR in dB, averaged over channels; identical inputs (MSE at or below
    ``MSE_FLOOR``) give ``inf``."""
    a, b = _pair(a, b)
    return _psnr_channels(a, b, data_range)


def hf_residuals(gt, pred, sigma=DEFAULT_HF_SIGMA):
    gt, pred = _pair(gt, pred)
    return highpass(gt, sigma), highpass(pred, sigma)


def hf_ssim(gt, pred, sigma=DEFAULT_HF_SIGMA):
    """SSIM of the high-pass residuals, shifted by +0.5 and clamped to [0, 1]."""
    hg, hp = hf_residuals(gt, pred, sigma)
    return ssim(np.clip(hg + HF_SHIFT, 0, 1), np.clip(hp + HF_SHIFT, 0, 1))


def hf_psnr(gt, pred, sigma=DEFAULT_HF_SIGMA):
    """PSNR (L = 1) between the raw high-pass residuals."""
    hg, hp = hf_residuals(gt, pred, sigma)
    return _psnr_channels(hg, hp, 1.0)


def evaluate_pair(gt, pred, sigma=DEFAULT_HF_SIGMA):
    return {
        "psnr": psnr(gt, pred),
        "ssim": ssim(gt, pred),
        "hf_psnr": hf_psnr(gt, pred, sigma),
        "hf_ssim": hf_ssim(gt, pred, sigma),
    }


IMAGE_SUFFIXES = (".png", ".ppm", ".pgm", ".pnm")


def load_image(path):
    """Read PNG/PPM/PGM into [0, 1] floats (alpha dropped, palettes expanded)."""
    from PIL import Image

    path = Path(path)
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I"):
            arr = np.asarray(im, dtype=np.float64)
            maxval = 65535.0 if arr.max() > 255 or im.mode.startswith("I;16") else 255.0
            return arr / maxval
        if im.mode in ("1", "LA"):
            im = im.convert("L")
        elif im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        return np.asarray(im, dtype=np.float64) / 255.0
