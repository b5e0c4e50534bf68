"""Registration error, image quality metrics and train/test splits."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .errors import DimensionMismatch, IdMismatch, ImageTooSmall, PreconditionError
from .geometry import angle_between

PSNR_CAP = 99.0
SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
HOLDOUT_RATIO = 19 / 150


@dataclass(frozen=True)
class RegistrationError:
    """Mean per-axis angular gaps (degrees) and mean center distance."""

    dtheta_x: float
    dtheta_y: float
    dtheta_z: float
    dp: float

    @property
    def max_angle(self):
        return max(self.dtheta_x, self.dtheta_y, self.dtheta_z)

    def as_tuple(self):
        return (self.dtheta_x, self.dtheta_y, self.dtheta_z, self.dp)


def registration_error(est, gt):
    if set(est.ids) != set(gt.ids):
        raise IdMismatch("estimated and ground-truth pose sets have different ids")
    per_axis = np.zeros(3)
    dp = 0.0
    for i in gt.ids:
        Re, Rg = est[i].R, gt[i].R
        for a in range(3):
            per_axis[a] += angle_between(Re[:, a], Rg[:, a])
        dp += float(np.linalg.norm(est[i].center - gt[i].center))
    n = len(gt)
    ang = np.degrees(per_axis / n)
    return RegistrationError(float(ang[0]), float(ang[1]), float(ang[2]), dp / n)


def _pixels(img):
    return np.asarray(getattr(img, "pixels", img), dtype=float)


def _same_shape(a, b):
    if a.shape != b.shape:
        raise DimensionMismatch(f"image shapes differ: {a.shape} vs {b.shape}")


def psnr(a, b):
    a, b = _pixels(a), _pixels(b)
    _same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP)


def _gaussian_window(size=SSIM_WIN, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img, w):
    half = len(w) // 2
    out = correlate1d(correlate1d(img, w, axis=0, mode="constant"), w, axis=1, mode="constant")
    return out[half:-half, half:-half]


def ssim(a, b):
    """Structural similarity of the channel-mean luminance, averaged over
    window positions that fit entirely inside the image."""
    a, b = _pixels(a), _pixels(b)
    _same_shape(a, b)
    if a.ndim == 3:
        a, b = a.mean(axis=2), b.mean(axis=2)
    if min(a.shape) < SSIM_WIN:
        raise ImageTooSmall(f"SSIM needs at least {SSIM_WIN} px per side, got {a.shape}")
    C1, C2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    w = _gaussian_window()
    mu_a, mu_b = _filter_valid(a, w), _filter_valid(b, w)
    var_a = _filter_valid(a * a, w) - mu_a ** 2
    var_b = _filter_valid(b * b, w) - mu_b ** 2
    cov = _filter_valid(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
    den = (mu_a ** 2 + mu_b ** 2 + C1) * (var_a + var_b + C2)
    return float(np.mean(num / den))


def holdout_split(ids, ratio=HOLDOUT_RATIO, seed=0):
    """Seeded (train, test) split; ``ratio`` is the held-out fraction.

    Both lists keep the input order.
    """
    if not 0.0 < ratio < 1.0:
        raise PreconditionError(f"holdout ratio must lie in (0, 1), got {ratio}")
    ids = list(ids)
    n_test = int(round(len(ids) * ratio))
    n_test = min(max(n_test, 1), len(ids) - 1) if len(ids) > 1 else 0
    rng = np.random.default_rng(seed)
    test = set(rng.choice(len(ids), size=n_test, replace=False).tolist())
    return ([i for k, i in enumerate(ids) if k not in test],
            [i for k, i in enumerate(ids) if k in test])
