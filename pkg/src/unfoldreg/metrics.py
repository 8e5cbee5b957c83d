"""Image quality metrics: SSoS combination, NMSE, PSNR and SSIM."""

from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import InputError

PSNR_CAP = 300.0
SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5  # radius 5, i.e. an 11x11 window at sigma 1.5
K1, K2 = 0.01, 0.03


@dataclass(frozen=True)
class MetricReport:
    nmse: float
    psnr: float
    ssim: float

    def as_dict(self):
        return asdict(self)


def ssos(x, axis=0):
    """Root sum of squares of |x| over the channel axis."""
    x = np.asarray(x)
    if x.ndim == 0 or x.shape[axis] < 1:
        raise InputError("ssos needs at least one channel")
    return np.sqrt(np.sum(np.abs(x) ** 2, axis=axis))


def nmse(xhat, xref):
    """||xhat - xref||^2 / ||xref||^2 (works on complex arrays)."""
    xhat, xref = _pair(xhat, xref)
    den = np.sum(np.abs(xref) ** 2)
    if den == 0:
        raise InputError("reference signal is zero")
    return float(np.sum(np.abs(xhat - xref) ** 2) / den)


def psnr(xhat, xref):
    xhat, xref = _pair(xhat, xref)
    peak = float(np.max(np.abs(xref)))
    if peak == 0:
        raise InputError("reference signal is zero")
    mse = float(np.mean(np.abs(xhat - xref) ** 2))
    if mse == 0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(peak**2 / mse), PSNR_CAP))


def ssim(xhat, xref):
    """Mean SSIM with a Gaussian window; the dynamic range is max(xref).

    Local statistics use reflected borders and a 5-pixel border is excluded
    from the mean (less on axes shorter than 11 pixels).
    """
    xhat, xref = _pair(xhat, xref)
    if np.iscomplexobj(xhat) or np.iscomplexobj(xref):
        raise InputError("ssim expects real images; take magnitudes first")
    xhat = xhat.astype(np.float64)
    xref = xref.astype(np.float64)
    rng = float(np.max(xref))
    if rng <= 0:
        raise InputError("reference image must have a positive maximum")
    c1, c2 = (K1 * rng) ** 2, (K2 * rng) ** 2

    def blur(a):
        return gaussian_filter(a, SSIM_SIGMA, mode="reflect", truncate=SSIM_TRUNCATE)

    mx, my = blur(xhat), blur(xref)
    sxx = blur(xhat * xhat) - mx * mx
    syy = blur(xref * xref) - my * my
    sxy = blur(xhat * xref) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    smap = num / den
    radius = int(SSIM_TRUNCATE * SSIM_SIGMA + 0.5)
    crop = tuple(slice(min(radius, (n - 1) // 2), n - min(radius, (n - 1) // 2)) for n in smap.shape)
    return float(smap[crop].mean())


def metrics(xhat, xref, channel_axis=None):
    """NMSE, PSNR and SSIM on magnitude images.

    With ``channel_axis`` the inputs are combined by :func:`ssos` first;
    otherwise the magnitude of each (complex) image is used.
    """
    if channel_axis is None:
        mh, mr = np.abs(np.asarray(xhat)), np.abs(np.asarray(xref))
    else:
        mh, mr = ssos(xhat, channel_axis), ssos(xref, channel_axis)
    mh, mr = _pair(mh, mr)
    if not np.any(mr):
        raise InputError("reference signal is zero")
    if mr.ndim == 1:
        mh, mr = mh[None], mr[None]
    return MetricReport(nmse(mh, mr), psnr(mh, mr), ssim(mh, mr))


def _pair(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise InputError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.size == 0:
        raise InputError("empty signal")
    return a, b
