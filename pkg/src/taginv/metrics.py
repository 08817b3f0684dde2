"""
Tag-removal baselines and image / motion quality metrics.

PSNR and SSIM follow the usual definitions (SSIM with a 7^3 Gaussian window,
sigma 1.5, K1 = 0.01, K2 = 0.03).  Motion error is measured on displacements
``phi - id`` inside a foreground mask of the true cine frame.
"""

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .fields import dft3_forward, dft3_inverse, fft_frequencies, gaussian_kernel1d, identity_map
from .forward import ORIENTATIONS, orientation_axis
from .motion import jacobian_det

FOREGROUND_THRESHOLD = 0.05
SSIM_SIGMA = 1.5
SSIM_RADIUS = 3
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_same(x, y):
    if np.shape(x) != np.shape(y):
        raise ValueError(f"grid mismatch: {np.shape(x)} vs {np.shape(y)}")


# -- baselines ---------------------------------------------------------------

def lowpass_fuse(volumes, sigma):
    """Gaussian low-pass along each tag direction, then the orientation average.

    ``volumes`` maps orientation -> tagged volume; ``sigma`` is a scalar or a
    per-orientation mapping.
    """
    out = []
    for o in ORIENTATIONS:
        if o not in volumes:
            continue
        s = sigma[o] if isinstance(sigma, dict) else sigma
        if not s >= 0:
            raise ValueError("low-pass width must be >= 0")
        g = np.asarray(volumes[o], dtype=np.float64)
        if s > 0:
            g = ndimage.correlate1d(g, gaussian_kernel1d(s), axis=orientation_axis(o), mode="nearest")
        out.append(g)
    if not out:
        raise ValueError("no tagged volumes given")
    return sum(out) / len(out)


def harp_demodulate(volumes, f0):
    """Band-pass one tag harmonic, take the complex magnitude, average, scale by 2.

    ``f0`` is the tag frequency in cycles per voxel; the pass band is a ball
    of radius f0/2 around +f0 along the tag direction.
    """
    if not f0 > 0:
        raise ValueError(f"tag frequency must be positive, got {f0}")
    out = []
    for o in ORIENTATIONS:
        if o not in volumes:
            continue
        g = np.asarray(volumes[o], dtype=np.float64)
        f = fft_frequencies(g.shape)
        center = np.zeros(3)
        center[orientation_axis(o)] = f0
        band = np.sum((f - center) ** 2, axis=-1) <= (0.5 * f0) ** 2
        spec = np.where(band, dft3_forward(g), 0.0)
        out.append(np.abs(np.fft.ifftn(spec)))
    if not out:
        raise ValueError("no tagged volumes given")
    return 2.0 * sum(out) / len(out)


# -- image metrics -----------------------------------------------------------

def minmax(x):
    x = np.asarray(x, dtype=np.float64)
    lo, hi = float(x.min()), float(x.max())
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def psnr(x, y, data_range=1.0):
    """10 log10(R^2 / MSE); identical inputs give +inf."""
    _check_same(x, y)
    mse = float(np.mean((np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * np.log10(data_range ** 2 / mse)


def psnr_normalized(x, y):
    """PSNR after min-max normalizing both images to [0, 1]."""
    return psnr(minmax(x), minmax(y), 1.0)


def _ssim_kernel():
    r = np.arange(-SSIM_RADIUS, SSIM_RADIUS + 1, dtype=np.float64)
    k = np.exp(-0.5 * (r / SSIM_SIGMA) ** 2)
    return k / k.sum()


def _window_mean(v, k):
    for ax in range(3):
        v = ndimage.correlate1d(v, k, axis=ax, mode="reflect")
    return v


def ssim(x, y, data_range=1.0):
    """Mean structural similarity over voxels whose window lies inside the grid."""
    _check_same(x, y)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.array_equal(x, y):
        return 1.0
    k = _ssim_kernel()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx, my = _window_mean(x, k), _window_mean(y, k)
    vx = _window_mean(x * x, k) - mx * mx
    vy = _window_mean(y * y, k) - my * my
    cxy = _window_mean(x * y, k) - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    r = SSIM_RADIUS
    inner = s[r:-r, r:-r, r:-r] if min(s.shape) > 2 * r else s
    return float(inner.mean())


def ssim_normalized(x, y):
    return ssim(minmax(x), minmax(y), 1.0)


# -- motion metrics ----------------------------------------------------------

def foreground_mask(volume, threshold=FOREGROUND_THRESHOLD):
    return np.asarray(volume) > threshold


def nearest_rank(values, q):
    """q-th percentile by the nearest-rank rule (q in (0, 100])."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        return float("nan")
    k = int(np.ceil(q / 100.0 * v.size))
    return float(v[min(max(k, 1), v.size) - 1])


def epe(u_est, u_gt, mask=None):
    """Mean and 95th percentile of the displacement error norm."""
    _check_same(u_est, u_gt)
    err = np.sqrt(np.sum((np.asarray(u_est, dtype=np.float64) - np.asarray(u_gt, dtype=np.float64)) ** 2, axis=-1))
    if mask is not None:
        err = err[np.asarray(mask, dtype=bool)]
    err = err.ravel()
    if err.size == 0:
        return float("nan"), float("nan")
    return float(err.mean()), nearest_rank(err, 95)


def negdet_pct(phi):
    """Percentage of interior voxels with a negative Jacobian determinant."""
    det = jacobian_det(phi)[1:-1, 1:-1, 1:-1]
    return 100.0 * float(np.count_nonzero(det < 0)) / det.size


def displacement(phi):
    phi = np.asarray(phi, dtype=np.float64)
    return phi - identity_map(phi.shape[:3])


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    epe_mean: float = float("nan")
    epe_p95: float = float("nan")
    negdet_pct: float = float("nan")

    def to_dict(self):
        return {k: _jsonable(v) for k, v in asdict(self).items()}


def _jsonable(v):
    v = float(v)
    if np.isnan(v):
        return None
    if np.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def image_report(est, truth):
    return MetricReport(psnr_normalized(est, truth), ssim_normalized(est, truth))


def frame_report(est_cine, true_cine, phi_est=None, phi_true=None, threshold=FOREGROUND_THRESHOLD):
    rep = image_report(est_cine, true_cine)
    if phi_est is not None and phi_true is not None:
        mask = foreground_mask(true_cine, threshold)
        rep.epe_mean, rep.epe_p95 = epe(displacement(phi_est), displacement(phi_true), mask)
        rep.negdet_pct = negdet_pct(phi_est)
    return rep
