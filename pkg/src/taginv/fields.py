"""
Regular-grid scalar and vector fields.

Volumes are numpy arrays indexed ``[x, y, z]``; vector fields carry a trailing
component axis of length 3.  Coordinates are voxel indices (spacing 1), and
every sampler clamps to the edge of the grid.

Trilinear sampling, its spatial gradient and its adjoint (splatting) are the
hot loops of the whole pipeline, so they are compiled with numba.  Splatting
runs serially so that floating point accumulation order is fixed.
"""

from dataclasses import dataclass
import math

import numba
import numpy as np
from scipy import ndimage

MAX_VOXELS = 2 ** 24


@dataclass(frozen=True)
class GridSpec:
    dims: tuple
    max_voxels: int = MAX_VOXELS

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3:
            raise ValueError(f"grid needs three dims, got {dims}")
        if min(dims) < 4:
            raise ValueError(f"every grid dim must be >= 4, got {dims}")
        if int(np.prod(dims)) > self.max_voxels:
            raise ValueError(f"grid {dims} exceeds the voxel cap {self.max_voxels}")
        object.__setattr__(self, "dims", dims)

    @property
    def size(self):
        return int(np.prod(self.dims))

    def coords(self):
        """Voxel-center coordinates, shape (nx, ny, nz, 3)."""
        return identity_map(self.dims)


def identity_map(dims):
    axes = [np.arange(n, dtype=np.float64) for n in dims]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def _as_points(points):
    pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    bad = ~np.isfinite(pts).all(axis=1)
    if bad.any():
        raise ValueError(f"non-finite sample point at index {int(np.argmax(bad))}")
    return pts


def _as_channels(vol):
    vol = np.asarray(vol, dtype=np.float64)
    if vol.ndim == 3:
        return np.ascontiguousarray(vol[..., None]), True
    return np.ascontiguousarray(vol), False


@numba.njit(cache=True, inline="always")
def _cell(p, n):
    # Lower corner of the cell containing p; on a face the lower cell wins.
    if n == 1:
        return 0, 0.0, False
    inside = True
    if p < 0.0:
        p = 0.0
        inside = False
    elif p > n - 1.0:
        p = n - 1.0
        inside = False
    i0 = int(math.ceil(p)) - 1
    if i0 < 0:
        i0 = 0
    elif i0 > n - 2:
        i0 = n - 2
    return i0, p - i0, inside


@numba.njit(cache=True, parallel=True)
def _interp_kernel(vol, pts):
    nx, ny, nz, nc = vol.shape
    m = pts.shape[0]
    out = np.empty((m, nc))
    for q in numba.prange(m):
        i, fx, _ = _cell(pts[q, 0], nx)
        j, fy, _ = _cell(pts[q, 1], ny)
        k, fz, _ = _cell(pts[q, 2], nz)
        i1 = min(i + 1, nx - 1)
        j1 = min(j + 1, ny - 1)
        k1 = min(k + 1, nz - 1)
        gx = 1.0 - fx
        gy = 1.0 - fy
        gz = 1.0 - fz
        for c in range(nc):
            out[q, c] = (
                gx * gy * gz * vol[i, j, k, c]
                + fx * gy * gz * vol[i1, j, k, c]
                + gx * fy * gz * vol[i, j1, k, c]
                + fx * fy * gz * vol[i1, j1, k, c]
                + gx * gy * fz * vol[i, j, k1, c]
                + fx * gy * fz * vol[i1, j, k1, c]
                + gx * fy * fz * vol[i, j1, k1, c]
                + fx * fy * fz * vol[i1, j1, k1, c]
            )
    return out


@numba.njit(cache=True, parallel=True)
def _interp_grad_kernel(vol, pts):
    nx, ny, nz, nc = vol.shape
    m = pts.shape[0]
    val = np.empty((m, nc))
    grad = np.zeros((m, nc, 3))
    for q in numba.prange(m):
        i, fx, inx = _cell(pts[q, 0], nx)
        j, fy, iny = _cell(pts[q, 1], ny)
        k, fz, inz = _cell(pts[q, 2], nz)
        i1 = min(i + 1, nx - 1)
        j1 = min(j + 1, ny - 1)
        k1 = min(k + 1, nz - 1)
        gx = 1.0 - fx
        gy = 1.0 - fy
        gz = 1.0 - fz
        for c in range(nc):
            c000 = vol[i, j, k, c]
            c100 = vol[i1, j, k, c]
            c010 = vol[i, j1, k, c]
            c110 = vol[i1, j1, k, c]
            c001 = vol[i, j, k1, c]
            c101 = vol[i1, j, k1, c]
            c011 = vol[i, j1, k1, c]
            c111 = vol[i1, j1, k1, c]
            val[q, c] = (
                gx * gy * gz * c000 + fx * gy * gz * c100
                + gx * fy * gz * c010 + fx * fy * gz * c110
                + gx * gy * fz * c001 + fx * gy * fz * c101
                + gx * fy * fz * c011 + fx * fy * fz * c111
            )
            if inx and nx > 1:
                grad[q, c, 0] = (
                    gy * gz * (c100 - c000) + fy * gz * (c110 - c010)
                    + gy * fz * (c101 - c001) + fy * fz * (c111 - c011)
                )
            if iny and ny > 1:
                grad[q, c, 1] = (
                    gx * gz * (c010 - c000) + fx * gz * (c110 - c100)
                    + gx * fz * (c011 - c001) + fx * fz * (c111 - c101)
                )
            if inz and nz > 1:
                grad[q, c, 2] = (
                    gx * gy * (c001 - c000) + fx * gy * (c101 - c100)
                    + gx * fy * (c011 - c010) + fx * fy * (c111 - c110)
                )
    return val, grad


@numba.njit(cache=True)
def _splat_kernel(pts, w, nx, ny, nz):
    m, nc = w.shape
    out = np.zeros((nx, ny, nz, nc))
    for q in range(m):
        i, fx, _ = _cell(pts[q, 0], nx)
        j, fy, _ = _cell(pts[q, 1], ny)
        k, fz, _ = _cell(pts[q, 2], nz)
        i1 = min(i + 1, nx - 1)
        j1 = min(j + 1, ny - 1)
        k1 = min(k + 1, nz - 1)
        gx = 1.0 - fx
        gy = 1.0 - fy
        gz = 1.0 - fz
        for c in range(nc):
            v = w[q, c]
            out[i, j, k, c] += gx * gy * gz * v
            out[i1, j, k, c] += fx * gy * gz * v
            out[i, j1, k, c] += gx * fy * gz * v
            out[i1, j1, k, c] += fx * fy * gz * v
            out[i, j, k1, c] += gx * gy * fz * v
            out[i1, j, k1, c] += fx * gy * fz * v
            out[i, j1, k1, c] += gx * fy * fz * v
            out[i1, j1, k1, c] += fx * fy * fz * v
    return out


@numba.njit(cache=True, parallel=True)
def _compose_kernel(u):
    # u(r) + u(r + u(r)) at every voxel r
    nx, ny, nz, _ = u.shape
    out = np.empty_like(u)
    for a in numba.prange(nx):
        for b in range(ny):
            for d in range(nz):
                i, fx, _ = _cell(a + u[a, b, d, 0], nx)
                j, fy, _ = _cell(b + u[a, b, d, 1], ny)
                k, fz, _ = _cell(d + u[a, b, d, 2], nz)
                i1 = min(i + 1, nx - 1)
                j1 = min(j + 1, ny - 1)
                k1 = min(k + 1, nz - 1)
                gx = 1.0 - fx
                gy = 1.0 - fy
                gz = 1.0 - fz
                for c in range(3):
                    out[a, b, d, c] = u[a, b, d, c] + (
                        gx * gy * gz * u[i, j, k, c] + fx * gy * gz * u[i1, j, k, c]
                        + gx * fy * gz * u[i, j1, k, c] + fx * fy * gz * u[i1, j1, k, c]
                        + gx * gy * fz * u[i, j, k1, c] + fx * gy * fz * u[i1, j, k1, c]
                        + gx * fy * fz * u[i, j1, k1, c] + fx * fy * fz * u[i1, j1, k1, c]
                    )
    return out


@numba.njit(cache=True)
def _compose_vjp_kernel(u, g):
    # Adjoint of u -> u + u(id + u) applied to g, through both the values and
    # the sample points.  Serial so the splat accumulates in a fixed order.
    nx, ny, nz, _ = u.shape
    out = g.copy()
    for a in range(nx):
        for b in range(ny):
            for d in range(nz):
                i, fx, inx = _cell(a + u[a, b, d, 0], nx)
                j, fy, iny = _cell(b + u[a, b, d, 1], ny)
                k, fz, inz = _cell(d + u[a, b, d, 2], nz)
                i1 = min(i + 1, nx - 1)
                j1 = min(j + 1, ny - 1)
                k1 = min(k + 1, nz - 1)
                gx = 1.0 - fx
                gy = 1.0 - fy
                gz = 1.0 - fz
                for c in range(3):
                    v = g[a, b, d, c]
                    if v == 0.0:
                        continue
                    c000 = u[i, j, k, c]
                    c100 = u[i1, j, k, c]
                    c010 = u[i, j1, k, c]
                    c110 = u[i1, j1, k, c]
                    c001 = u[i, j, k1, c]
                    c101 = u[i1, j, k1, c]
                    c011 = u[i, j1, k1, c]
                    c111 = u[i1, j1, k1, c]
                    if inx:
                        out[a, b, d, 0] += v * (
                            gy * gz * (c100 - c000) + fy * gz * (c110 - c010)
                            + gy * fz * (c101 - c001) + fy * fz * (c111 - c011))
                    if iny:
                        out[a, b, d, 1] += v * (
                            gx * gz * (c010 - c000) + fx * gz * (c110 - c100)
                            + gx * fz * (c011 - c001) + fx * fz * (c111 - c101))
                    if inz:
                        out[a, b, d, 2] += v * (
                            gx * gy * (c001 - c000) + fx * gy * (c101 - c100)
                            + gx * fy * (c011 - c010) + fx * fy * (c111 - c110))
                    out[i, j, k, c] += gx * gy * gz * v
                    out[i1, j, k, c] += fx * gy * gz * v
                    out[i, j1, k, c] += gx * fy * gz * v
                    out[i1, j1, k, c] += fx * fy * gz * v
                    out[i, j, k1, c] += gx * gy * fz * v
                    out[i1, j, k1, c] += fx * gy * fz * v
                    out[i, j1, k1, c] += gx * fy * fz * v
                    out[i1, j1, k1, c] += fx * fy * fz * v
    return out


def compose_self(u):
    """Displacement of (id + u) o (id + u)."""
    return _compose_kernel(np.ascontiguousarray(u, dtype=np.float64))


def compose_self_vjp(u, g):
    """Vector-Jacobian product of :func:`compose_self` at ``u``."""
    return _compose_vjp_kernel(np.ascontiguousarray(u, dtype=np.float64),
                               np.ascontiguousarray(g, dtype=np.float64))


@numba.njit(cache=True, parallel=True)
def _nearest_kernel(vol, pts):
    nx, ny, nz, nc = vol.shape
    m = pts.shape[0]
    out = np.empty((m, nc))
    for q in numba.prange(m):
        i = min(max(int(math.floor(pts[q, 0] + 0.5)), 0), nx - 1)
        j = min(max(int(math.floor(pts[q, 1] + 0.5)), 0), ny - 1)
        k = min(max(int(math.floor(pts[q, 2] + 0.5)), 0), nz - 1)
        for c in range(nc):
            out[q, c] = vol[i, j, k, c]
    return out


def sample_trilinear(vol, points):
    """Trilinear interpolation of a volume (or multi-channel field) at points.

    ``points`` has shape (..., 3) in voxel coordinates; the result has the
    leading shape of ``points`` (plus the channel axis for vector fields).
    """
    points = np.asarray(points, dtype=np.float64)
    lead = points.shape[:-1]
    arr, scalar = _as_channels(vol)
    out = _interp_kernel(arr, _as_points(points))
    return out.reshape(lead) if scalar else out.reshape(lead + (arr.shape[-1],))


def sample_trilinear_grad(vol, points):
    """Spatial gradient of the trilinear interpolant at points.

    Returns (values, gradients).  The gradient is zero along any axis where
    the point lies outside the grid (the clamp is flat there).
    """
    points = np.asarray(points, dtype=np.float64)
    lead = points.shape[:-1]
    arr, scalar = _as_channels(vol)
    val, grad = _interp_grad_kernel(arr, _as_points(points))
    if scalar:
        return val.reshape(lead), grad[:, 0, :].reshape(lead + (3,))
    nc = arr.shape[-1]
    return val.reshape(lead + (nc,)), grad.reshape(lead + (nc, 3))


def splat_trilinear(points, weights, dims):
    """Adjoint of :func:`sample_trilinear` with respect to the volume values."""
    points = np.asarray(points, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    lead = points.shape[:-1]
    scalar = w.shape == lead
    w2 = np.ascontiguousarray(w.reshape(int(np.prod(lead)), -1))
    out = _splat_kernel(_as_points(points), w2, *[int(d) for d in dims])
    return out[..., 0] if scalar else out


def sample_nearest(vol, points):
    points = np.asarray(points, dtype=np.float64)
    lead = points.shape[:-1]
    arr, scalar = _as_channels(vol)
    out = _nearest_kernel(arr, _as_points(points))
    return out.reshape(lead) if scalar else out.reshape(lead + (arr.shape[-1],))


# -- Gaussian blur -----------------------------------------------------------

def gaussian_kernel1d(sigma):
    """Unit-sum Gaussian taps on the integer support |u| <= ceil(4 sigma)."""
    if sigma < 0:
        raise ValueError(f"negative sigma {sigma}")
    if sigma == 0:
        return np.ones(1)
    h = int(math.ceil(4.0 * sigma))
    u = np.arange(-h, h + 1, dtype=np.float64)
    w = np.exp(-0.5 * (u / sigma) ** 2)
    return w / w.sum()


def gaussian_kernel1d_dsigma(sigma):
    """Derivative of :func:`gaussian_kernel1d` taps in sigma, support held fixed."""
    if sigma <= 0:
        return np.zeros(1)
    h = int(math.ceil(4.0 * sigma))
    u = np.arange(-h, h + 1, dtype=np.float64)
    k = gaussian_kernel1d(sigma)
    d = u * u / sigma ** 3
    return k * (d - np.sum(k * d))


def _blur_axis(x, w, axis):
    if w.size == 1:
        return x
    return ndimage.correlate1d(x, w, axis=axis, mode="nearest")


def _blur_axis_adjoint(y, w, axis):
    if w.size == 1:
        return y
    h = w.size // 2
    n = y.shape[axis]
    pad = [(0, 0)] * y.ndim
    pad[axis] = (h, h)
    e = ndimage.correlate1d(np.pad(y, pad), w[::-1], axis=axis, mode="constant")
    e = np.moveaxis(e, axis, 0)
    out = e[h:h + n].copy()
    out[0] += e[:h].sum(axis=0)
    out[-1] += e[h + n:].sum(axis=0)
    return np.moveaxis(out, 0, axis)


def conv_gaussian_separable(vol, sigmas, frame=(0, 1, 2)):
    """Blur with a normalized anisotropic Gaussian, replicate boundary.

    ``sigmas[k]`` is applied along grid axis ``frame[k]``.
    """
    out = np.asarray(vol, dtype=np.float64)
    for s, ax in zip(sigmas, frame):
        out = _blur_axis(out, gaussian_kernel1d(float(s)), ax)
    return out


def conv_gaussian_separable_adjoint(vol, sigmas, frame=(0, 1, 2)):
    out = np.asarray(vol, dtype=np.float64)
    for s, ax in zip(sigmas, frame):
        out = _blur_axis_adjoint(out, gaussian_kernel1d(float(s)), ax)
    return out


def conv_gaussian_separable_dsigma(vol, sigmas, k, frame=(0, 1, 2)):
    """Derivative of :func:`conv_gaussian_separable` with respect to ``sigmas[k]``."""
    out = np.asarray(vol, dtype=np.float64)
    for j, (s, ax) in enumerate(zip(sigmas, frame)):
        if j == k:
            w = gaussian_kernel1d_dsigma(float(s))
            if w.size == 1:
                return np.zeros_like(out)
            out = ndimage.correlate1d(out, w, axis=ax, mode="nearest")
        else:
            out = _blur_axis(out, gaussian_kernel1d(float(s)), ax)
    return out


# -- DFT ---------------------------------------------------------------------

def dft3_forward(vol):
    vol = np.asarray(vol, dtype=np.float64)
    if not np.isfinite(vol).all():
        raise ValueError("non-finite volume")
    return np.fft.fftn(vol)


def dft3_inverse(spec):
    return np.fft.ifftn(spec).real


def fft_frequencies(dims):
    """Per-axis frequencies in cycles/voxel broadcast to the grid, (nx,ny,nz,3)."""
    axes = [np.fft.fftfreq(n) for n in dims]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
