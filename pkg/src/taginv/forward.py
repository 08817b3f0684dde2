"""
Tagged-image measurement operator.

For one frame and tag orientation the model is

    g = blur_gamma( warp_phi( a * |b1 * q_alpha + b2| ) )

with a sinusoidal base tag ``q_alpha`` along the orientation axis, an affine
fading map, a pullback through the deformation and an anisotropic Gaussian
PSF whose three widths are laid out per orientation.
"""

from dataclasses import dataclass, field

import numpy as np

from .fields import (
    conv_gaussian_separable,
    conv_gaussian_separable_adjoint,
    identity_map,
    sample_nearest,
    sample_trilinear,
    splat_trilinear,
)

ORIENTATIONS = ("x", "y", "z")
_AXIS = {"x": 0, "y": 1, "z": 2}
# (perpendicular-to-tags, parallel-to-tags, through-plane) grid axes
DEFAULT_FRAMES = {"x": (0, 1, 2), "y": (1, 0, 2), "z": (2, 0, 1)}


def orientation_axis(o):
    try:
        return _AXIS[o]
    except KeyError:
        raise ValueError(f"unknown tag orientation {o!r}") from None


def psf_frame(o, slice_axis=None):
    """Grid axes that (gamma_perp, gamma_par, gamma_thru) act along."""
    if slice_axis is None:
        return DEFAULT_FRAMES[o]
    perp = orientation_axis(o)
    if slice_axis == perp:
        raise ValueError("slice axis cannot be the tag direction")
    par = 3 - perp - slice_axis
    return (perp, par, slice_axis)


@dataclass
class ForwardParams:
    """Tag params alpha (4), PSF widths gamma (3), fading beta (2) for one frame."""
    alpha: np.ndarray = field(default_factory=lambda: np.array([0.0, 10.0, 0.0, 1.0]))
    gamma: np.ndarray = field(default_factory=lambda: np.zeros(3))
    beta: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0]))

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        self.gamma = np.asarray(self.gamma, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)

    def replace(self, **kw):
        d = dict(alpha=self.alpha, gamma=self.gamma, beta=self.beta)
        d.update(kw)
        return ForwardParams(**d)


def base_tag(dims, o, alpha):
    a1, a2, a3, a4 = (float(v) for v in alpha)
    if not a2 > 0:
        raise ValueError(f"tag spacing must be positive, got {a2}")
    ax = orientation_axis(o)
    r = np.arange(dims[ax], dtype=np.float64)
    line = a1 * np.cos(2.0 * np.pi * r / a2 + a3) + a4
    shape = [1, 1, 1]
    shape[ax] = dims[ax]
    return np.broadcast_to(line.reshape(shape), tuple(dims)).copy()


def apply_fading(q, beta):
    return np.abs(beta[0] * np.asarray(q) + beta[1])


def pullback(u, phi, mode="trilinear"):
    """Warp ``u`` by sampling it at the absolute coordinates ``phi``.

    ``phi`` is None for the identity map.
    """
    if phi is None:
        return np.asarray(u, dtype=np.float64).copy()
    phi = np.asarray(phi)
    if phi.shape[:3] != np.shape(u)[:3] or phi.shape[-1] != 3:
        raise ValueError(f"deformation shape {phi.shape} does not match volume {np.shape(u)}")
    if mode == "trilinear":
        return sample_trilinear(u, phi)
    if mode == "nearest":
        return sample_nearest(u, phi)
    raise ValueError(f"unknown interpolation mode {mode!r}")


def pullback_adjoint(r, phi):
    if phi is None:
        return np.asarray(r, dtype=np.float64).copy()
    return splat_trilinear(phi, r, np.shape(r))


def faded_tag(dims, o, params):
    return apply_fading(base_tag(dims, o, params.alpha), params.beta)


def forward(a, o, params, phi=None, slice_axis=None):
    """Model measurement for orientation ``o`` (Eq. fade -> multiply -> warp -> blur)."""
    a = np.asarray(a, dtype=np.float64)
    w = a * faded_tag(a.shape, o, params)
    return conv_gaussian_separable(pullback(w, phi), params.gamma, psf_frame(o, slice_axis))


def forward_adjoint(r, o, params, phi=None, slice_axis=None, tag=None):
    """Adjoint of ``a -> forward(a, ...)`` applied to a measurement-space volume."""
    if tag is None:
        tag = faded_tag(np.shape(r), o, params)
    s = conv_gaussian_separable_adjoint(r, params.gamma, psf_frame(o, slice_axis))
    return tag * pullback_adjoint(s, phi)


def frame_forward(a, params, phi=None, orientations=ORIENTATIONS, slice_axes=None):
    slice_axes = slice_axes or {}
    return {o: forward(a, o, params, phi, slice_axes.get(o)) for o in orientations}


def residual_loss(a, params, g, phi=None, slice_axes=None):
    """Sum over orientations of squared voxel residuals for one frame."""
    missing = [o for o in ORIENTATIONS if o not in g]
    if missing:
        raise ValueError(f"measurements missing orientation(s) {missing}")
    model = frame_forward(a, params, phi, slice_axes=slice_axes)
    return float(sum(np.sum((g[o] - model[o]) ** 2) for o in ORIENTATIONS))


def total_residual_loss(a, frame_params, measurements, phis, slice_axes=None):
    return float(sum(
        residual_loss(a, p, g, phi, slice_axes)
        for p, g, phi in zip(frame_params, measurements, phis)
    ))


def displacement_to_map(u):
    return identity_map(u.shape[:3]) + u
