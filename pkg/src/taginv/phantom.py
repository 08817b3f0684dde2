"""
Synthetic ground truth: ellipsoid phantoms, incompressible motion and tagged
measurement sequences.
"""

from dataclasses import dataclass, field
import math

import numpy as np
from scipy import ndimage

from .fields import GridSpec, conv_gaussian_separable, identity_map, sample_trilinear
from .forward import ORIENTATIONS, ForwardParams, forward, pullback


def make_rng(seed):
    """Counter-based generator; identical seeds give identical draw streams."""
    return np.random.Generator(np.random.Philox(int(seed)))


@dataclass
class Ellipsoid:
    center: tuple
    semi_axes: tuple
    angles: tuple = (0.0, 0.0, 0.0)
    intensity: float = 1.0
    softness: float = 0.0


@dataclass
class PhantomSpec:
    grid: GridSpec
    ellipsoids: list = field(default_factory=list)
    background: float = 0.0


def rotation(angles):
    """Rotation matrix from z-y-x Euler angles (radians)."""
    a, b, c = angles
    rz = np.array([[math.cos(a), -math.sin(a), 0], [math.sin(a), math.cos(a), 0], [0, 0, 1]])
    ry = np.array([[math.cos(b), 0, math.sin(b)], [0, 1, 0], [-math.sin(b), 0, math.cos(b)]])
    rx = np.array([[1, 0, 0], [0, math.cos(c), -math.sin(c)], [0, math.sin(c), math.cos(c)]])
    return rz @ ry @ rx


def ellipsoid_distance(points, e):
    """Radial signed distance: (normalized radius - 1) times the mean semi-axis."""
    R = rotation(e.angles)
    local = (np.asarray(points, dtype=np.float64) - np.asarray(e.center)) @ R
    rho = np.sqrt(np.sum((local / np.asarray(e.semi_axes)) ** 2, axis=-1))
    return (rho - 1.0) * float(np.mean(e.semi_axes))


def ellipsoid_indicator(points, e):
    sd = ellipsoid_distance(points, e)
    if e.softness <= 0:
        return (sd <= 0).astype(np.float64)
    return 0.5 * (1.0 - np.tanh(0.5 * sd / e.softness))


def render_phantom(spec):
    pts = identity_map(spec.grid.dims)
    out = np.full(spec.grid.dims, float(spec.background))
    for e in spec.ellipsoids:
        out += e.intensity * ellipsoid_indicator(pts, e)
    return np.clip(out, 0.0, 1.0)


def random_phantom_spec(grid, seed, n_inner=6, softness=0.7):
    """Head-like phantom: bright outer shell, darker interior, random inner blobs."""
    rng = make_rng(seed)
    dims = np.asarray(grid.dims, dtype=np.float64)
    c = (dims - 1) / 2.0
    outer = dims * rng.uniform(0.36, 0.41, size=3)
    ells = [
        Ellipsoid(tuple(c), tuple(outer), (rng.uniform(-0.3, 0.3), 0.0, 0.0), 0.85, softness),
        Ellipsoid(tuple(c), tuple(outer * 0.85), (rng.uniform(-0.3, 0.3), 0.0, 0.0), -0.45, softness),
    ]
    for _ in range(n_inner):
        semi = outer * rng.uniform(0.12, 0.35, size=3)
        off = rng.uniform(-0.45, 0.45, size=3) * outer
        ells.append(Ellipsoid(
            tuple(c + off), tuple(semi), tuple(rng.uniform(-math.pi, math.pi, size=3)),
            float(rng.uniform(-0.3, 0.45)), softness,
        ))
    return PhantomSpec(grid, ells, 0.0)


def perturb_phantom_spec(spec, seed, shift=1.0, scale=0.06, intensity=0.05):
    """A near-match of ``spec``: jittered centers, axes and intensities."""
    rng = make_rng(seed)
    ells = []
    for e in spec.ellipsoids:
        ells.append(Ellipsoid(
            tuple(np.asarray(e.center) + rng.uniform(-shift, shift, size=3)),
            tuple(np.asarray(e.semi_axes) * (1.0 + rng.uniform(-scale, scale, size=3))),
            e.angles,
            float(e.intensity + rng.uniform(-intensity, intensity)),
            e.softness,
        ))
    return PhantomSpec(spec.grid, ells, spec.background)


# -- motion ------------------------------------------------------------------

@dataclass
class MotionSpec:
    seed: int = 0
    amplitude: float = 3.0
    smoothness: float = 6.0
    rk_steps: int = 8
    frames: int = 6
    border: float = 12.0


def _window(dims, border):
    w = np.ones(dims)
    for ax, n in enumerate(dims):
        r = np.arange(n, dtype=np.float64)
        d = np.minimum(r, n - 1 - r)
        s = np.clip((d - 1.0) / max(border, 1e-9), 0.0, 1.0)
        line = s * s * (3 - 2 * s)
        shape = [1, 1, 1]
        shape[ax] = n
        w = w * line.reshape(shape)
    return w


def curl(psi):
    """Central-difference curl of a (nx, ny, nz, 3) field."""
    d = [[np.gradient(psi[..., c], axis=ax) for ax in range(3)] for c in range(3)]
    return np.stack([
        d[2][1] - d[1][2],
        d[0][2] - d[2][0],
        d[1][0] - d[0][1],
    ], axis=-1)


def divergence(v):
    return sum(np.gradient(v[..., c], axis=c) for c in range(3))


def divergence_free_velocity(spec, dims):
    """Curl of a smoothed, border-tapered random vector potential, peak speed = amplitude."""
    rng = make_rng(spec.seed)
    noise = rng.standard_normal(tuple(dims) + (3,))
    psi = np.stack([ndimage.gaussian_filter(noise[..., c], spec.smoothness, mode="nearest")
                    for c in range(3)], axis=-1)
    psi *= _window(dims, spec.border)[..., None]
    v = curl(psi)
    peak = np.sqrt(np.sum(v * v, axis=-1)).max()
    if peak == 0 or spec.amplitude == 0:
        return np.zeros_like(v)
    return v * (spec.amplitude / peak)


def integrate_rk4(v, t_end, steps, start=None):
    """Classical RK4 trajectories of dx/ds = v(x) from every voxel (or ``start``)."""
    x = identity_map(v.shape[:3]) if start is None else np.array(start, dtype=np.float64)
    if steps == 0 or t_end == 0:
        return x
    h = t_end / steps
    for _ in range(steps):
        k1 = sample_trilinear(v, x)
        k2 = sample_trilinear(v, x + 0.5 * h * k1)
        k3 = sample_trilinear(v, x + 0.5 * h * k2)
        k4 = sample_trilinear(v, x + h * k3)
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return x


def make_divergence_free_motion(spec, dims):
    """Lagrangian maps phi_t (frame-t coords -> reference coords), t = 1..T.

    Frame t sits at time t/T of a unit-time flow; the pullback map is the flow
    of the negated velocity, which inverts a stationary flow exactly.
    """
    v = divergence_free_velocity(spec, dims)
    maps = []
    x = identity_map(dims)
    dt = 1.0 / spec.frames
    for _ in range(spec.frames):
        # flows of an autonomous field compose, so continue from the last map
        x = integrate_rk4(-v, dt, spec.rk_steps, start=x)
        out = np.maximum(-x, x - (np.asarray(dims) - 1)).max()
        if out > 2.0:
            raise ValueError(f"trajectory leaves the domain by {out:.2f} voxels; reduce the amplitude")
        maps.append(x.copy())
    return maps, v


# -- sequences ---------------------------------------------------------------

BLUR_PRESETS = {
    "iso": ((1.0, 1.0, 1.0), 0.0),
    "thick": ((0.4, 0.4, 4.0), 0.0),
    "aniso": ((0.4, 1.0, 3.0), 0.0),
    "aniso-noise": ((0.4, 1.0, 3.0), 0.01),
}


def default_fading(frames):
    """Stand-in affine fading schedule: beta1 = 1 - 0.1 (t-1), beta2 = 0.05 (t-1)."""
    t = np.arange(frames, dtype=np.float64)
    return np.stack([1.0 - 0.1 * t, 0.05 * t], axis=-1)


@dataclass
class SequenceSpec:
    frames: int = 6
    alpha: tuple = (0.8, 10.2, -1.0, 0.2)
    gamma: tuple = (0.4, 1.0, 3.0)
    noise: float = 0.0
    betas: np.ndarray = None

    def __post_init__(self):
        if self.betas is None:
            self.betas = default_fading(self.frames)
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if len(self.betas) != self.frames:
            raise ValueError("need one fading pair per frame")
        if np.any(np.diff(self.betas[:, 0]) > 0):
            raise ValueError("tag amplitude beta1 must be non-increasing over frames")


@dataclass
class GroundTruth:
    anatomy: np.ndarray
    alpha: np.ndarray
    gamma: np.ndarray
    betas: np.ndarray
    maps: list
    cines: list
    noise_std: float

    def frame_params(self, t):
        return ForwardParams(self.alpha, self.gamma, self.betas[t])


def render_sequence(anatomy, maps, seq, seed=0, slice_axes=None):
    """Measurements ``g[t][o]`` and the matching ground truth bundle."""
    slice_axes = slice_axes or {}
    rng = make_rng(seed)
    clean = []
    for t in range(seq.frames):
        p = ForwardParams(seq.alpha, seq.gamma, seq.betas[t])
        phi = maps[t] if maps is not None else None
        clean.append({o: forward(anatomy, o, p, phi, slice_axes.get(o)) for o in ORIENTATIONS})
    first = np.stack([clean[0][o] for o in ORIENTATIONS])
    std = seq.noise * float(first.max() - first.min())
    meas = []
    for t in range(seq.frames):
        frame = {}
        for o in ORIENTATIONS:
            noise = rng.standard_normal(anatomy.shape) if seq.noise > 0 else 0.0
            frame[o] = clean[t][o] + std * noise
        meas.append(frame)
    maps = maps if maps is not None else [identity_map(anatomy.shape)] * seq.frames
    cines = [pullback(anatomy, m) for m in maps]
    truth = GroundTruth(np.asarray(anatomy, dtype=np.float64), np.asarray(seq.alpha, dtype=np.float64),
                        np.asarray(seq.gamma, dtype=np.float64), seq.betas.copy(), list(maps), cines, std)
    return meas, truth
