"""
Diffeomorphic motion from a coordinate network.

A small tanh MLP maps normalized coordinates to a stationary velocity field.
The deformation is its group exponential, computed by scaling and squaring on
displacements:

    u_0 = v / 2**S,    u_{k+1}(r) = u_k(r) + u_k(r + u_k(r))

and phi = id + u_S maps frame coordinates to reference coordinates.

``motion_loss_grad`` returns the exact reverse-mode gradient of the frame
residual with respect to the network weights (or the grid velocities in the
``grid`` parametrization).
"""

import numpy as np

from .fields import (
    compose_self,
    compose_self_vjp,
    conv_gaussian_separable,
    conv_gaussian_separable_adjoint,
    identity_map,
    sample_trilinear,
    sample_trilinear_grad,
    splat_trilinear,
)
from .forward import ORIENTATIONS, faded_tag, psf_frame


class LossError(FloatingPointError):
    def __init__(self, stage, msg="non-finite value"):
        super().__init__(f"{msg} at stage '{stage}'")
        self.stage = stage


class MotionNet:
    """Fully connected tanh network R^3 -> R^3; last layer starts at zero."""

    def __init__(self, layers, velocity_scale=1.0):
        self.layers = [(np.asarray(W, dtype=np.float64), np.asarray(b, dtype=np.float64)) for W, b in layers]
        self.velocity_scale = float(velocity_scale)

    @classmethod
    def create(cls, hidden=(128, 128, 128), seed=0, velocity_scale=1.0):
        rng = np.random.default_rng(seed)
        sizes = (3,) + tuple(hidden) + (3,)
        layers = []
        for k, (fin, fout) in enumerate(zip(sizes[:-1], sizes[1:])):
            if k == len(sizes) - 2:
                W = np.zeros((fin, fout))
            else:
                lim = np.sqrt(6.0 / (fin + fout))
                W = rng.uniform(-lim, lim, size=(fin, fout))
            layers.append((W, np.zeros(fout)))
        return cls(layers, velocity_scale)

    @property
    def shapes(self):
        return [(W.shape, b.shape) for W, b in self.layers]

    def get_flat(self):
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in self.layers])

    def with_flat(self, theta):
        layers, off = [], 0
        for W, b in self.layers:
            nW, nb = W.size, b.size
            layers.append((theta[off:off + nW].reshape(W.shape), theta[off + nW:off + nW + nb].copy()))
            off += nW + nb
        return MotionNet(layers, self.velocity_scale)

    def forward(self, x):
        acts = [x]
        h = x
        for k, (W, b) in enumerate(self.layers):
            h = h @ W + b
            if k < len(self.layers) - 1:
                h = np.tanh(h)
            acts.append(h)
        return h * self.velocity_scale, acts

    def backward(self, acts, dout):
        """Gradient of <out, dout> with respect to the flat weight vector."""
        g = dout * self.velocity_scale
        grads = []
        for k in range(len(self.layers) - 1, -1, -1):
            W, _ = self.layers[k]
            if k < len(self.layers) - 1:
                g = g * (1.0 - acts[k + 1] ** 2)
            grads.append((acts[k].T @ g, g.sum(axis=0)))
            g = g @ W.T
        grads.reverse()
        return np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in grads])


def normalized_coords(dims):
    """Voxel index i on an axis of n voxels maps to 2 i / (n - 1) - 1."""
    axes = [2.0 * np.arange(n) / (n - 1) - 1.0 for n in dims]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def eval_velocity(net, dims):
    """Network velocity at every voxel center, shape dims + (3,)."""
    x = normalized_coords(dims).reshape(-1, 3)
    out, _ = net.forward(x)
    return out.reshape(tuple(dims) + (3,))


class ControlGrid:
    """A coarser lattice spanning the voxel grid, with trilinear transfer.

    ``stride`` 1 puts a control point on every voxel.  Displacements are kept
    in voxel units of the fine grid; ``scale`` converts them to lattice units.
    """

    def __init__(self, dims, stride=1):
        self.dims = tuple(int(d) for d in dims)
        self.stride = int(stride)
        if self.stride < 1:
            raise ValueError("control stride must be >= 1")
        if self.stride == 1:
            self.cdims = self.dims
            self._pos = None
        else:
            self.cdims = tuple(max(int(np.ceil((n - 1) / self.stride)) + 1, 4) for n in self.dims)
            axes = [np.arange(n) * (m - 1) / (n - 1) for n, m in zip(self.dims, self.cdims)]
            self._pos = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        self.scale = np.array([(m - 1) / (n - 1) for n, m in zip(self.dims, self.cdims)])

    def points(self):
        return normalized_coords(self.cdims)

    def upsample(self, vc):
        if self._pos is None:
            return vc
        return sample_trilinear(vc, self._pos)

    def upsample_adjoint(self, dv):
        if self._pos is None:
            return dv
        return splat_trilinear(self._pos, dv, self.cdims)


class MLPVelocity:
    """Network velocity sampled at the control points of ``grid``."""
    kind = "mlp"

    def __init__(self, net, grid):
        self.net = net
        self.grid = grid
        self._x = grid.points().reshape(-1, 3)

    def init_params(self):
        return self.net.get_flat()

    def velocity(self, theta):
        net = self.net.with_flat(theta)
        out, acts = net.forward(self._x)
        return out.reshape(self.grid.cdims + (3,)), (net, acts)

    def velocity_vjp(self, cache, dv):
        net, acts = cache
        return net.backward(acts, dv.reshape(-1, 3))


class GridVelocity:
    """Velocities optimized directly on the control lattice (no network)."""
    kind = "grid"

    def __init__(self, grid):
        self.grid = grid

    def init_params(self):
        return np.zeros(int(np.prod(self.grid.cdims)) * 3)

    def velocity(self, theta):
        return theta.reshape(self.grid.cdims + (3,)), None

    def velocity_vjp(self, cache, dv):
        return np.asarray(dv).ravel()


def exp_velocity(v, steps=7, return_history=False):
    """Scaling and squaring; returns the absolute map phi (and displacement history)."""
    if steps < 0:
        raise ValueError("number of squaring steps must be >= 0")
    v = np.asarray(v, dtype=np.float64)
    u = v / 2.0 ** steps
    hist = [u]
    for _ in range(steps):
        u = compose_self(u)
        hist.append(u)
    phi = identity_map(v.shape[:3]) + u
    return (phi, hist) if return_history else phi


def exp_velocity_vjp(hist, g_phi, steps):
    """Pull dL/dphi back to dL/dv through the squaring chain."""
    g = g_phi
    for k in range(steps - 1, -1, -1):
        g = compose_self_vjp(hist[k], g)
    return g / 2.0 ** steps


def lattice_deformation(vc, grid, steps=7, return_history=False):
    """Exponential of a control-lattice velocity, upsampled to the voxel grid.

    The squaring runs on the lattice (in lattice units) and the resulting
    displacement is interpolated, which is exact for stride 1 and cheap for
    coarse lattices.
    """
    phi_c, hist = exp_velocity(vc * grid.scale, steps, return_history=True)
    u = grid.upsample((phi_c - identity_map(grid.cdims)) / grid.scale)
    phi = identity_map(grid.dims) + u
    return (phi, hist) if return_history else phi


def lattice_deformation_vjp(hist, g_phi, grid, steps=7):
    g_c = grid.upsample_adjoint(g_phi) / grid.scale
    return exp_velocity_vjp(hist, g_c, steps) * grid.scale


def jacobian_det(phi):
    """Determinant of the finite-difference Jacobian of a map (central inside, one-sided at edges)."""
    phi = np.asarray(phi, dtype=np.float64)
    J = np.empty(phi.shape[:3] + (3, 3))
    for c in range(3):
        for d, gd in enumerate(np.gradient(phi[..., c], axis=(0, 1, 2))):
            J[..., c, d] = gd
    return np.linalg.det(J)


class FrameObjective:
    """Residual of one frame as a function of the motion parameters.

    Everything except motion (anatomy, tag, PSF, fading) is frozen, so the
    pre-warp products ``a * f(q)`` are computed once for all orientations.
    """

    def __init__(self, a, params, measurements, model, steps=7, slice_axes=None):
        a = np.asarray(a, dtype=np.float64)
        slice_axes = slice_axes or {}
        missing = [o for o in ORIENTATIONS if o not in measurements]
        if missing:
            raise ValueError(f"measurements missing orientation(s) {missing}")
        self.dims = a.shape
        self.model = model
        self.steps = int(steps)
        self.gamma = params.gamma
        self.frames = [psf_frame(o, slice_axes.get(o)) for o in ORIENTATIONS]
        self.w = np.stack([a * faded_tag(a.shape, o, params) for o in ORIENTATIONS], axis=-1)
        self.g = np.stack([np.asarray(measurements[o], dtype=np.float64) for o in ORIENTATIONS], axis=-1)

    def deformation(self, theta):
        v, _ = self.model.velocity(theta)
        return lattice_deformation(v, self.model.grid, self.steps)

    def loss(self, theta):
        phi = self.deformation(theta)
        warped = sample_trilinear(self.w, phi)
        total = 0.0
        for c, fr in enumerate(self.frames):
            r = conv_gaussian_separable(warped[..., c], self.gamma, fr) - self.g[..., c]
            total += float(np.sum(r * r))
        return total

    def loss_grad(self, theta):
        v, cache = self.model.velocity(theta)
        if not np.isfinite(v).all():
            raise LossError("velocity")
        phi, hist = lattice_deformation(v, self.model.grid, self.steps, return_history=True)
        if not np.isfinite(phi).all():
            raise LossError("exponential")
        warped, dw = sample_trilinear_grad(self.w, phi)
        total = 0.0
        g_phi = np.zeros_like(phi)
        for c, fr in enumerate(self.frames):
            r = conv_gaussian_separable(warped[..., c], self.gamma, fr) - self.g[..., c]
            total += float(np.sum(r * r))
            gs = conv_gaussian_separable_adjoint(2.0 * r, self.gamma, fr)
            g_phi += gs[..., None] * dw[..., c, :]
        if not np.isfinite(total):
            raise LossError("residual")
        g_v = lattice_deformation_vjp(hist, g_phi, self.model.grid, self.steps)
        grad = self.model.velocity_vjp(cache, g_v)
        if not np.isfinite(grad).all():
            raise LossError("backprop")
        return total, grad


def motion_loss_grad(model, theta, a, params, measurements, steps=7, slice_axes=None):
    return FrameObjective(a, params, measurements, model, steps, slice_axes).loss_grad(theta)
