"""
Single-objective gradient descent over every unknown of one frame.

Used only by the ``no-cddp`` ablation: anatomy, tag, PSF, fading and motion
weights are packed into one vector and optimized together with Adam instead
of the alternating scheme.  Gradients are exact, including the PSF widths
(through the derivative of the truncated, renormalized kernel).
"""

import numpy as np

from .fields import (
    conv_gaussian_separable,
    conv_gaussian_separable_adjoint,
    conv_gaussian_separable_dsigma,
    sample_trilinear_grad,
    splat_trilinear,
)
from .forward import ORIENTATIONS, ForwardParams, orientation_axis, psf_frame
from .motion import LossError, lattice_deformation, lattice_deformation_vjp

GROUPS = ("a", "alpha", "gamma", "beta", "theta")


class JointObjective:
    """L_rec of one frame as a function of a packed vector of the ``free`` groups.

    Fixed groups are taken from ``params`` / ``a`` / ``theta``.  Low-dimensional
    parameters are clipped into ``bounds`` before evaluation.
    """

    def __init__(self, measurements, model, a, params, theta, free, bounds, steps=7, slice_axes=None):
        slice_axes = slice_axes or {}
        missing = [o for o in ORIENTATIONS if o not in measurements]
        if missing:
            raise ValueError(f"measurements missing orientation(s) {missing}")
        unknown = set(free) - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown variable group(s) {sorted(unknown)}")
        self.g = np.stack([np.asarray(measurements[o], dtype=np.float64) for o in ORIENTATIONS], axis=-1)
        self.dims = self.g.shape[:3]
        self.model = model
        self.steps = int(steps)
        self.frames = [psf_frame(o, slice_axes.get(o)) for o in ORIENTATIONS]
        self.free = tuple(k for k in GROUPS if k in free)
        self.bounds = {k: np.asarray(v, dtype=np.float64) for k, v in bounds.items()}
        self.fixed = {
            "a": np.asarray(a, dtype=np.float64),
            "alpha": np.asarray(params.alpha, dtype=np.float64),
            "gamma": np.asarray(params.gamma, dtype=np.float64),
            "beta": np.asarray(params.beta, dtype=np.float64),
            "theta": np.asarray(theta, dtype=np.float64),
        }
        self.sizes = {k: self.fixed[k].size for k in GROUPS}

    def pack(self, values=None):
        values = values or {}
        return np.concatenate([np.ravel(values.get(k, self.fixed[k])) for k in self.free])

    def unpack(self, x):
        out, off = dict(self.fixed), 0
        for k in self.free:
            n = self.sizes[k]
            out[k] = np.asarray(x[off:off + n]).reshape(self.fixed[k].shape)
            off += n
        for k, b in self.bounds.items():
            out[k] = np.clip(out[k], b[:, 0], b[:, 1])
        return out

    def params(self, x):
        v = self.unpack(x)
        return ForwardParams(v["alpha"], v["gamma"], v["beta"])

    def loss_grad(self, x):
        v = self.unpack(x)
        a, (a1, a2, a3, a4), gamma, (b1, b2) = v["a"], v["alpha"], v["gamma"], v["beta"]
        vel, cache = self.model.velocity(v["theta"])
        phi, hist = lattice_deformation(vel, self.model.grid, self.steps, return_history=True)
        if not np.isfinite(phi).all():
            raise LossError("exponential")

        tags, dtags, zs = [], [], []
        for o in ORIENTATIONS:
            ax = orientation_axis(o)
            r = np.arange(self.dims[ax], dtype=np.float64)
            ph = 2.0 * np.pi * r / a2 + a3
            shape = [1, 1, 1]
            shape[ax] = -1
            c, s = np.cos(ph).reshape(shape), np.sin(ph).reshape(shape)
            q = a1 * c + a4
            tags.append(q)
            # dq / d(alpha1, alpha2, alpha3, alpha4)
            dtags.append((c, a1 * s * (2.0 * np.pi * r / a2 ** 2).reshape(shape), -a1 * s, 1.0))
            zs.append(np.broadcast_to(b1 * q + b2, self.dims))
        w = np.stack([a * np.abs(z) for z in zs], axis=-1)
        warped, dw = sample_trilinear_grad(w, phi)

        total = 0.0
        g_phi = np.zeros_like(phi)
        grads = {k: np.zeros_like(self.fixed[k]) for k in GROUPS}
        for c, fr in enumerate(self.frames):
            res = conv_gaussian_separable(warped[..., c], gamma, fr) - self.g[..., c]
            total += float(np.sum(res * res))
            e = conv_gaussian_separable_adjoint(2.0 * res, gamma, fr)
            g_phi += e[..., None] * dw[..., c, :]
            if "gamma" in self.free:
                for k in range(3):
                    grads["gamma"][k] += float(np.sum(
                        2.0 * res * conv_gaussian_separable_dsigma(warped[..., c], gamma, k, fr)))
            p = splat_trilinear(phi, e, self.dims)
            z = zs[c]
            grads["a"] += p * np.abs(z)
            dz = p * a * np.sign(z)
            grads["beta"] += (float(np.sum(dz * tags[c])), float(np.sum(dz)))
            for k, dq in enumerate(dtags[c]):
                grads["alpha"][k] += b1 * float(np.sum(dz * dq))
        if not np.isfinite(total):
            raise LossError("residual")
        if "theta" in self.free:
            g_v = lattice_deformation_vjp(hist, g_phi, self.model.grid, self.steps)
            grads["theta"] = self.model.velocity_vjp(cache, g_v)
        for k, b in self.bounds.items():
            raw = self._raw(x, k)
            if raw is not None:
                inside = (raw >= b[:, 0]) & (raw <= b[:, 1])
                grads[k] = np.where(inside, grads[k], 0.0)
        grad = np.concatenate([np.ravel(grads[k]) for k in self.free])
        if not np.isfinite(grad).all():
            raise LossError("backprop")
        return total, grad

    def loss(self, x):
        return self.loss_grad(x)[0]

    def _raw(self, x, key):
        if key not in self.free:
            return None
        off = 0
        for k in self.free:
            if k == key:
                return np.asarray(x[off:off + self.sizes[k]])
            off += self.sizes[k]
        return None
