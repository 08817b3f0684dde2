"""
Diffusion posterior sampling of the reference anatomy.

Each reverse step forms the Tweedie estimate of the clean image, takes a
deterministic (or ancestral) DDIM step under the prior score, then subtracts
the gradient of the data residual evaluated at the Tweedie estimate,
backpropagated through the denoiser.
"""

from dataclasses import dataclass
import logging

import numpy as np

from .forward import ORIENTATIONS, faded_tag, forward, forward_adjoint
from .prior import NoiseSchedule

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


class SamplingError(FloatingPointError):
    def __init__(self, stage):
        super().__init__(f"non-finite value at stage '{stage}'")
        self.stage = stage


@dataclass
class SamplerConfig:
    steps: int = 64
    rho_star: float = 100.0
    ddim_eta: float = 0.0
    jvp_mode: str = "exact"
    loss_floor: float = 1e-8
    # "plain": subtract rho * grad each step; "sde": also weight by the
    # step's noise rate, as in the continuous reverse SDE
    guidance: str = "plain"
    # rho is capped at step_cap * kbar / lambda_max(A^T A) so the explicit
    # guidance step cannot overshoot; 0 disables the cap
    step_cap: float = 0.5
    # anatomy intensities are magnitudes, so the final sample is projected
    # onto a >= 0
    nonneg: bool = True

    def __post_init__(self):
        if self.steps < 2:
            raise ValueError("sampler needs at least 2 steps")
        if self.rho_star < 0:
            raise ValueError("rho_star must be >= 0")
        if self.jvp_mode not in ("exact", "identity"):
            raise ValueError(f"unknown jvp_mode {self.jvp_mode!r}")
        if self.guidance not in ("sde", "plain"):
            raise ValueError(f"unknown guidance mode {self.guidance!r}")
        if self.step_cap < 0:
            raise ValueError("step_cap must be >= 0")

    @property
    def schedule(self):
        return NoiseSchedule(self.steps)


class FrameLikelihood:
    """Squared residual of one frame, with all forward parameters frozen."""

    def __init__(self, measurements, params, phi=None, slice_axes=None):
        missing = [o for o in ORIENTATIONS if o not in measurements]
        if missing:
            raise ValueError(f"measurements missing orientation(s) {missing}")
        self.g = {o: np.asarray(measurements[o], dtype=np.float64) for o in ORIENTATIONS}
        self.params = params
        self.phi = phi
        self.slice_axes = slice_axes or {}
        dims = self.g["x"].shape
        self.tags = {o: faded_tag(dims, o, params) for o in ORIENTATIONS}
        self._lmax = None

    def apply(self, x):
        return {o: forward(x, o, self.params, self.phi, self.slice_axes.get(o)) for o in ORIENTATIONS}

    def adjoint(self, r):
        return sum(
            forward_adjoint(r[o], o, self.params, self.phi, self.slice_axes.get(o), tag=self.tags[o])
            for o in ORIENTATIONS
        )

    def normal_op(self, x):
        return self.adjoint(self.apply(x))

    def lipschitz(self, iters=20):
        """Largest eigenvalue of A^T A by power iteration from a fixed start."""
        if self._lmax is None:
            x = np.random.default_rng(12345).standard_normal(self.g["x"].shape)
            lam = 0.0
            for _ in range(iters):
                x = x / np.sqrt(np.sum(x * x))
                y = self.normal_op(x)
                lam = float(np.sum(x * y))
                x = y
            self._lmax = max(lam, 1e-12)
        return self._lmax

    def loss(self, x):
        model = self.apply(x)
        return float(sum(np.sum((model[o] - self.g[o]) ** 2) for o in ORIENTATIONS))

    def loss_grad(self, x):
        model = self.apply(x)
        res = {o: model[o] - self.g[o] for o in ORIENTATIONS}
        L = float(sum(np.sum(r * r) for r in res.values()))
        G = self.adjoint({o: 2.0 * r for o, r in res.items()})
        return L, G


def tweedie_denoise(a, kbar, prior):
    if kbar <= 0:
        raise ValueError(f"kbar must be positive, got {kbar}")
    if kbar == 1.0:
        return np.asarray(a, dtype=np.float64).copy()
    return (a + (1.0 - kbar) * prior.score(a, kbar)) / np.sqrt(kbar)


def likelihood_grad(a, kbar, lik, prior, jvp_mode="exact", score=None):
    """Gradient of ``x -> L(tweedie(x))`` at ``a``; returns (grad, L, tweedie)."""
    if score is None:
        score = prior.score(a, kbar)
    x0 = (a + (1.0 - kbar) * score) / np.sqrt(kbar)
    if not np.isfinite(x0).all():
        raise SamplingError("tweedie")
    L, G = lik.loss_grad(x0)
    if not np.isfinite(L):
        raise SamplingError("residual")
    if jvp_mode == "exact":
        grad = (G + (1.0 - kbar) * prior.jvp(a, kbar, G)) / np.sqrt(kbar)
    else:
        grad = G / np.sqrt(kbar)
    if not np.isfinite(grad).all():
        raise SamplingError("backprop")
    return grad, L, x0


def noise_to_step(a0, i, schedule, rng):
    kb = schedule.kappa_bar(i)
    return np.sqrt(kb) * a0 + np.sqrt(1.0 - kb) * rng.standard_normal(np.shape(a0))


def dps_sample(prior, cfg, lik=None, init=None, start=None, rng=None, trace=None):
    """Run the reverse sweep from step ``start`` (default: pure noise at step N).

    ``init`` is the state at step ``start``; if omitted it is drawn as standard
    normal noise, which requires a ``shape`` hint via ``lik`` or the prior.
    Appends (step, L_rec, guidance norm) rows to ``trace`` if given.
    """
    sched = cfg.schedule
    rng = np.random.default_rng(0) if rng is None else rng
    start = sched.steps if start is None else int(start)
    if init is None:
        shape = lik.g["x"].shape if lik is not None else prior_shape(prior)
        a = rng.standard_normal(shape)
    else:
        a = np.array(init, dtype=np.float64)
    guided = lik is not None and cfg.rho_star > 0
    losses = []
    for i in range(start, 0, -1):
        kb, kb_prev = sched.kappa_bar(i), sched.kappa_bar(i - 1)
        s = prior.score(a, kb)
        if guided:
            grad, L, x0 = likelihood_grad(a, kb, lik, prior, cfg.jvp_mode, score=s)
        else:
            x0 = (a + (1.0 - kb) * s) / np.sqrt(kb)
            L = float("nan")
        eps = -np.sqrt(1.0 - kb) * s
        if cfg.ddim_eta > 0:
            sig = cfg.ddim_eta * np.sqrt((1.0 - kb_prev) / (1.0 - kb) * (1.0 - kb / kb_prev))
            a_next = (np.sqrt(kb_prev) * x0 + np.sqrt(max(1.0 - kb_prev - sig ** 2, 0.0)) * eps
                      + sig * rng.standard_normal(a.shape))
        else:
            a_next = np.sqrt(kb_prev) * x0 + np.sqrt(1.0 - kb_prev) * eps
        gnorm = 0.0
        if guided:
            rho = cfg.rho_star / max(L, cfg.loss_floor)
            if cfg.guidance == "sde":
                rho *= sched.eta(i)
            if cfg.step_cap > 0 and hasattr(lik, "lipschitz"):
                rho = min(rho, cfg.step_cap * kb / lik.lipschitz())
            step = rho * grad
            gnorm = float(np.sqrt(np.sum(step * step)))
            a_next = a_next - step
            losses.append(L)
            _check_divergence(losses, trace)
        if trace is not None:
            trace.append((i, L, gnorm))
        a = a_next
    if cfg.nonneg:
        a = np.maximum(a, 0.0)
    return a


def prior_shape(prior):
    if hasattr(prior, "templates"):
        return prior.templates.shape[1:]
    return prior.mean.shape


def _check_divergence(losses, trace, window=10, factor=10.0):
    if len(losses) <= window:
        return
    tail = losses[-window - 1:]
    rising = all(b > a for a, b in zip(tail[:-1], tail[1:]))
    if rising and tail[-1] > factor * tail[0]:
        raise DivergenceError(
            f"residual grew {tail[-1] / tail[0]:.1f}x over {window} consecutive steps",
            list(trace) if trace is not None else list(losses),
        )
