"""
Analytic score priors for the anatomy.

Both priors have closed-form noised marginals under the variance-preserving
forward process  a_i = sqrt(kbar_i) a_0 + sqrt(1 - kbar_i) eps,  so their scores
and score Jacobians are exact.  They stand in for a learned denoiser behind the
same ``score`` / ``jvp`` interface.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .fields import fft_frequencies


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule over ``train_steps``, visited at ``steps`` evenly spaced points.

    Index i = 0 is the clean signal (kbar = 1); i = steps is the noisiest level.
    """
    steps: int = 64
    train_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    spacing: str = "quadratic"

    def __post_init__(self):
        if self.steps < 2 or self.steps > self.train_steps:
            raise ValueError(f"steps must lie in [2, {self.train_steps}], got {self.steps}")
        betas = np.linspace(self.beta_start, self.beta_end, self.train_steps)
        kbar_train = np.cumprod(1.0 - betas)
        if self.spacing == "uniform":
            idx = np.round(np.linspace(1, self.train_steps, self.steps)).astype(int)
        elif self.spacing == "quadratic":
            idx = np.round(1 + (self.train_steps - 1) * np.linspace(0, 1, self.steps) ** 2).astype(int)
        else:
            raise ValueError(f"unknown timestep spacing {self.spacing!r}")
        for k in range(1, idx.size):
            idx[k] = max(idx[k], idx[k - 1] + 1)
        if idx[-1] > self.train_steps:
            raise ValueError("timestep spacing overflows the training schedule")
        object.__setattr__(self, "timesteps", idx)
        object.__setattr__(self, "kbar", np.concatenate([[1.0], kbar_train[idx - 1]]))

    def kappa_bar(self, i):
        return float(self.kbar[i])

    def eta(self, i):
        """Effective noise rate of the jump i -> i-1: 1 - kbar_i / kbar_{i-1}."""
        return 1.0 - self.kbar[i] / self.kbar[i - 1]


class ScoreModel:
    """Interface: ``score(a, kbar)`` and ``jvp(a, kbar, w)`` at a noise level."""

    def score(self, a, kbar):
        raise NotImplementedError

    def jvp(self, a, kbar, w):
        raise NotImplementedError

    def log_density(self, a, kbar):
        raise NotImplementedError


class TemplateBankPrior(ScoreModel):
    """Isotropic Gaussian mixture centred on template volumes."""

    def __init__(self, templates, sigma=0.05, weights=None):
        self.templates = np.asarray(templates, dtype=np.float64)
        if self.templates.ndim == 3:
            self.templates = self.templates[None]
        k = len(self.templates)
        w = np.full(k, 1.0 / k) if weights is None else np.asarray(weights, dtype=np.float64)
        if not np.isclose(w.sum(), 1.0):
            raise ValueError("mixture weights must sum to 1")
        self.log_w = np.log(w)
        self.sigma = float(sigma)
        self._flat = self.templates.reshape(k, -1)

    @classmethod
    def from_stack(cls, stack, sigma=0.05):
        """Build from a (nx, ny, nz, K) array as stored in IVT files."""
        return cls(np.moveaxis(np.asarray(stack, dtype=np.float64), -1, 0), sigma)

    def to_stack(self):
        return np.moveaxis(self.templates, 0, -1)

    def _var(self, kbar):
        return kbar * self.sigma ** 2 + 1.0 - kbar

    def responsibilities(self, a, kbar):
        v = self._var(kbar)
        d = np.asarray(a, dtype=np.float64).ravel()[None, :] - np.sqrt(kbar) * self._flat
        logits = self.log_w - 0.5 * np.einsum("kn,kn->k", d, d) / v
        return np.exp(logits - logsumexp(logits))

    def log_density(self, a, kbar):
        v = self._var(kbar)
        x = np.asarray(a, dtype=np.float64).ravel()
        d = x[None, :] - np.sqrt(kbar) * self._flat
        n = x.size
        logits = self.log_w - 0.5 * np.einsum("kn,kn->k", d, d) / v - 0.5 * n * np.log(2 * np.pi * v)
        return float(logsumexp(logits))

    def score(self, a, kbar):
        a = np.asarray(a, dtype=np.float64)
        r = self.responsibilities(a, kbar)
        mean = np.sqrt(kbar) * np.tensordot(r, self._flat, axes=1).reshape(a.shape)
        return (mean - a) / self._var(kbar)

    def jvp(self, a, kbar, w):
        a = np.asarray(a, dtype=np.float64)
        w = np.asarray(w, dtype=np.float64)
        v = self._var(kbar)
        r = self.responsibilities(a, kbar)
        m = np.sqrt(kbar) * self._flat
        c = -(a.ravel()[None, :] - m) @ w.ravel() / v
        dr = r * (c - r @ c)
        return (np.tensordot(dr, m, axes=1).reshape(a.shape) / v) - w / v


class StationaryGPPrior(ScoreModel):
    """Gaussian prior with a stationary covariance diagonal in the DFT basis.

    Spectral density per bin is (1 + lam |f|^2)^-p with f in cycles/voxel.
    """

    def __init__(self, mean, lam=4.0, p=2.0, spectrum=None):
        self.mean = np.asarray(mean, dtype=np.float64)
        if spectrum is None:
            f = fft_frequencies(self.mean.shape)
            spectrum = (1.0 + lam * np.sum(f ** 2, axis=-1)) ** (-p)
        self.spectrum = np.broadcast_to(np.asarray(spectrum, dtype=np.float64), self.mean.shape)
        if not (self.spectrum > 0).all():
            raise ValueError("spectral density must be positive")
        self._mean_hat = np.fft.fftn(self.mean)

    def _filter(self, x_hat, kbar):
        out = np.fft.ifftn(-x_hat / (kbar * self.spectrum + 1.0 - kbar))
        return out.real

    def score(self, a, kbar):
        d_hat = np.fft.fftn(a) - np.sqrt(kbar) * self._mean_hat
        return self._filter(d_hat, kbar)

    def jvp(self, a, kbar, w):
        return self._filter(np.fft.fftn(w), kbar)

    def log_density(self, a, kbar):
        """Log marginal density up to its normalizing constant."""
        d_hat = np.fft.fftn(a) - np.sqrt(kbar) * self._mean_hat
        var = kbar * self.spectrum + 1.0 - kbar
        return float(-0.5 * np.sum(np.abs(d_hat) ** 2 / var) / d_hat.size)

    def sample(self, rng, n=1):
        """Draws from the clean prior N(mean, C)."""
        z = rng.standard_normal((n,) + self.mean.shape)
        z_hat = np.fft.fftn(z, axes=(1, 2, 3)) * np.sqrt(self.spectrum)
        return self.mean + np.fft.ifftn(z_hat, axes=(1, 2, 3)).real
