"""Bounded differential evolution (best/1/bin) and Adam."""

from dataclasses import dataclass, field
import logging

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class DEConfig:
    population: int = 30
    mutation: float = 0.5
    crossover: float = 0.7
    rel_tol: float = 1e-2
    abs_tol: float = 0.0
    max_iters: int = 200
    seed: int = 0
    # "dispersion": std(E) <= abs_tol + rel_tol |mean(E)|
    # "change": relative change of the best objective over one generation
    convergence: str = "dispersion"

    def __post_init__(self):
        if self.population < 5:
            raise ValueError("DE population must be >= 5")
        if self.convergence not in ("dispersion", "change"):
            raise ValueError(f"unknown convergence test {self.convergence!r}")


@dataclass
class DEResult:
    x: np.ndarray
    fun: float
    evals: int
    iters: int
    converged: bool
    history: list = field(default_factory=list)


def _safe_eval(f, x):
    try:
        v = float(f(x))
    except (ArithmeticError, ValueError, np.linalg.LinAlgError):
        return np.inf
    return v if np.isfinite(v) else np.inf


def de_minimize(f, bounds, cfg=None, x0=None):
    """Minimize ``f`` over the box ``bounds`` (sequence of (lo, hi)).

    ``x0`` (the incumbent) is inserted into the initial population, so the
    result is never worse than ``f(x0)``.  Generations are synchronous: all
    trial vectors are built from the previous generation before selection.
    """
    cfg = cfg or DEConfig()
    b = np.asarray(bounds, dtype=np.float64)
    lo, hi = b[:, 0], b[:, 1]
    if b.ndim != 2 or b.shape[1] != 2 or not np.all(np.isfinite(b)) or np.any(lo >= hi):
        raise ValueError(f"invalid bounds {bounds}")
    d = len(lo)
    n = cfg.population
    rng = np.random.default_rng(cfg.seed)

    # Latin hypercube start in the unit cube
    pop = (rng.permuted(np.tile(np.arange(n), (d, 1)), axis=1).T + rng.random((n, d))) / n
    pop = lo + pop * (hi - lo)
    if x0 is not None:
        pop[0] = np.clip(np.asarray(x0, dtype=np.float64), lo, hi)
    energy = np.array([_safe_eval(f, x) for x in pop])
    evals = n
    history = [float(energy.min())]
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        best = pop[np.argmin(energy)]
        trials = np.empty_like(pop)
        for k in range(n):
            r1, r2 = rng.choice(np.delete(np.arange(n), k), size=2, replace=False)
            mutant = best + cfg.mutation * (pop[r1] - pop[r2])
            cross = rng.random(d) < cfg.crossover
            cross[rng.integers(d)] = True
            trials[k] = np.clip(np.where(cross, mutant, pop[k]), lo, hi)
        t_energy = np.array([_safe_eval(f, x) for x in trials])
        evals += n
        better = t_energy <= energy
        pop[better] = trials[better]
        energy[better] = t_energy[better]
        prev_best = history[-1]
        history.append(float(energy.min()))
        if _converged(cfg, energy, prev_best, history[-1]):
            converged = True
            break
    k = int(np.argmin(energy))
    return DEResult(pop[k].copy(), float(energy[k]), evals, it, converged, history)


def _converged(cfg, energy, prev_best, best):
    if not np.all(np.isfinite(energy)):
        return False
    if cfg.convergence == "dispersion":
        return np.std(energy) <= cfg.abs_tol + cfg.rel_tol * abs(np.mean(energy))
    return abs(prev_best - best) <= cfg.abs_tol + cfg.rel_tol * abs(prev_best)


@dataclass
class AdamConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 2000

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("Adam learning rate must be positive")


class OptimizationError(FloatingPointError):
    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


def adam_minimize(loss_grad, theta0, cfg=None, callback=None):
    """Fixed-step Adam with bias correction.

    ``loss_grad(theta) -> (loss, grad)``.  Returns (best theta, best loss,
    loss trace); the best iterate by loss is returned, the starting point
    included, so a run never ends worse than it began.
    """
    cfg = cfg or AdamConfig()
    theta = np.array(theta0, dtype=np.float64)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    trace = []
    best_theta, best_loss = theta.copy(), np.inf
    for t in range(1, cfg.steps + 1):
        loss, g = loss_grad(theta)
        if not (np.isfinite(loss) and np.all(np.isfinite(g))):
            raise OptimizationError(f"non-finite loss or gradient at Adam step {t}", trace)
        trace.append(float(loss))
        if loss < best_loss:
            best_theta, best_loss = theta.copy(), float(loss)
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        mhat = m / (1.0 - cfg.beta1 ** t)
        vhat = v / (1.0 - cfg.beta2 ** t)
        theta = theta - cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)
        if callback is not None:
            callback(t, loss)
    loss, _ = loss_grad(theta)
    if np.isfinite(loss):
        trace.append(float(loss))
        if loss < best_loss:
            best_theta, best_loss = theta.copy(), float(loss)
    return best_theta, best_loss, trace
