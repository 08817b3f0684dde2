"""
Coordinate descent between posterior sampling of the anatomy and
maximum-likelihood updates of the nuisance parameters.

Frame 1 alternates PSF, tag, anatomy and motion updates for ``loops`` rounds
and then freezes anatomy, tag and PSF.  Every later frame starts its motion
from the previous frame and alternates fading and motion updates.
"""

from dataclasses import asdict, dataclass, field
import logging

import numpy as np
from scipy.optimize import minimize_scalar

from .dps import DivergenceError, FrameLikelihood, SamplerConfig, SamplingError, dps_sample, noise_to_step
from .fields import conv_gaussian_separable, sample_trilinear
from .forward import ORIENTATIONS, ForwardParams, faded_tag, psf_frame, pullback
from .joint import JointObjective
from .motion import (
    ControlGrid,
    FrameObjective,
    GridVelocity,
    LossError,
    MLPVelocity,
    MotionNet,
    lattice_deformation,
)
from .optim import AdamConfig, DEConfig, OptimizationError, adam_minimize, de_minimize

log = logging.getLogger(__name__)

ABLATIONS = ("no-psf", "no-fading", "no-cddp")
GAMMA_BOUNDS = ((0.0, 4.0),) * 3
BETA_BOUNDS = ((0.0, 1.0),) * 2
TRACE_FIELDS = ("frame", "loop", "block", "loss_before", "loss_after", "evals", "status")


def alpha_bounds(spacing):
    return ((0.5, 1.0), (0.9 * spacing, 1.1 * spacing), (-np.pi, np.pi), (0.0, 0.5))


@dataclass
class SolverConfig:
    loops: int = 4
    loops_later: int = None
    squaring_steps: int = 7
    tag_spacing: float = 10.0
    # low-pass width of the initial anatomy, in units of spacing / (2 pi)
    lowpass_factor: float = 2.2
    warm_fraction: float = 0.4
    full_chain: bool = False
    ablation: str = None
    motion_model: str = "mlp"
    control_stride: int = 4
    velocity_scale: float = 1.0
    hidden: tuple = (128, 128, 128)
    joint_lr: float = 1e-2
    joint_gamma0: float = 1.0
    abort_on_divergence: bool = True
    # resolve the anatomy/tag amplitude ambiguity by the prior after each tag update
    scale_gauge: bool = True
    # later frames start their motion from the previous frame (False: from zero)
    warm_start: bool = True

    def __post_init__(self):
        if self.loops < 1:
            raise ValueError("loops must be >= 1")
        if self.loops_later is None:
            self.loops_later = self.loops
        if self.loops_later < 1:
            raise ValueError("loops_later must be >= 1")
        if self.ablation not in (None,) + ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; expected one of {ABLATIONS}")
        if self.motion_model not in ("mlp", "grid"):
            raise ValueError(f"unknown motion model {self.motion_model!r}")
        if not 0.0 < self.warm_fraction <= 1.0:
            raise ValueError("warm_fraction must lie in (0, 1]")
        if not self.tag_spacing > 0:
            raise ValueError("tag_spacing must be positive")
        self.hidden = tuple(int(h) for h in self.hidden)

    @property
    def sigma_init(self):
        return self.lowpass_factor * self.tag_spacing / (2.0 * np.pi)


class FrozenError(RuntimeError):
    """Attempt to change an estimate that the algorithm has already fixed."""


class SolverAbort(RuntimeError):
    def __init__(self, msg, state, trace=None):
        super().__init__(msg)
        self.state = state
        self.trace = trace


class SolverState:
    """Current estimates of one run.

    Anatomy, tag and PSF parameters become read-only when frame 1 completes;
    the fading and motion of a frame become read-only when that frame does.
    """

    _REFERENCE = ("a", "alpha", "gamma")

    def __init__(self, a, alpha, gamma, frames, seed=0):
        object.__setattr__(self, "reference_frozen", False)
        self.a = np.array(a, dtype=np.float64)
        self.alpha = np.array(alpha, dtype=np.float64)
        self.gamma = np.array(gamma, dtype=np.float64)
        self.betas = [None] * int(frames)
        self.thetas = [None] * int(frames)
        self.completed = 0
        self.stage = "init"
        self.trace = []
        self.flags = []
        self.seed = int(seed)

    @property
    def frames(self):
        return len(self.betas)

    def __setattr__(self, key, value):
        if key in self._REFERENCE and self.reference_frozen:
            raise FrozenError(f"'{key}' is frozen after the first frame")
        object.__setattr__(self, key, value)

    def freeze_reference(self):
        for k in self._REFERENCE:
            getattr(self, k).setflags(write=False)
        object.__setattr__(self, "reference_frozen", True)

    def set_frame(self, t, beta=None, theta=None):
        if t < self.completed:
            raise FrozenError(f"frame {t + 1} is already complete")
        if beta is not None:
            self.betas[t] = np.array(beta, dtype=np.float64)
        if theta is not None:
            self.thetas[t] = np.array(theta, dtype=np.float64)

    def complete_frame(self, t):
        if t != self.completed:
            raise RuntimeError(f"frames complete in order; expected {self.completed + 1}, got {t + 1}")
        self.betas[t].setflags(write=False)
        self.thetas[t].setflags(write=False)
        self.completed = t + 1
        if t == 0 and not self.reference_frozen:
            self.freeze_reference()
        self.stage = "done" if self.completed == self.frames else f"frame{t + 1}:done"

    def params(self, t):
        return ForwardParams(self.alpha, self.gamma, self.betas[t])

    def record(self, **row):
        self.trace.append({k: row.get(k, "") for k in TRACE_FIELDS})


def derive_seed(*keys):
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def derive_rng(*keys):
    return np.random.Generator(np.random.Philox(derive_seed(*keys)))


_BLOCK_IDS = {"gamma": 1, "alpha": 2, "anatomy": 3, "motion": 4, "beta": 5, "joint": 6}


class CDDPSolver:
    """Runs the alternating scheme on a list of per-frame measurement dicts."""

    def __init__(self, measurements, prior, solver=None, sampler=None, de=None, adam=None,
                 seed=0, slice_axes=None, dps_trace=None):
        if len(measurements) < 1:
            raise ValueError("need at least one frame")
        for t, frame in enumerate(measurements):
            missing = [o for o in ORIENTATIONS if o not in frame]
            if missing:
                raise ValueError(f"frame {t + 1} is missing orientation(s) {missing}")
        self.g = [{o: np.asarray(f[o], dtype=np.float64) for o in ORIENTATIONS} for f in measurements]
        self.dims = self.g[0]["x"].shape
        self.prior = prior
        self.cfg = solver or SolverConfig()
        self.sampler = sampler or SamplerConfig()
        self.de = de or DEConfig()
        self.adam = adam or AdamConfig()
        self.seed = int(seed)
        self.slice_axes = slice_axes or {}
        self.frames_psf = [psf_frame(o, self.slice_axes.get(o)) for o in ORIENTATIONS]
        self.dps_trace = dps_trace
        grid = ControlGrid(self.dims, self.cfg.control_stride)
        if self.cfg.motion_model == "mlp":
            net = MotionNet.create(self.cfg.hidden, derive_seed(self.seed, 0, 0, 0), self.cfg.velocity_scale)
            self.model = MLPVelocity(net, grid)
        else:
            self.model = GridVelocity(grid)

    # -- helpers ---------------------------------------------------------

    def deformation(self, theta):
        v, _ = self.model.velocity(theta)
        if not np.any(v):
            return None
        return lattice_deformation(v, self.model.grid, self.cfg.squaring_steps)

    def model_images(self, a, params, phi):
        w = np.stack([a * faded_tag(self.dims, o, params) for o in ORIENTATIONS], axis=-1)
        if phi is not None:
            w = sample_trilinear(w, phi)
        return [conv_gaussian_separable(w[..., c], params.gamma, fr) for c, fr in enumerate(self.frames_psf)]

    def frame_loss(self, t, a, params, phi):
        model = self.model_images(a, params, phi)
        return float(sum(np.sum((m - self.g[t][o]) ** 2) for m, o in zip(model, ORIENTATIONS)))

    def _de(self, f, bounds, x0, *keys):
        cfg = DEConfig(**{**asdict(self.de), "seed": derive_seed(self.seed, *keys)})
        return de_minimize(f, bounds, cfg, x0=x0)

    # -- algorithm -------------------------------------------------------

    def initialize(self):
        g1 = self.g[0]
        avg = sum(g1[o] for o in ORIENTATIONS) / 3.0
        s = self.cfg.sigma_init
        a = conv_gaussian_separable(avg, (s, s, s))
        init = ForwardParams()
        alpha = np.array([0.0, self.cfg.tag_spacing, 0.0, 1.0])
        state = SolverState(a, alpha, init.gamma, len(self.g), self.seed)
        state.betas[0] = init.beta.copy()
        state.thetas[0] = self.model.init_params()
        return state

    def solve_frame1(self, state):
        if self.cfg.ablation == "no-cddp":
            return self._joint_frame1(state)
        t = 0
        g = self.g[t]
        for ell in range(1, self.cfg.loops + 1):
            state.stage = f"frame1:{ell}"
            phi = self.deformation(state.thetas[t])

            if self.cfg.ablation != "no-psf":
                w = np.stack([state.a * faded_tag(self.dims, o, state.params(t)) for o in ORIENTATIONS], axis=-1)
                if phi is not None:
                    w = sample_trilinear(w, phi)

                def f_gamma(gm, w=w):
                    return sum(float(np.sum((conv_gaussian_separable(w[..., c], gm, fr) - g[o]) ** 2))
                               for c, (fr, o) in enumerate(zip(self.frames_psf, ORIENTATIONS)))

                state.gamma = self._de_block(state, t, ell, "gamma", f_gamma, GAMMA_BOUNDS, state.gamma)

            def f_alpha(al, phi=phi):
                return self.frame_loss(t, state.a, ForwardParams(al, state.gamma, state.betas[t]), phi)

            # the constant initial tag lies outside the box; its projection seeds DE
            x0 = np.clip(state.alpha, *np.array(alpha_bounds(self.cfg.tag_spacing)).T)
            state.alpha = self._de_block(state, t, ell, "alpha", f_alpha, alpha_bounds(self.cfg.tag_spacing), x0)
            if self.cfg.scale_gauge:
                self._gauge_block(state, ell, phi)

            state.a = self._anatomy_block(state, ell, phi)
            state.set_frame(t, theta=self._motion_block(state, t, ell))
        state.complete_frame(t)
        return state

    def solve_frame_t(self, state, t):
        if t < 1 or t != state.completed:
            raise RuntimeError(f"cannot solve frame {t + 1} after {state.completed} completed frame(s)")
        theta0 = state.thetas[t - 1] if self.cfg.warm_start else self.model.init_params()
        state.set_frame(t, beta=state.betas[t - 1], theta=theta0)
        if self.cfg.ablation == "no-fading":
            state.set_frame(t, beta=np.array([1.0, 0.0]))
        if self.cfg.ablation == "no-cddp":
            return self._joint_frame_t(state, t)
        for ell in range(1, self.cfg.loops_later + 1):
            state.stage = f"frame{t + 1}:{ell}"
            if self.cfg.ablation != "no-fading":
                phi = self.deformation(state.thetas[t])

                def f_beta(b, phi=phi):
                    return self.frame_loss(t, state.a, ForwardParams(state.alpha, state.gamma, b), phi)

                state.set_frame(t, beta=self._de_block(state, t, ell, "beta", f_beta, BETA_BOUNDS, state.betas[t]))
            state.set_frame(t, theta=self._motion_block(state, t, ell))
        state.complete_frame(t)
        return state

    def run(self, state=None, on_frame=None):
        """Solve every remaining frame; ``on_frame(state)`` runs after each one."""
        if state is None:
            state = self.initialize()
        if state.completed == 0:
            self.solve_frame1(state)
            if on_frame:
                on_frame(state)
        for t in range(state.completed, state.frames):
            self.solve_frame_t(state, t)
            if on_frame:
                on_frame(state)
        return state

    # -- blocks ----------------------------------------------------------

    def _de_block(self, state, t, ell, name, f, bounds, x0):
        before = f(x0)
        res = self._de(f, bounds, x0, t, ell, _BLOCK_IDS[name])
        x, after = res.x, res.fun
        state.record(frame=t + 1, loop=ell, block=name, loss_before=before, loss_after=after,
                     evals=res.evals, status="converged" if res.converged else "max_iters")
        return x

    def _gauge_block(self, state, ell, phi):
        """Rescale (a, alpha_1, alpha_4) -> (a / c, c alpha_1, c alpha_4) to the prior's liking.

        With frame-1 fading beta = (1, 0) the data loss is invariant under this
        rescaling, so only the prior can pick c; the tag box bounds it.
        """
        al = state.alpha
        lo, hi = 0.5 / al[0], 1.0 / al[0]
        if al[3] > 0:
            hi = min(hi, 0.5 / al[3])
        if not hi > lo or np.any(state.betas[0] != (1.0, 0.0)):
            return

        def f(c):
            return -self.prior.log_density(state.a / c, 1.0)

        try:
            f1 = f(1.0)
        except NotImplementedError:
            return
        res = minimize_scalar(f, bounds=(lo, hi), method="bounded", options={"xatol": 1e-4})
        c = float(res.x) if res.fun < f1 else 1.0
        loss = self.frame_loss(0, state.a, state.params(0), phi)
        state.a = state.a / c
        state.alpha = al * np.array([c, 1.0, 1.0, c])
        state.record(frame=1, loop=ell, block="scale", loss_before=loss,
                     loss_after=self.frame_loss(0, state.a, state.params(0), phi),
                     evals=int(getattr(res, "nfev", 0)), status=f"c={c:.4f}")

    def _anatomy_block(self, state, ell, phi):
        t = 0
        lik = FrameLikelihood(self.g[t], state.params(t), phi, self.slice_axes)
        before = lik.loss(state.a)
        rng = derive_rng(self.seed, t, ell, _BLOCK_IDS["anatomy"])
        steps = []
        sched = self.sampler.schedule
        try:
            if ell == 1 or self.cfg.full_chain:
                a = dps_sample(self.prior, self.sampler, lik, rng=rng, trace=steps)
            else:
                start = max(1, int(round(self.cfg.warm_fraction * sched.steps)))
                init = noise_to_step(state.a, start, sched, rng)
                a = dps_sample(self.prior, self.sampler, lik, init=init, start=start, rng=rng, trace=steps)
            status = "ok"
        except DivergenceError as err:
            self._log_dps(t, ell, steps)
            state.record(frame=t + 1, loop=ell, block="anatomy", loss_before=before, loss_after="",
                         evals=len(steps), status="diverged")
            state.flags.append(f"frame1 loop {ell}: {err}")
            if self.cfg.abort_on_divergence:
                raise SolverAbort(str(err), state, err.trace) from err
            return state.a
        except SamplingError as err:
            state.flags.append(f"frame1 loop {ell}: {err}")
            state.record(frame=t + 1, loop=ell, block="anatomy", loss_before=before, loss_after=before,
                         evals=len(steps), status=f"failed: {err.stage}")
            return state.a
        self._log_dps(t, ell, steps)
        after = lik.loss(a)
        state.record(frame=t + 1, loop=ell, block="anatomy", loss_before=before, loss_after=after,
                     evals=len(steps), status=status)
        return a

    def _log_dps(self, t, ell, steps):
        if self.dps_trace is not None:
            for i, L, gn in steps:
                self.dps_trace.append((t + 1, ell, i, L, gn))

    def _motion_block(self, state, t, ell):
        obj = FrameObjective(state.a, state.params(t), self.g[t], self.model, self.cfg.squaring_steps,
                             self.slice_axes)
        theta0 = state.thetas[t]
        try:
            theta, best, trace = adam_minimize(obj.loss_grad, theta0, self.adam)
        except (OptimizationError, LossError) as err:
            state.flags.append(f"frame{t + 1} loop {ell}: {err}")
            state.record(frame=t + 1, loop=ell, block="motion", loss_before="", loss_after="",
                         evals="", status="failed")
            return theta0
        state.record(frame=t + 1, loop=ell, block="motion", loss_before=trace[0], loss_after=best,
                     evals=len(trace), status="ok")
        return theta

    # -- joint ablation --------------------------------------------------

    def _bounds(self):
        return {"alpha": alpha_bounds(self.cfg.tag_spacing), "gamma": GAMMA_BOUNDS, "beta": BETA_BOUNDS}

    def _joint_adam(self, state, t, obj, x0, scales, steps, label):
        def lg(z):
            L, G = obj.loss_grad(z * scales)
            return L, G * scales

        cfg = AdamConfig(**{**asdict(self.adam), "steps": steps})
        try:
            z, best, trace = adam_minimize(lg, x0 / scales, cfg)
        except (OptimizationError, LossError) as err:
            state.flags.append(f"frame{t + 1} joint: {err}")
            state.record(frame=t + 1, loop=label, block="joint", status="failed")
            return obj.unpack(x0)
        state.record(frame=t + 1, loop=label, block="joint", loss_before=trace[0], loss_after=best,
                     evals=len(trace), status="ok")
        return obj.unpack(z * scales)

    def _group_scales(self, obj):
        ratio = self.cfg.joint_lr / self.adam.lr
        return np.concatenate([np.full(obj.sizes[k], 1.0 if k == "theta" else ratio) for k in obj.free])

    def _joint_frame1(self, state):
        t = 0
        state.stage = "frame1:joint"
        b = self._bounds()
        alpha0 = np.clip(state.alpha, *np.array(b["alpha"]).T)
        params = ForwardParams(alpha0, np.full(3, self.cfg.joint_gamma0), state.betas[t])
        obj = JointObjective(self.g[t], self.model, state.a, params, state.thetas[t],
                             ["a", "alpha", "gamma", "beta", "theta"], b, self.cfg.squaring_steps, self.slice_axes)
        v = self._joint_adam(state, t, obj, obj.pack(), self._group_scales(obj),
                             self.adam.steps * self.cfg.loops, "joint")
        state.a, state.alpha, state.gamma = v["a"], v["alpha"], v["gamma"]
        state.set_frame(t, beta=v["beta"], theta=v["theta"])
        state.complete_frame(t)
        return state

    def _joint_frame_t(self, state, t):
        state.stage = f"frame{t + 1}:joint"
        obj = JointObjective(self.g[t], self.model, state.a, state.params(t), state.thetas[t],
                             ["beta", "theta"], self._bounds(), self.cfg.squaring_steps, self.slice_axes)
        v = self._joint_adam(state, t, obj, obj.pack(), self._group_scales(obj),
                             self.adam.steps * self.cfg.loops_later, "joint")
        state.set_frame(t, beta=v["beta"], theta=v["theta"])
        state.complete_frame(t)
        return state


@dataclass
class SolveResult:
    anatomy: np.ndarray
    alpha: np.ndarray
    gamma: np.ndarray
    betas: np.ndarray
    deformations: list
    cines: list
    state: SolverState = field(repr=False, default=None)


def collect_result(solver, state):
    phis = []
    for t in range(state.completed):
        phi = solver.deformation(state.thetas[t])
        phis.append(phi if phi is not None else _identity(solver.dims))
    cines = [pullback(state.a, phi) for phi in phis]
    return SolveResult(np.array(state.a), np.array(state.alpha), np.array(state.gamma),
                       np.array(state.betas[:state.completed]), phis, cines, state)


def _identity(dims):
    from .fields import identity_map
    return identity_map(dims)


def initialize(measurements, prior=None, **kw):
    return CDDPSolver(measurements, prior, **kw).initialize()


def solve_sequence(measurements, prior, on_frame=None, state=None, **kw):
    solver = CDDPSolver(measurements, prior, **kw)
    state = solver.run(state, on_frame)
    return collect_result(solver, state)


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path, state):
    """Persist a state after a completed frame (float64, exact round trip)."""
    import json
    arrays = {"a": state.a, "alpha": state.alpha, "gamma": state.gamma}
    for t in range(state.completed):
        arrays[f"beta_{t}"] = state.betas[t]
        arrays[f"theta_{t}"] = state.thetas[t]
    meta = {"frames": state.frames, "completed": state.completed, "stage": state.stage,
            "seed": state.seed, "flags": state.flags, "trace": state.trace}
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    import json
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        state = SolverState(z["a"], z["alpha"], z["gamma"], meta["frames"], meta["seed"])
        for t in range(meta["completed"]):
            state.betas[t] = z[f"beta_{t}"].copy()
            state.thetas[t] = z[f"theta_{t}"].copy()
    state.trace = meta["trace"]
    state.flags = meta["flags"]
    for t in range(meta["completed"]):
        state.complete_frame(t)
    state.stage = meta["stage"]
    return state
