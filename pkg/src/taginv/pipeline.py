"""
Glue between a RunConfig and the numerical modules: synthetic instances,
priors, the solver, baselines and the evaluation report.
"""

import numpy as np

from .fields import GridSpec
from .forward import ORIENTATIONS
from .metrics import (
    FOREGROUND_THRESHOLD,
    displacement,
    epe,
    foreground_mask,
    harp_demodulate,
    lowpass_fuse,
    negdet_pct,
    psnr_normalized,
    ssim_normalized,
)
from .phantom import (
    MotionSpec,
    SequenceSpec,
    make_divergence_free_motion,
    perturb_phantom_spec,
    random_phantom_spec,
    render_phantom,
    render_sequence,
)
from .prior import StationaryGPPrior, TemplateBankPrior
from .solver import CDDPSolver

# offsets of the per-purpose seeds derived from the run seed
MOTION_SEED = 100
NOISE_SEED = 200
NEAR_MATCH_SEED = 300
TEMPLATE_SEED = 1000


def simulate(cfg):
    """Synthetic instance for ``cfg``: (measurements, truth, template stack (K, nx, ny, nz))."""
    seed = cfg.seed
    grid = GridSpec(cfg.grid.dims)
    sq = cfg.sequence
    spec = random_phantom_spec(grid, seed)
    anatomy = render_phantom(spec)
    mspec = MotionSpec(seed=seed + MOTION_SEED, amplitude=sq.amplitude, smoothness=sq.smoothness,
                       rk_steps=sq.rk_steps, frames=sq.frames, border=sq.border)
    maps, _ = make_divergence_free_motion(mspec, grid.dims)
    seq = SequenceSpec(frames=sq.frames, alpha=sq.alpha, gamma=sq.gamma, noise=sq.noise, betas=sq.betas)
    meas, truth = render_sequence(anatomy, maps, seq, seed=seed + NOISE_SEED)
    return meas, truth, template_bank(spec, cfg.prior, seed)


def template_bank(spec, prior_cfg, seed):
    temps = []
    if prior_cfg.near_match:
        temps.append(render_phantom(perturb_phantom_spec(spec, seed + NEAR_MATCH_SEED)))
    k = len(temps)
    while len(temps) < prior_cfg.templates:
        temps.append(render_phantom(random_phantom_spec(spec.grid, seed + TEMPLATE_SEED + k)))
        k += 1
    return np.stack(temps)


def build_prior(prior_cfg, templates):
    templates = np.asarray(templates, dtype=np.float64)
    if prior_cfg.kind == "gp":
        return StationaryGPPrior(templates.mean(axis=0), prior_cfg.gp_lam, prior_cfg.gp_p)
    return TemplateBankPrior(templates, prior_cfg.sigma)


def make_solver(cfg, measurements, prior, dps_trace=None):
    return CDDPSolver(measurements, prior, solver=cfg.solver, sampler=cfg.sampler,
                      de=cfg.de, adam=cfg.adam, seed=cfg.seed, dps_trace=dps_trace)


def baseline_images(frame, spacing, lowpass_sigma=None, harp_f0=None):
    """LowpassFuse and HARP-Demod syntheses of one frame's three volumes."""
    sigma = spacing / (2.0 * np.pi) if lowpass_sigma is None else lowpass_sigma
    f0 = 1.0 / spacing if harp_f0 is None else harp_f0
    return {"LowpassFuse": lowpass_fuse(frame, sigma), "HARP-Demod": harp_demodulate(frame, f0)}


def evaluate(truth, result, measurements, cfg):
    """Per-frame metrics of ours and both baselines against the true cines.

    ``truth`` and ``result`` need ``cines`` and the deformations (``maps`` /
    ``deformations``); ``result.alpha`` is not used, the baselines get the
    true tag spacing as they require it a priori.
    """
    thr = cfg.metrics.foreground_threshold if cfg is not None else FOREGROUND_THRESHOLD
    spacing = float(truth.alpha[1])
    lp = cfg.metrics.lowpass_sigma if cfg is not None else None
    f0 = cfg.metrics.harp_f0 if cfg is not None else None
    frames = []
    for t, true_cine in enumerate(truth.cines):
        row = {"frame": t + 1}
        est = result.cines[t]
        mask = foreground_mask(true_cine, thr)
        row["Ours"] = {
            "psnr": psnr_normalized(est, true_cine),
            "ssim": ssim_normalized(est, true_cine),
        }
        mean, p95 = epe(displacement(result.deformations[t]), displacement(truth.maps[t]), mask)
        row["Ours"].update(epe_mean=mean, epe_p95=p95, negdet_pct=negdet_pct(result.deformations[t]))
        if measurements is not None:
            for name, img in baseline_images(measurements[t], spacing, lp, f0).items():
                row[name] = {"psnr": psnr_normalized(img, true_cine), "ssim": ssim_normalized(img, true_cine)}
        frames.append(row)
    return {
        "frames": frames,
        "foreground_threshold": thr,
        "foreground_voxels": [int(np.count_nonzero(foreground_mask(c, thr))) for c in truth.cines],
        "harp": {"f0": f0 if f0 is not None else 1.0 / spacing, "scale": 2.0, "radius": "f0/2"},
        "lowpass_sigma": lp if lp is not None else spacing / (2.0 * np.pi),
        "orientations": list(ORIENTATIONS),
    }
