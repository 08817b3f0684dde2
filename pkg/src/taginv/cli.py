"""
Command-line front end: ``simulate``, ``solve``, ``evaluate`` and ``report``.

Exit codes: 0 success, 2 configuration or grid error, 3 I/O error,
4 solver divergence.
"""

import argparse
import hashlib
import logging
import os
from pathlib import Path
import platform
import sys

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load
from .ivt import FormatError, read_ivt, write_ivt
from .metrics import displacement
from .pipeline import baseline_images, build_prior, evaluate, make_solver, simulate
from .plotting import save_panel
from .runio import (
    GridError,
    count_frames,
    read_estimate,
    read_json,
    read_measurements,
    read_volumes,
    sha256,
    write_json,
    write_measurements,
    write_trace,
    write_truth,
    write_volumes,
)
from .solver import ABLATIONS, TRACE_FIELDS, SolverAbort, collect_result, load_checkpoint, save_checkpoint

log = logging.getLogger("taginv")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED = 0, 2, 3, 4
DPS_TRACE_FIELDS = ("frame", "loop", "step", "loss", "guidance_norm")
METHODS = ("LowpassFuse", "HARP-Demod", "Ours")
REPORT_METRICS = ("psnr", "ssim", "epe_mean", "epe_p95", "negdet_pct")


# -- configuration -----------------------------------------------------------

def resolve_config(args):
    cfg = load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.ablate is not None:
        cfg.solver.ablation = args.ablate
    if args.prior is not None:
        cfg.prior.kind = args.prior
    if args.full_chain:
        cfg.solver.full_chain = True
    return cfg


def set_threads(args):
    n = args.threads if args.threads is not None else os.environ.get("INVTAG_THREADS")
    if n is None or n == "":
        return
    import numba
    try:
        n = int(n)
    except ValueError:
        raise ConfigError(f"thread count must be an integer, got {n!r}") from None
    if n < 1:
        raise ConfigError("thread count must be >= 1")
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def config_hash(cfg):
    return hashlib.sha256(cfg.to_json().encode()).hexdigest()


def versions():
    import numba
    import scipy
    return {"taginv": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__}


# -- commands ----------------------------------------------------------------

def cmd_simulate(args):
    cfg = resolve_config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meas, truth, templates = simulate(cfg)
    write_measurements(out, meas)
    write_truth(out, truth)
    write_ivt(out / "templates.ivt", np.moveaxis(templates, 0, -1))
    (out / "config.resolved.json").write_text(cfg.to_json(), encoding="utf-8")
    sq = cfg.sequence
    write_json(out / "spec.json", {
        "seed": cfg.seed,
        "grid": list(cfg.grid.dims),
        "frames": sq.frames,
        "alpha": list(sq.alpha),
        "blur": sq.blur,
        "gamma": list(sq.gamma),
        "noise": sq.noise,
        "noise_std": float(truth.noise_std),
        "betas": truth.betas.tolist(),
        "fading": "affine stand-in schedule" if sq.betas is None else "user supplied",
        "motion": {"amplitude": sq.amplitude, "smoothness": sq.smoothness, "rk_steps": sq.rk_steps,
                   "border": sq.border, "time_fractions": [(t + 1) / sq.frames for t in range(sq.frames)]},
        "templates": {"count": int(len(templates)), "near_match": cfg.prior.near_match},
    })
    log.info("wrote %d frames to %s", len(meas), out)
    return EXIT_OK


def cmd_solve(args):
    cfg = resolve_config(args)
    data, out = Path(args.data_dir), Path(args.out_dir)
    if out.resolve() == data.resolve():
        raise ConfigError("output directory must differ from the input directory")
    meas = read_measurements(data)
    templates = np.moveaxis(read_ivt(data / "templates.ivt").astype(np.float64), -1, 0)
    if templates.shape[1:] != meas[0]["x"].shape:
        raise GridError(f"template grid {templates.shape[1:]} does not match data grid {meas[0]['x'].shape}")
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.npz"
    resolved = cfg.to_json()
    if args.resume:
        if not ckpt.exists():
            raise FileNotFoundError(f"--resume given but {ckpt} does not exist")
        prev = (out / "config.resolved.json").read_text(encoding="utf-8")
        if prev != resolved:
            raise ConfigError("--resume with a configuration that differs from the interrupted run")
        state = load_checkpoint(ckpt)
        if state.frames != len(meas):
            raise GridError(f"checkpoint has {state.frames} frames, data has {len(meas)}")
    else:
        state = None
    (out / "config.resolved.json").write_text(resolved, encoding="utf-8")

    dps_rows = [] if args.trace else None
    dps_path = out / "dps_trace.csv"
    if args.trace and args.resume and dps_path.exists():
        import csv
        with open(dps_path, encoding="utf-8") as fh:
            dps_rows = [tuple(_num(r[k]) for k in DPS_TRACE_FIELDS) for r in csv.DictReader(fh)]
    solver = make_solver(cfg, meas, build_prior(cfg.prior, templates), dps_trace=dps_rows)
    if state is None:
        state = solver.initialize()
    max_frames = args.max_frames

    def on_frame(st):
        save_checkpoint(ckpt, st)
        write_trace(out / "trace.csv", st.trace, TRACE_FIELDS)
        if dps_rows is not None:
            write_trace(dps_path, [dict(zip(DPS_TRACE_FIELDS, r)) for r in dps_rows], DPS_TRACE_FIELDS)
        log.info("frame %d of %d done", st.completed, st.frames)
        if max_frames is not None and st.completed >= max_frames and st.completed < st.frames:
            raise _Stop()

    manifest = {
        "seed": cfg.seed,
        "config_sha256": config_hash(cfg),
        "inputs": {p.name: sha256(p) for p in sorted(data.glob("*.ivt"))},
        "versions": versions(),
        "ablation": "joint" if cfg.solver.ablation == "no-cddp" else cfg.solver.ablation,
        "prior": cfg.prior.kind,
        "full_chain": cfg.solver.full_chain,
    }
    try:
        solver.run(state, on_frame)
    except _Stop:
        manifest.update(status="incomplete", completed_frames=state.completed, flags=list(state.flags))
        write_json(out / "manifest.json", manifest)
        log.info("stopped after %d frame(s); continue with --resume", state.completed)
        return EXIT_OK
    except SolverAbort as err:
        trace_path = out / "divergence_trace.csv"
        rows = [dict(zip(("loss",), (float(x),))) for x in (err.trace or [])]
        write_trace(trace_path, rows, ("loss",))
        write_trace(out / "trace.csv", err.state.trace, TRACE_FIELDS)
        manifest.update(status="diverged", stage=err.state.stage, completed_frames=err.state.completed,
                        flags=list(err.state.flags))
        write_json(out / "manifest.json", manifest)
        print(f"solver diverged at {err.state.stage}: {err}; trace written to {trace_path}", file=sys.stderr)
        return EXIT_DIVERGED
    res = collect_result(solver, state)
    params = {"alpha": res.alpha.tolist(), "gamma": res.gamma.tolist(), "betas": res.betas.tolist()}
    write_volumes(out, res.anatomy, res.cines, res.deformations, params)
    manifest.update(status="flagged" if state.flags else "ok", completed_frames=state.completed,
                    flags=list(state.flags),
                    final_loss=[_last_loss(state.trace, t + 1) for t in range(state.frames)],
                    outputs={p.name: sha256(p) for p in sorted(out.glob("*.ivt"))})
    write_json(out / "manifest.json", manifest)
    return EXIT_OK


class _Stop(Exception):
    pass


def _num(s):
    try:
        return int(s)
    except ValueError:
        return float(s)


def _last_loss(trace, frame):
    vals = [r["loss_after"] for r in trace if r["frame"] == frame and isinstance(r["loss_after"], float)]
    return vals[-1] if vals else None


def cmd_evaluate(args):
    sim, est_dir, out = Path(args.truth_dir), Path(args.solve_dir), Path(args.out_dir)
    truth = read_volumes(sim / "truth")
    est = read_estimate(est_dir)
    meas = read_measurements(sim) if count_frames(sim) else None
    if est.anatomy.shape != truth.anatomy.shape or len(est.cines) != len(truth.cines):
        raise GridError(f"estimate grid {est.anatomy.shape} x {len(est.cines)} frames does not match "
                        f"truth {truth.anatomy.shape} x {len(truth.cines)}")
    cfg_path = est_dir / "config.resolved.json"
    cfg = load(args.config) if args.config else (load(cfg_path) if cfg_path.exists() else RunConfig())
    est.deformations = est.maps
    report = evaluate(truth, est, meas, cfg)
    report["estimate"] = {"alpha": est.alpha.tolist(), "gamma": est.gamma.tolist(), "betas": est.betas.tolist()}
    report["truth"] = {"alpha": truth.alpha.tolist(), "gamma": truth.gamma.tolist(), "betas": truth.betas.tolist()}
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "report.json", _jsonable(report))
    for t, true_cine in enumerate(truth.cines):
        rows = []
        if meas is not None:
            rows.append(("input x", meas[t]["x"]))
            rows += list(baseline_images(meas[t], float(truth.alpha[1]), cfg.metrics.lowpass_sigma,
                                         cfg.metrics.harp_f0).items())
        rows += [("ours", est.cines[t]), ("truth", true_cine),
                 ("|u| ours", displacement(est.maps[t])), ("|u| truth", displacement(truth.maps[t]))]
        save_panel(out / f"frame_{t + 1}.png", rows)
    return EXIT_OK


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if np.isnan(v):
            return None
        if np.isinf(v):
            return "inf" if v > 0 else "-inf"
    return v


def _as_float(v):
    if v is None:
        return float("nan")
    if v == "inf":
        return float("inf")
    if v == "-inf":
        return float("-inf")
    return float(v)


def summarize(reports):
    """Mean and s.d. across cases of each frame-averaged metric, per method."""
    table = {}
    for method in METHODS:
        for metric in REPORT_METRICS:
            per_case = []
            for rep in reports:
                vals = [_as_float(f[method][metric]) for f in rep["frames"] if metric in f.get(method, {})]
                if vals:
                    per_case.append(float(np.mean(vals)))
            if per_case:
                with np.errstate(invalid="ignore"):
                    sd = float(np.std(per_case, ddof=1)) if len(per_case) > 1 else 0.0
                table[(method, metric)] = (float(np.mean(per_case)), sd, len(per_case))
    return table


def cmd_report(args):
    reports = [read_json(Path(d) / "report.json") for d in args.eval_dirs]
    table = summarize(reports)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["method,metric,mean,sd,cases"]
    for (method, metric), (m, s, n) in table.items():
        lines.append(f"{method},{metric},{m!r},{s!r},{n}")
    (out / "report.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    md = ["| Method | " + " | ".join(REPORT_METRICS) + " |", "|---" * (len(REPORT_METRICS) + 1) + "|"]
    for method in METHODS:
        cells = []
        for metric in REPORT_METRICS:
            if (method, metric) in table:
                m, s, _ = table[(method, metric)]
                cells.append(f"{m:.4g} ± {s:.2g}")
            else:
                cells.append("")
        md.append(f"| {method} | " + " | ".join(cells) + " |")
    (out / "report.md").write_text("\n".join(md) + "\n", encoding="utf-8")
    print("\n".join(md))
    return EXIT_OK


# -- entry point -------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--threads", type=int, help="worker threads (fallback: INVTAG_THREADS)")
    common.add_argument("--trace", action="store_true", help="also write the per-step sampler trace")
    common.add_argument("--resume", action="store_true", help="continue from the last completed frame")
    common.add_argument("--ablate", choices=ABLATIONS, help="run an ablation")
    common.add_argument("--prior", choices=("gmm", "gp"), help="anatomy prior")
    common.add_argument("--full-chain", action="store_true", help="sample every loop from pure noise")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="taginv", description=__doc__.strip().splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("simulate", parents=[common], help="generate a synthetic tagged sequence")
    s.add_argument("out_dir")
    s = sub.add_parser("solve", parents=[common], help="estimate anatomy, parameters and motion")
    s.add_argument("data_dir")
    s.add_argument("out_dir")
    s.add_argument("--max-frames", type=int, help="stop after this many frames (resume later)")
    s = sub.add_parser("evaluate", parents=[common], help="score a solve against the truth bundle")
    s.add_argument("truth_dir", help="simulation directory")
    s.add_argument("solve_dir", help="solver output (or a simulation directory)")
    s.add_argument("out_dir")
    s = sub.add_parser("report", parents=[common], help="aggregate evaluation reports")
    s.add_argument("eval_dirs", nargs="+")
    s.add_argument("-o", "--out", required=True)
    return p


COMMANDS = {"simulate": cmd_simulate, "solve": cmd_solve, "evaluate": cmd_evaluate, "report": cmd_report}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        set_threads(args)
        return COMMANDS[args.command](args)
    except (ConfigError, GridError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError) as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
