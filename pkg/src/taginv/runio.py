"""
On-disk layout of simulation, solver and evaluation run directories.

Simulation directory::

    g_{t}_{o}.ivt        measurement of frame t (1-based), orientation o
    templates.ivt        prior template bank, (nx, ny, nz, K)
    truth/               anatomy.ivt, cine_t{t}.ivt, deform_t{t}.ivt, params.json
    spec.json            every generation parameter and the seed

Solver directory::

    anatomy.ivt, cine_t{t}.ivt, deform_t{t}.ivt, params.json, trace.csv,
    checkpoint.npz, manifest.json
"""

import csv
import hashlib
import json
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from .forward import ORIENTATIONS
from .ivt import read_ivt, write_ivt


class GridError(ValueError):
    """Volumes that should share a grid do not."""


def write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def measurement_path(root, t, o):
    return Path(root) / f"g_{t + 1}_{o}.ivt"


def count_frames(root):
    t = 0
    while measurement_path(root, t, "x").exists():
        t += 1
    return t


def write_measurements(root, meas):
    for t, frame in enumerate(meas):
        for o in ORIENTATIONS:
            write_ivt(measurement_path(root, t, o), frame[o])


def read_measurements(root):
    frames = count_frames(root)
    if frames == 0:
        raise FileNotFoundError(f"no measurements g_1_x.ivt in {root}")
    meas = [{o: read_ivt(measurement_path(root, t, o)).astype(np.float64) for o in ORIENTATIONS}
            for t in range(frames)]
    dims = {m.shape for frame in meas for m in frame.values()}
    if len(dims) != 1:
        raise GridError(f"measurement grids differ: {sorted(dims)}")
    return meas


def write_volumes(root, anatomy, cines, maps, params):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    write_ivt(root / "anatomy.ivt", anatomy)
    for t, (cine, phi) in enumerate(zip(cines, maps)):
        write_ivt(root / f"cine_t{t + 1}.ivt", cine)
        write_ivt(root / f"deform_t{t + 1}.ivt", phi)
    write_json(root / "params.json", params)


def read_volumes(root):
    """Anatomy, cines, maps and parameters of a truth bundle or solver output."""
    root = Path(root)
    params = read_json(root / "params.json")
    frames = len(params["betas"])
    return SimpleNamespace(
        anatomy=read_ivt(root / "anatomy.ivt").astype(np.float64),
        cines=[read_ivt(root / f"cine_t{t + 1}.ivt").astype(np.float64) for t in range(frames)],
        maps=[read_ivt(root / f"deform_t{t + 1}.ivt").astype(np.float64) for t in range(frames)],
        alpha=np.asarray(params["alpha"], dtype=np.float64),
        gamma=np.asarray(params["gamma"], dtype=np.float64),
        betas=np.asarray(params["betas"], dtype=np.float64),
        params=params,
    )


def write_truth(root, truth):
    params = {"alpha": truth.alpha.tolist(), "gamma": truth.gamma.tolist(), "betas": truth.betas.tolist(),
              "noise_std": float(truth.noise_std)}
    write_volumes(Path(root) / "truth", truth.anatomy, truth.cines, truth.maps, params)


def read_estimate(root):
    """Solver outputs in ``root``, or the truth bundle if ``root`` is a simulation directory."""
    root = Path(root)
    if (root / "anatomy.ivt").exists():
        return read_volumes(root)
    if (root / "truth" / "anatomy.ivt").exists():
        return read_volumes(root / "truth")
    raise FileNotFoundError(f"no solver output or truth bundle in {root}")


def write_trace(path, rows, fields):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _cell(row[k]) for k in fields})


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    return v
