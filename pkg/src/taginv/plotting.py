"""Mid-slice PNG panels (axial / coronal / sagittal) of volumes and motion magnitudes."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

VIEWS = ("sagittal", "coronal", "axial")


def mid_slices(vol):
    """The three orthogonal slices through the grid centre, one per axis."""
    vol = np.asarray(vol)
    c = [n // 2 for n in vol.shape[:3]]
    return [vol[c[0], :, :], vol[:, c[1], :], vol[:, :, c[2]]]


def save_panel(path, rows, cmap="gray"):
    """Write a grid of mid-slices: one row per (title, volume) pair.

    Volumes are shown on their own min-max range; 4D vector fields are shown
    as displacement magnitude.
    """
    rows = list(rows)
    fig, axes = plt.subplots(len(rows), 3, figsize=(6.0, 2.0 * len(rows)), squeeze=False)
    for r, (title, vol) in enumerate(rows):
        vol = np.asarray(vol, dtype=np.float64)
        if vol.ndim == 4:
            vol = np.sqrt(np.sum(vol * vol, axis=-1))
        lo, hi = float(vol.min()), float(vol.max())
        for c, (img, view) in enumerate(zip(mid_slices(vol), VIEWS)):
            ax = axes[r, c]
            ax.imshow(img.T, origin="lower", cmap=cmap, vmin=lo, vmax=hi if hi > lo else lo + 1)
            ax.set_xticks([])
            ax.set_yticks([])
            if c == 0:
                ax.set_ylabel(title, fontsize=8)
            if r == 0:
                ax.set_title(view, fontsize=8)
    fig.tight_layout()
    # fixed metadata keeps the bytes reproducible
    fig.savefig(path, dpi=80, metadata={"Software": None})
    plt.close(fig)
