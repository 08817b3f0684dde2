import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from taginv.fields import GridSpec, identity_map
from taginv.forward import ForwardParams, forward, pullback
from taginv.metrics import (
    MetricReport,
    epe,
    foreground_mask,
    frame_report,
    harp_demodulate,
    lowpass_fuse,
    minmax,
    nearest_rank,
    negdet_pct,
    psnr,
    psnr_normalized,
    ssim,
)
from taginv.phantom import random_phantom_spec, render_phantom


def ssim_loop(x, y, radius=3, sigma=1.5, k1=0.01, k2=0.03):
    """Windowed statistics evaluated voxel by voxel on the interior."""
    r = np.arange(-radius, radius + 1)
    g = np.exp(-r ** 2 / (2 * sigma ** 2))
    w = g[:, None, None] * g[None, :, None] * g[None, None, :]
    w /= w.sum()
    c1, c2 = k1 ** 2, k2 ** 2
    vals = []
    n = x.shape
    for i in range(radius, n[0] - radius):
        for j in range(radius, n[1] - radius):
            for k in range(radius, n[2] - radius):
                px = x[i - radius:i + radius + 1, j - radius:j + radius + 1, k - radius:k + radius + 1]
                py = y[i - radius:i + radius + 1, j - radius:j + radius + 1, k - radius:k + radius + 1]
                mx, my = np.sum(w * px), np.sum(w * py)
                vx = np.sum(w * (px - mx) ** 2)
                vy = np.sum(w * (py - my) ** 2)
                cxy = np.sum(w * (px - mx) * (py - my))
                vals.append((2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def cosine_volumes(dims, lam, amp=1.0, offset=0.0):
    idx = identity_map(dims)
    return {o: offset + amp * np.cos(2 * np.pi * idx[..., "xyz".index(o)] / lam) for o in "xyz"}


# -- LowpassFuse ---------------------------------------------------------------

def test_lowpass_constant_and_zero_width(rng):
    c = {o: np.full((8, 8, 8), 0.4) for o in "xyz"}
    assert np.allclose(lowpass_fuse(c, 2.0), 0.4, atol=1e-14)
    vols = {o: rng.standard_normal((6, 6, 6)) for o in "xyz"}
    assert np.allclose(lowpass_fuse(vols, 0.0), sum(vols.values()) / 3, atol=1e-15)
    with pytest.raises(ValueError):
        lowpass_fuse(vols, -1.0)


def test_lowpass_matches_gaussian_frequency_response():
    lam = 8.0
    sigma = lam / 2
    vols = cosine_volumes((64, 8, 8), lam, amp=0.8, offset=0.5)
    out = lowpass_fuse({"x": vols["x"]}, sigma)
    ripple = 0.5 * (out[16:48, 4, 4].max() - out[16:48, 4, 4].min())
    expected = math.exp(-0.5 * (2 * np.pi * sigma / lam) ** 2) * 0.8
    assert ripple == pytest.approx(expected, rel=0.05)


# -- HARP ----------------------------------------------------------------------

@pytest.mark.parametrize("lam", [8.0, 10.2])
def test_harp_single_sideband_restores_amplitude(lam):
    c = 0.7
    vols = cosine_volumes((48, 48, 48), lam, amp=c)
    out = harp_demodulate(vols, 1.0 / lam)
    inner = out[12:36, 12:36, 12:36]
    assert np.max(np.abs(inner - c)) <= 0.05 * c


def test_harp_empty_passband_and_bad_frequency(rng):
    vols = {o: np.full((16, 16, 16), 3.0) for o in "xyz"}
    assert np.max(np.abs(harp_demodulate(vols, 0.125))) <= 1e-12
    with pytest.raises(ValueError):
        harp_demodulate(vols, 0.0)


def test_harp_degrades_under_large_motion():
    grid = GridSpec((48, 48, 48))
    # smooth anatomy so that the static HARP error is small
    a = ndimage.gaussian_filter(render_phantom(random_phantom_spec(grid, 2)), 3.0)
    p = ForwardParams((0.8, 8.0, 0.0, 0.2), (0.4, 1.0, 1.0), (1.0, 0.0))
    # periodic compression along x shifts the local tag frequency by up to 60%
    phi = identity_map(grid.dims)
    phi[..., 0] += 3.0 * np.sin(2 * np.pi * phi[..., 0] / 32.0)
    static = harp_demodulate({o: forward(a, o, p) for o in "xyz"}, 1 / 8.0)
    moved = harp_demodulate({o: forward(a, o, p, phi) for o in "xyz"}, 1 / 8.0)
    assert psnr_normalized(moved, pullback(a, phi)) < psnr_normalized(static, a) - 1.0


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10.0))
def test_baselines_scale_linearly(seed, c):
    rng = np.random.default_rng(seed)
    vols = {o: rng.standard_normal((8, 8, 8)) for o in "xyz"}
    scaled = {o: c * v for o, v in vols.items()}
    assert np.allclose(lowpass_fuse(scaled, 1.3), c * lowpass_fuse(vols, 1.3), rtol=1e-12, atol=1e-12)
    assert np.allclose(harp_demodulate(scaled, 0.2), c * harp_demodulate(vols, 0.2), rtol=1e-10, atol=1e-12)


# -- PSNR / SSIM ---------------------------------------------------------------

def test_psnr_examples(rng):
    x = rng.uniform(0, 1, (8, 8, 8))
    assert psnr(x, x) == float("inf")
    assert psnr(x, x + 0.1) == pytest.approx(20.0, abs=1e-9)
    with pytest.raises(ValueError, match="grid mismatch"):
        psnr(x, x[:-1])


def test_psnr_normalized_is_shift_and_scale_free(rng):
    x = rng.uniform(0, 1, (8, 8, 8))
    y = x + 0.05 * rng.standard_normal(x.shape)
    assert psnr_normalized(3 * x - 1, y) == pytest.approx(psnr_normalized(x, y), abs=1e-9)
    assert psnr_normalized(x, y) == pytest.approx(psnr_normalized(y, x), abs=1e-12)
    assert np.array_equal(minmax(np.ones(3)), np.zeros(3))


def test_ssim_identity_and_symmetry(rng):
    x = rng.uniform(0, 1, (12, 12, 12))
    y = rng.uniform(0, 1, (12, 12, 12))
    assert ssim(x, x) == 1.0
    assert ssim(x, y) == pytest.approx(ssim(y, x), abs=1e-14)


def test_ssim_matches_loop_oracle(rng):
    x = ndimage.gaussian_filter(rng.uniform(0, 1, (16, 16, 16)), 1.0)
    y = x + 0.05 * rng.standard_normal(x.shape)
    x, y = minmax(x), minmax(y)
    assert ssim(x, y) == pytest.approx(ssim_loop(x, y), abs=1e-6)


# -- motion metrics ------------------------------------------------------------

def test_epe_examples(rng):
    u = rng.standard_normal((6, 6, 6, 3))
    assert epe(u, u) == (0.0, 0.0)
    mean, p95 = epe(u + np.array([0.3, 0.0, 0.4]), u)
    assert mean == pytest.approx(0.5) and p95 == pytest.approx(0.5)


def test_epe_matches_loop_oracle(rng):
    a = rng.standard_normal((8, 8, 8, 3))
    b = rng.standard_normal((8, 8, 8, 3))
    mask = rng.uniform(size=(8, 8, 8)) > 0.3
    errs = []
    for idx in np.ndindex(8, 8, 8):
        if mask[idx]:
            errs.append(math.sqrt(sum((a[idx][c] - b[idx][c]) ** 2 for c in range(3))))
    errs.sort()
    rank = math.ceil(0.95 * len(errs))
    mean, p95 = epe(a, b, mask)
    assert mean == pytest.approx(sum(errs) / len(errs), abs=1e-10)
    assert p95 == errs[rank - 1]


def test_nearest_rank():
    assert nearest_rank(np.arange(1, 21), 95) == 19
    assert nearest_rank([5.0], 95) == 5.0
    assert math.isnan(nearest_rank([], 95))


def test_negdet_examples():
    ident = identity_map((8, 8, 8))
    assert negdet_pct(ident) == 0.0
    assert negdet_pct(-ident + 7.0) == 100.0


def test_frame_report_and_json(rng):
    cine = rng.uniform(0, 1, (8, 8, 8))
    phi = identity_map((8, 8, 8))
    rep = frame_report(cine, cine, phi, phi)
    d = rep.to_dict()
    assert d["psnr"] == "inf" and d["ssim"] == 1.0 and d["epe_mean"] == 0.0 and d["negdet_pct"] == 0.0
    assert MetricReport(1.0, 0.5).to_dict()["epe_mean"] is None
    assert np.array_equal(foreground_mask(cine), cine > 0.05)
