import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from taginv.fields import identity_map
from taginv.forward import (
    ForwardParams,
    apply_fading,
    base_tag,
    faded_tag,
    forward,
    forward_adjoint,
    psf_frame,
    pullback,
    residual_loss,
    total_residual_loss,
)

from conftest import rel_err


def straight_line_forward(a, o, alpha, gamma, beta, phi):
    """Independent composition: explicit loops, scipy warping, dense convolution."""
    nx, ny, nz = a.shape
    ax = "xyz".index(o)
    q = np.empty(a.shape)
    for idx in np.ndindex(a.shape):
        q[idx] = alpha[0] * math.cos(2 * math.pi * idx[ax] / alpha[1] + alpha[2]) + alpha[3]
    w = a * np.abs(beta[0] * q + beta[1])
    warped = ndimage.map_coordinates(w, np.moveaxis(phi, -1, 0), order=1, mode="nearest")
    # gamma = (perp, par, thru); slice axis z for x/y tags and y for z tags
    axes = {"x": (0, 1, 2), "y": (1, 0, 2), "z": (2, 0, 1)}[o]
    sig = [0.0, 0.0, 0.0]
    for s, g_ax in zip(gamma, axes):
        sig[g_ax] = s
    kernels = []
    for s in sig:
        if s == 0:
            kernels.append(np.ones(1))
            continue
        h = math.ceil(4 * s)
        u = np.arange(-h, h + 1)
        k = np.exp(-u ** 2 / (2 * s * s))
        kernels.append(k / k.sum())
    k3 = kernels[0][:, None, None] * kernels[1][None, :, None] * kernels[2][None, None, :]
    return ndimage.convolve(warped, k3, mode="nearest")


def smooth_map(rng, dims, amp=1.5):
    u = ndimage.gaussian_filter(rng.standard_normal(tuple(dims) + (3,)), (2, 2, 2, 0))
    return identity_map(dims) + amp * u / np.abs(u).max()


# -- tags and fading -----------------------------------------------------------

def test_base_tag_examples():
    q = base_tag((12, 12, 12), "x", (1, 10, 0, 0))
    assert q[0, 5, 7] == pytest.approx(1.0)
    assert q[5, 0, 0] == pytest.approx(-1.0)
    q = base_tag((12, 12, 12), "y", (0.7, 8, np.pi / 2, 0.2))
    assert q[3, 2, 9] == pytest.approx(-0.5, abs=1e-12)


def test_base_tag_rejects_nonpositive_spacing():
    with pytest.raises(ValueError):
        base_tag((8, 8, 8), "x", (1, 0, 0, 0))
    with pytest.raises(ValueError):
        base_tag((8, 8, 8), "w", (1, 5, 0, 0))


def test_fading_examples(rng):
    q = rng.standard_normal((4, 4, 4))
    assert np.array_equal(apply_fading(q, (1, 0)), np.abs(q))
    assert np.allclose(apply_fading(q, (0, 0.3)), 0.3)
    assert apply_fading(np.array(-0.5), (0.4, 0.1)) == pytest.approx(0.1)


# -- pullback ------------------------------------------------------------------

def test_pullback_identity_and_shift(rng):
    u = rng.standard_normal((6, 6, 6))
    assert np.array_equal(pullback(u, identity_map(u.shape)), u)
    ramp = identity_map((8, 8, 8))[..., 0].copy()
    shifted = pullback(ramp, identity_map((8, 8, 8)) + np.array([1.0, 0, 0]))
    assert np.allclose(shifted[:-1], ramp[:-1] + 1.0)


def test_pullback_grid_mismatch():
    with pytest.raises(ValueError):
        pullback(np.zeros((4, 4, 4)), identity_map((5, 4, 4)))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_nearest_pullback_commutes_with_products(seed):
    rng = np.random.default_rng(seed)
    u, v = rng.standard_normal((2, 6, 7, 5))
    phi = identity_map(u.shape) + rng.uniform(-3, 3, size=u.shape + (3,))
    lhs = pullback(u * v, phi, "nearest")
    assert np.array_equal(lhs, pullback(u, phi, "nearest") * pullback(v, phi, "nearest"))


# -- forward -------------------------------------------------------------------

def test_forward_identity_components(rng):
    a = rng.standard_normal((6, 6, 6))
    p = ForwardParams(alpha=(0, 10, 0, 1), gamma=(0, 0, 0), beta=(1, 0))
    assert np.array_equal(forward(a, "x", p, identity_map(a.shape)), a)
    assert np.array_equal(forward(a, "z", p), a)


def test_forward_constant_anatomy():
    p = ForwardParams(alpha=(1, 10, 0, 0), gamma=(0, 0, 0), beta=(1, 0))
    out = forward(np.full((20, 4, 4), 2.0), "x", p)
    x = np.arange(20)
    assert np.allclose(out[:, 1, 2], 2.0 * np.abs(np.cos(2 * np.pi * x / 10)), atol=1e-14)


@pytest.mark.parametrize("o", ["x", "y", "z"])
def test_forward_matches_independent_composition(rng, o):
    a = rng.uniform(0, 1, (16, 16, 16))
    alpha, gamma, beta = (0.8, 5.3, -0.7, 0.2), (0.6, 1.1, 2.3), (0.85, 0.05)
    phi = smooth_map(rng, a.shape)
    got = forward(a, o, ForwardParams(alpha, gamma, beta), phi)
    assert rel_err(got, straight_line_forward(a, o, alpha, gamma, beta, phi)) <= 1e-6


def test_psf_frame_layout():
    assert psf_frame("x") == (0, 1, 2)
    assert psf_frame("y") == (1, 0, 2)
    assert psf_frame("z") == (2, 0, 1)
    assert psf_frame("x", slice_axis=1) == (0, 2, 1)
    with pytest.raises(ValueError):
        psf_frame("y", slice_axis=1)


@pytest.mark.parametrize("o", ["x", "y", "z"])
def test_forward_adjoint(rng, o):
    p = ForwardParams((0.9, 6.0, 0.3, 0.1), (0.5, 1.2, 2.0), (0.9, 0.1))
    phi = smooth_map(rng, (12, 12, 12))
    x = rng.standard_normal((12, 12, 12))
    y = rng.standard_normal((12, 12, 12))
    lhs = np.sum(forward(x, o, p, phi) * y)
    rhs = np.sum(x * forward_adjoint(y, o, p, phi))
    assert abs(lhs - rhs) <= 1e-6 * abs(lhs)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_forward_lipschitz_in_anatomy(seed):
    rng = np.random.default_rng(seed)
    p = ForwardParams((0.8, 7.0, 0.4, 0.2), tuple(rng.uniform(0, 2, 3)), (0.9, 0.05))
    a1, a2 = rng.standard_normal((2, 8, 8, 8))
    bound = np.max(faded_tag((8, 8, 8), "y", p)) * np.linalg.norm(a1 - a2)
    assert np.linalg.norm(forward(a1, "y", p) - forward(a2, "y", p)) <= bound + 1e-6


# -- residual loss -------------------------------------------------------------

def test_residual_loss_examples(rng):
    a = rng.uniform(0, 1, (8, 8, 8))
    p = ForwardParams((0.8, 6.0, 0.0, 0.2), (0.4, 1.0, 1.5), (1.0, 0.0))
    g = {o: forward(a, o, p) for o in "xyz"}
    assert residual_loss(a, p, g) <= 1e-10
    g2 = dict(g, y=g["y"] + 0.1)
    assert residual_loss(a, p, g2) == pytest.approx(0.01 * a.size, rel=1e-10)
    d = {o: rng.standard_normal(a.shape) for o in "xyz"}
    g3 = {o: g[o] + d[o] for o in "xyz"}
    assert residual_loss(a, p, g3) == pytest.approx(sum(np.sum(v ** 2) for v in d.values()), rel=1e-10)
    assert total_residual_loss(a, [p, p], [g, g3], [None, None]) == pytest.approx(residual_loss(a, p, g3))


def test_residual_loss_missing_orientation(rng):
    a = rng.uniform(0, 1, (6, 6, 6))
    with pytest.raises(ValueError, match="missing"):
        residual_loss(a, ForwardParams(), {"x": a, "y": a})
