import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from taginv.config import RunConfig
from taginv.fields import GridSpec, identity_map
from taginv.forward import ForwardParams, forward
from taginv.motion import jacobian_det
from taginv.phantom import (
    Ellipsoid,
    MotionSpec,
    PhantomSpec,
    SequenceSpec,
    curl,
    default_fading,
    divergence,
    divergence_free_velocity,
    make_divergence_free_motion,
    make_rng,
    random_phantom_spec,
    render_phantom,
    render_sequence,
)
from taginv.pipeline import simulate
from taginv.runio import read_volumes, write_truth

from test_forward import straight_line_forward


def brute_force_render(spec):
    """Per-voxel loop over ellipsoids, rotations from scipy's Euler convention."""
    out = np.full(spec.grid.dims, float(spec.background))
    for idx in np.ndindex(*spec.grid.dims):
        p = np.array(idx, dtype=np.float64)
        for e in spec.ellipsoids:
            R = Rotation.from_euler("ZYX", e.angles).as_matrix()
            local = R.T @ (p - np.array(e.center))
            rho = math.sqrt(sum((local[k] / e.semi_axes[k]) ** 2 for k in range(3)))
            sd = (rho - 1.0) * sum(e.semi_axes) / 3.0
            if e.softness <= 0:
                w = 1.0 if sd <= 0 else 0.0
            else:
                w = 1.0 / (1.0 + math.exp(sd / e.softness))
            out[idx] += e.intensity * w
    return np.clip(out, 0.0, 1.0)


# -- phantoms ------------------------------------------------------------------

def test_sphere_center_and_far_field():
    grid = GridSpec((21, 21, 21))
    spec = PhantomSpec(grid, [Ellipsoid((10, 10, 10), (4, 4, 4), intensity=0.7)], background=0.1)
    vol = render_phantom(spec)
    assert vol[10, 10, 10] == pytest.approx(0.8)
    assert vol[10, 10, 18] == pytest.approx(0.1)  # distance 2r


def test_disjoint_ellipsoids_add():
    grid = GridSpec((24, 12, 12))
    e1 = Ellipsoid((5, 6, 6), (3, 4, 2), (0.3, 0, 0), 0.4, 0.5)
    e2 = Ellipsoid((18, 6, 6), (3, 2, 4), (0, 0.7, 0), 0.5, 0.5)
    both = render_phantom(PhantomSpec(grid, [e1, e2]))
    one = render_phantom(PhantomSpec(grid, [e1]))
    two = render_phantom(PhantomSpec(grid, [e2]))
    assert np.allclose(both, one + two, atol=1e-12)


def test_render_matches_brute_force():
    spec = random_phantom_spec(GridSpec((12, 12, 12)), seed=4)
    spec.ellipsoids.append(Ellipsoid((6, 6, 6), (2, 3, 4), (0.4, -0.2, 1.1), 0.2, 0.0))
    assert np.allclose(render_phantom(spec), brute_force_render(spec), rtol=0, atol=1e-12)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_random_phantoms_in_unit_range(seed):
    vol = render_phantom(random_phantom_spec(GridSpec((16, 16, 16)), seed))
    assert vol.min() >= 0.0 and vol.max() <= 1.0 and vol.max() > 0.3


def test_rng_is_counter_based_and_reproducible():
    a = make_rng(5).standard_normal(100)
    assert np.array_equal(a, make_rng(5).standard_normal(100))
    assert not np.array_equal(a, make_rng(6).standard_normal(100))


# -- motion --------------------------------------------------------------------

def test_zero_potential_gives_identity():
    maps, v = make_divergence_free_motion(MotionSpec(amplitude=0.0, frames=3), (12, 12, 12))
    assert np.all(v == 0)
    for m in maps:
        assert np.array_equal(m, identity_map((12, 12, 12)))


def test_discrete_curl_is_divergence_free(rng):
    psi = rng.standard_normal((14, 14, 14, 3))
    div = divergence(curl(psi))
    assert np.max(np.abs(div[2:-2, 2:-2, 2:-2])) <= 1e-12 * np.max(np.abs(psi))
    v = divergence_free_velocity(MotionSpec(seed=3, amplitude=3.0), (32, 32, 32))
    peak = np.max(np.sqrt(np.sum(v * v, axis=-1)))
    assert peak == pytest.approx(3.0)
    assert np.max(np.abs(divergence(v))) <= 1e-6 * peak


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_final_map_is_volume_preserving(seed):
    maps, _ = make_divergence_free_motion(MotionSpec(seed=seed, amplitude=3.0, smoothness=6.0), (48, 48, 48))
    det = jacobian_det(maps[-1])
    assert 0.98 <= det.mean() <= 1.02
    assert np.count_nonzero(det <= 0) == 0


def test_frames_compose_along_the_flow():
    spec = MotionSpec(seed=2, amplitude=2.0, frames=4)
    maps, v = make_divergence_free_motion(spec, (20, 20, 20))
    disp = [np.abs(m - identity_map((20, 20, 20))).max() for m in maps]
    assert all(b > a for a, b in zip(disp[:-1], disp[1:]))
    # integrating twice as far in one go gives the same frame-2 map
    from taginv.phantom import integrate_rk4
    direct = integrate_rk4(-v, 2 / 4, 2 * spec.rk_steps)
    assert np.max(np.abs(direct - maps[1])) <= 1e-10


def test_motion_leaving_domain_is_rejected(monkeypatch):
    import taginv.phantom as ph
    drift = np.zeros((16, 16, 16, 3))
    drift[..., 0] = 20.0
    monkeypatch.setattr(ph, "divergence_free_velocity", lambda spec, dims: drift)
    with pytest.raises(ValueError, match="reduce the amplitude"):
        make_divergence_free_motion(MotionSpec(frames=2), (16, 16, 16))


# -- sequences -----------------------------------------------------------------

def test_sequence_validation_and_default_fading():
    b = default_fading(6)
    assert np.allclose(b[:, 0], [1, 0.9, 0.8, 0.7, 0.6, 0.5])
    assert np.allclose(b[:, 1], [0, 0.05, 0.1, 0.15, 0.2, 0.25])
    with pytest.raises(ValueError):
        SequenceSpec(frames=2, betas=[[0.5, 0], [0.6, 0]])
    with pytest.raises(ValueError):
        SequenceSpec(frames=3, betas=[[1, 0], [0.9, 0]])


def test_first_frame_equals_forward_model(rng):
    a = rng.uniform(0, 1, (16, 16, 16))
    seq = SequenceSpec(frames=2, alpha=(0.8, 5.0, 0.3, 0.2), gamma=(0.4, 1.0, 3.0), noise=0.0,
                       betas=[[1.0, 0.0], [0.9, 0.05]])
    meas, truth = render_sequence(a, None, seq)
    p = ForwardParams(seq.alpha, seq.gamma, (1.0, 0.0))
    for o in "xyz":
        assert np.array_equal(meas[0][o], forward(a, o, p))
        ref = straight_line_forward(a, o, seq.alpha, seq.gamma, (1.0, 0.0), identity_map(a.shape))
        assert np.max(np.abs(meas[0][o] - ref)) <= 1e-6 * np.max(np.abs(ref))
    assert np.array_equal(truth.cines[0], a)


def test_fading_erases_harmonic_peaks():
    grid = GridSpec((48, 48, 48))
    a = render_phantom(random_phantom_spec(grid, 1))
    betas = np.stack([np.linspace(1, 0, 6), np.linspace(0, 0.5, 6)], axis=-1)
    seq = SequenceSpec(frames=6, alpha=(0.8, 8.0, 0.0, 0.2), gamma=(0.4, 1.0, 3.0), betas=betas)
    meas, _ = render_sequence(a, None, seq)
    bin_ = 48 // 8
    first = np.abs(np.fft.fftn(meas[0]["x"]))[bin_, 0, 0]
    last = np.abs(np.fft.fftn(meas[-1]["x"]))[bin_, 0, 0]
    assert last <= 0.1 * first


def test_noise_is_seeded(rng):
    a = rng.uniform(0, 1, (8, 8, 8))
    seq = SequenceSpec(frames=2, noise=0.01)
    m1, t1 = render_sequence(a, None, seq, seed=9)
    m2, _ = render_sequence(a, None, seq, seed=9)
    m3, _ = render_sequence(a, None, seq, seed=10)
    assert all(np.array_equal(m1[t][o], m2[t][o]) for t in range(2) for o in "xyz")
    assert not np.array_equal(m1[1]["y"], m3[1]["y"])
    clean, _ = render_sequence(a, None, SequenceSpec(frames=2))
    resid = np.concatenate([(m1[t][o] - clean[t][o]).ravel() for t in range(2) for o in "xyz"])
    assert resid.std() == pytest.approx(t1.noise_std, rel=0.05)


@pytest.fixture(scope="module")
def default_instance():
    return simulate(RunConfig())


def test_default_measurements_within_sanity_bounds(default_instance):
    meas, truth, temps = default_instance
    vals = np.concatenate([m.ravel() for frame in meas for m in frame.values()])
    assert vals.min() >= -0.5 and vals.max() <= 1.8
    assert len(meas) == 6 and temps.shape == (8, 48, 48, 48)
    for m in truth.maps:
        assert np.count_nonzero(jacobian_det(m) <= 0) == 0


def test_truth_bundle_round_trips(tmp_path, default_instance):
    _, truth, _ = default_instance
    write_truth(tmp_path, truth)
    back = read_volumes(tmp_path / "truth")
    assert np.array_equal(back.anatomy, truth.anatomy.astype(np.float32))
    for t in range(6):
        assert np.array_equal(back.cines[t], truth.cines[t].astype(np.float32))
        assert np.array_equal(back.maps[t], truth.maps[t].astype(np.float32))
    assert np.array_equal(back.betas, truth.betas)
    assert np.array_equal(back.gamma, truth.gamma) and np.array_equal(back.alpha, truth.alpha)
