"""Classical solver tests: forward-model inversion, degeneracy handling,
and the renderer/solver round trip."""

import numpy as np
import pytest

from pstransformer import classic, synthdata as sd
from pstransformer.classic import LightMatrix, solve_map, woodham_solve
from pstransformer.errors import DegenerateLightingError, ShapeError
from pstransformer.objective import mean_angular_error
from pstransformer.samples import LightSet, PhotoSample


def _random_lights(m, seed, min_z=0.3):
    return sd.sample_lights(m, min_z=min_z, rng=np.random.default_rng(seed)).directions.astype(np.float64)


# ---------------------------------------------------------------------------
# woodham_solve


def test_axis_aligned_lights():
    L = np.eye(3)
    normal, albedo = woodham_solve(np.array([0.0, 0.0, 1.0]), L)
    np.testing.assert_allclose(normal, [0.0, 0.0, 1.0], atol=1e-12)
    assert albedo == pytest.approx(1.0)


def test_forward_model_inversion():
    rng = np.random.default_rng(0)
    L = _random_lights(10, seed=1)
    n = rng.normal(size=3)
    n[2] = abs(n[2]) + 0.5
    n /= np.linalg.norm(n)
    rho = 0.7
    i = rho * (L @ n)
    assert i.min() > 0, "test setup must be shadow-free"
    got_n, got_rho = woodham_solve(i, L)
    np.testing.assert_allclose(got_n, n, atol=1e-6)
    assert got_rho == pytest.approx(rho, abs=1e-6)


def test_attached_shadow_biases_the_solution():
    L = _random_lights(8, seed=2, min_z=0.05)
    n = np.array([0.9, 0.0, np.sqrt(1 - 0.81)])
    i = 0.8 * (L @ n)
    assert (i < 0).any(), "need at least one light below the local horizon"
    clamped = np.maximum(i, 0.0)
    got_n, _ = woodham_solve(clamped, L)
    angle = np.degrees(np.arccos(np.clip(got_n @ n, -1, 1)))
    assert angle > 0.5  # the clamp visibly bends the estimate
    residual = np.linalg.norm(L @ (got_n * np.linalg.norm(np.linalg.lstsq(L, clamped, rcond=None)[0])) - clamped)
    assert residual > 1e-6


def test_intensity_scaling_homogeneity():
    L = _random_lights(6, seed=3)
    n = np.array([0.2, -0.3, 0.93])
    n /= np.linalg.norm(n)
    i = 0.5 * (L @ n)
    n1, rho1 = woodham_solve(i, L)
    n2, rho2 = woodham_solve(3.0 * i, L)
    np.testing.assert_allclose(n1, n2, atol=1e-6)
    assert rho2 == pytest.approx(3.0 * rho1, rel=1e-6)


def test_zero_intensity_fallback():
    L = _random_lights(5, seed=4)
    normal, albedo = woodham_solve(np.zeros(5), L)
    np.testing.assert_allclose(normal, [0.0, 0.0, 1.0])
    assert albedo == 0.0


def test_too_few_lights_rejected():
    with pytest.raises(DegenerateLightingError):
        woodham_solve(np.ones(2), np.array([[0.0, 0.0, 1.0], [0.0, 1.0, 0.0]]))


def test_colinear_lights_rejected_with_condition_number():
    L = np.tile(np.array([[0.0, 0.0, 1.0]]), (3, 1))
    with pytest.raises(DegenerateLightingError) as exc:
        woodham_solve(np.ones(3), L)
    assert exc.value.condition_number > classic.COND_LIMIT or not np.isfinite(
        exc.value.condition_number
    )


def test_intensity_count_must_match():
    with pytest.raises(ShapeError):
        woodham_solve(np.ones(4), np.eye(3))


def test_light_matrix_condition_number():
    lm = LightMatrix(np.eye(3))
    assert lm.condition_number == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# solve_map


def _shadow_free_sphere(seed=0, m=10):
    lights = sd.sample_lights(m, min_z=0.7, rng=np.random.default_rng(seed))
    spec = sd.SceneSpec(kind="sphere", height=32, width=32, seed=seed, min_nz=0.75)
    return sd.render_sample(spec, lights)


def test_sphere_round_trip_under_half_degree():
    sample = _shadow_free_sphere(seed=5)
    assert LightMatrix(sample.lights.directions).condition_number < 100
    nm = solve_map(sample)
    assert mean_angular_error(nm.normals, sample.normals, sample.mask) < 0.5


def test_albedo_recovery_at_fully_lit_pixels():
    sample = _shadow_free_sphere(seed=6)
    nm, albedo = solve_map(sample, with_albedo=True)
    inside = sample.mask > 0
    # reconstruct the albedo the renderer used: I = rho * (n . l)
    ndl = np.einsum("hwk,mk->mhw", sample.normals.astype(np.float64), sample.lights.directions.astype(np.float64))
    lit = inside & (ndl > 1e-6).all(axis=0)
    intensity = sample.images.astype(np.float64).mean(axis=-1)
    rho_true = intensity[:, lit] / ndl[:, lit]
    np.testing.assert_allclose(albedo[lit], rho_true.mean(axis=0), atol=1e-6)


def test_plane_facing_camera():
    m = 8
    lights = sd.sample_lights(m, min_z=0.5, rng=np.random.default_rng(7))
    h = w = 6
    normals = np.zeros((h, w, 3), dtype=np.float32)
    normals[..., 2] = 1.0
    shade = lights.directions[:, 2].astype(np.float32)
    images = np.broadcast_to(shade[:, None, None, None], (m, h, w, 1)).copy()
    sample = PhotoSample(images, lights, np.ones((h, w), dtype=np.float32), normals)
    nm = solve_map(sample)
    np.testing.assert_allclose(nm.normals[..., 2], 1.0, atol=1e-5)
    np.testing.assert_allclose(nm.normals[..., :2], 0.0, atol=1e-5)


def test_solve_map_outside_mask_is_zero():
    sample = _shadow_free_sphere(seed=8)
    nm = solve_map(sample)
    outside = sample.mask == 0
    assert np.all(nm.normals[outside] == 0)


def test_solve_map_rejects_colinear_lights():
    base = _shadow_free_sphere(seed=9)
    dirs = np.tile(np.array([[0.0, 0.0, 1.0]], dtype=np.float32), (3, 1))
    bad = PhotoSample(base.images[:3], LightSet(dirs), base.mask, base.normals)
    with pytest.raises(DegenerateLightingError):
        solve_map(bad)
