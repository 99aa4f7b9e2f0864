import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage
from scipy.stats import ortho_group

from bvqi.fusion import NormStats
from bvqi.temporal import (
    CURVATURE_FLOOR,
    Domain,
    InsufficientFramesError,
    PerceptualTrajectory,
    curvature_series,
    gabor_energies,
    gabor_pair,
    lgn_response,
    temporal_naturalness,
    tpqi_from_curvatures,
    tpqi_raw,
    trajectory_curvature,
    v1_response,
)

from conftest import GOLDEN

vec = st.lists(st.floats(-100, 100, allow_nan=False), min_size=4, max_size=4)


def test_constant_frame_zero_responses():
    f = np.full((40, 50), 0.3)
    np.testing.assert_allclose(lgn_response(f), 0, atol=1e-12)
    np.testing.assert_allclose(v1_response(f), 0, atol=1e-9)


def test_identical_frames_identical_responses(rng):
    f = rng.random((30, 40))
    np.testing.assert_array_equal(lgn_response(f), lgn_response(f.copy()))
    np.testing.assert_array_equal(v1_response(f), v1_response(f.copy()))


def test_response_dimensions(rng):
    f = rng.random((30, 40, 3))
    assert lgn_response(f).shape == (1200,)
    assert v1_response(f).shape == (8 * 1200,)


def test_vertical_grating_channel():
    x = np.arange(128)
    grating = np.tile(0.5 + 0.4 * np.cos(2 * np.pi * x / 4.0), (128, 1))
    energy = gabor_energies(grating)[:, 32:-32, 32:-32].sum(axis=(1, 2))
    others = np.delete(energy, 0)
    assert energy[0] >= 2 * others.max()


def test_gabor_fft_matches_direct_convolution(rng):
    f = rng.random((40, 48))
    energies = gabor_energies(f)
    k = 0
    for lam in (4.0, 8.0):
        for theta in (0.0, 45.0, 90.0, 135.0):
            even, odd = gabor_pair(theta, lam)
            re = ndimage.convolve(f, even, mode="mirror")
            im = ndimage.convolve(f, odd, mode="mirror")
            np.testing.assert_allclose(energies[k], np.hypot(re, im), atol=1e-9)
            k += 1


def test_gabor_even_kernel_zero_mean():
    for lam in (4.0, 8.0):
        for theta in (0.0, 45.0, 90.0, 135.0):
            even, odd = gabor_pair(theta, lam)
            assert abs(even.sum()) < 1e-10
            assert abs(odd.sum()) < 1e-10


def test_lgn_is_dog_over_energy(rng):
    f = rng.random((32, 32))
    dog = ndimage.gaussian_filter(f, 1) - ndimage.gaussian_filter(f, 2)
    expect = dog / (np.sqrt(ndimage.gaussian_filter(dog**2, 2)) + 0.1)
    np.testing.assert_allclose(lgn_response(f), expect.ravel(), atol=1e-12)


def test_golden_responses():
    g = np.load(GOLDEN / "temporal.npz")
    frame = g["clip"][0]
    assert np.linalg.norm(lgn_response(frame)) == pytest.approx(float(g["lgn_norm"]), abs=1e-5)
    np.testing.assert_allclose(v1_response(frame), g["v1"], rtol=1e-5, atol=1e-5)
    assert tpqi_raw(g["clip"]) == pytest.approx(float(g["tpqi"]), abs=1e-6)


def test_curvature_oracles():
    a = np.array([0.0, 0.0])
    assert trajectory_curvature(a, [1, 0], [2, 0]) == pytest.approx(0, abs=1e-9)
    assert trajectory_curvature(a, [1, 0], [1, 1]) == pytest.approx(math.pi / 2, abs=1e-9)
    assert trajectory_curvature(a, [1, 0], a) == pytest.approx(math.pi, abs=1e-9)


def test_curvature_zero_displacement():
    assert trajectory_curvature([1, 2], [1, 2], [3, 4]) == 0.0
    assert trajectory_curvature([1, 2], [3, 4], [3, 4]) == 0.0


def test_curvature_dimension_mismatch():
    with pytest.raises(ValueError):
        trajectory_curvature([0, 0], [1, 1], [1, 2, 3])


@given(vec, vec, vec, st.floats(1e-3, 1e3))
def test_curvature_scale_invariant(a, b, c, k):
    a, b, c = map(np.array, (a, b, c))
    base = trajectory_curvature(a, b, c)
    assert trajectory_curvature(k * a, k * b, k * c) == pytest.approx(base, abs=1e-9)
    assert 0 <= base <= math.pi


@given(vec, vec, vec, st.integers(0, 2**31))
@settings(max_examples=50)
def test_curvature_orthogonal_invariant(a, b, c, seed):
    a, b, c = map(np.array, (a, b, c))
    if min(np.linalg.norm(b - a), np.linalg.norm(c - b)) < 1e-3:
        return
    q = ortho_group.rvs(4, random_state=seed)
    assert trajectory_curvature(q @ a, q @ b, q @ c) == pytest.approx(trajectory_curvature(a, b, c), abs=1e-7)


def test_static_video_floor():
    clip = np.repeat(np.random.default_rng(0).random((1, 40, 40)), 5, axis=0)
    assert tpqi_raw(clip) == pytest.approx(math.log(1e-8), abs=1e-12)
    assert tpqi_raw(clip) == pytest.approx(-18.420680743952367)


def test_unit_curvature_gives_zero():
    assert tpqi_from_curvatures(1.0, 1.0) == 0.0


@given(st.floats(0, math.pi), st.floats(0, math.pi))
def test_static_is_minimum(v1, lgn):
    assert tpqi_from_curvatures(v1, lgn) >= math.log(CURVATURE_FLOOR)


def test_insufficient_frames():
    with pytest.raises(InsufficientFramesError):
        tpqi_raw(np.zeros((2, 40, 40)))


def test_streaming_matches_trajectories(rng):
    clip = rng.random((6, 24, 32))
    v1 = PerceptualTrajectory(Domain.V1, [v1_response(f) for f in clip]).curvatures().mean()
    lgn = PerceptualTrajectory(Domain.LGN, [lgn_response(f) for f in clip]).curvatures().mean()
    assert tpqi_raw(iter(clip)) == pytest.approx(0.5 * math.log(v1) + 0.5 * math.log(lgn), abs=1e-12)


def test_response_scale_leaves_tpqi(rng):
    x = rng.normal(size=(6, 10))
    np.testing.assert_allclose(curvature_series(3.5 * x), curvature_series(x), atol=1e-9)


def test_temporal_naturalness_closed_forms():
    s = NormStats("tpqi", -2.0, 0.5)
    assert temporal_naturalness(-2.0, s) == 0.5
    assert temporal_naturalness(-1.5, s) == pytest.approx(1 / (1 + math.e), abs=1e-12)
    assert temporal_naturalness(-3.0, s) == pytest.approx(1 / (1 + math.exp(-2)), abs=1e-12)


def test_jitter_raises_curvature():
    from helpers import degraded_clip

    smooth = degraded_clip(0, frames=8, size=(160, 120))
    shaky = degraded_clip(6, frames=8, size=(160, 120))
    assert tpqi_raw(shaky) > tpqi_raw(smooth)


@given(vec, vec, vec)
def test_curvature_matches_arccos_definition(a, b, c):
    a, b, c = map(np.array, (a, b, c))
    v1, v2 = b - a, c - b
    n1, n2 = np.linalg.norm(v1), np.linalg.norm(v2)
    if n1 < 1e-6 or n2 < 1e-6:
        return
    expect = math.acos(max(-1.0, min(1.0, float(v1 @ v2) / (n1 * n2))))
    assert trajectory_curvature(a, b, c) == pytest.approx(expect, abs=1e-6)
