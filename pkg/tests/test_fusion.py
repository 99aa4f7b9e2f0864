import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bvqi.fusion import (
    DegenerateStatsError,
    IndexBundle,
    NormStats,
    aggregate_variant,
    align_components,
    bvqi,
    compute_norm_stats,
    normalize_mode,
    rescale,
    zscore,
)


def sigmoid_oracle(x):
    return 1.0 / (1.0 + math.exp(-x))


@pytest.mark.parametrize(
    "raw, expect",
    [(3.0, 0.5), (1.0, sigmoid_oracle(1.0)), (5.0, sigmoid_oracle(-1.0)), (-1.0, sigmoid_oracle(2.0))],
)
def test_rescale_closed_forms(raw, expect):
    s = NormStats("niqe", 3.0, 2.0)
    assert rescale(raw, s) == pytest.approx(expect, abs=1e-12)


def test_rescale_known_values():
    s = NormStats("tpqi", 0.0, 1.0)
    assert rescale(-1.0, s) == pytest.approx(0.7310585786, abs=1e-9)
    assert rescale(1.0, s) == pytest.approx(0.2689414214, abs=1e-9)
    assert rescale(-2.0, s) == pytest.approx(0.8807970780, abs=1e-9)


def test_population_std():
    s = compute_norm_stats([0.0, 2.0], "niqe")
    assert (s.mean, s.std) == (1.0, 1.0)


@pytest.mark.parametrize("vals", [[5.0, 5.0, 5.0], [1.0]])
def test_degenerate_stats(vals):
    with pytest.raises(DegenerateStatsError):
        compute_norm_stats(vals, "niqe")


def test_stats_validation():
    with pytest.raises(DegenerateStatsError):
        NormStats("niqe", 0.0, 0.0)
    with pytest.raises(DegenerateStatsError):
        NormStats("niqe", float("nan"), 1.0)
    with pytest.raises(ValueError):
        NormStats("niqe", 0.0, 1.0, source="somewhere")


def test_stats_roundtrip(tmp_path):
    s = NormStats("tpqi", -1.25, 0.5, "frozen_corpus")
    p = s.save(tmp_path / "t.json", note="x")
    assert NormStats.load(p) == s


def test_rescale_vectorized():
    s = NormStats("niqe", 0.0, 1.0)
    out = rescale(np.array([0.0, 0.0]), s)
    np.testing.assert_allclose(out, [0.5, 0.5])


def test_bvqi_sum():
    assert bvqi(0.5, 0.5, 0.5) == 1.5


def test_aggregate_modes():
    assert aggregate_variant(0.5, 0.5, 0.5, "sigmoid-mult") == pytest.approx(0.125)
    assert aggregate_variant(0.5, 0.5, 0.5, "sigmoid") == pytest.approx(1.5)
    with pytest.raises(ValueError):
        normalize_mode("geometric")


def test_align_direct_passes_raw_values():
    assert align_components(0.3, [4.0, 6.0], -2.0, "direct") == (0.3, -5.0, 2.0)


def test_align_requires_stats():
    with pytest.raises(ValueError):
        align_components(0.3, [4.0], -2.0, "sigmoid")


def test_align_linear_and_sigmoid():
    stats = {
        "semantic": NormStats("semantic", 0.0, 2.0),
        "niqe": NormStats("niqe", 4.0, 1.0),
        "tpqi": NormStats("tpqi", 0.0, 1.0),
    }
    lin = align_components(1.0, [5.0, 5.0], -1.0, "linear", stats)
    assert lin == pytest.approx((0.5, -1.0, 1.0))
    sig = align_components(0.0, [4.0], 0.0, "sigmoid-addition", stats)
    assert sig == pytest.approx((0.5, 0.5, 0.5))


def test_bundle_dict():
    b = IndexBundle("v", 0.1, 0.2, 0.3, 0.6)
    assert b.to_dict()["q_unified"] == 0.6


finite = st.floats(-1e3, 1e3, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(st.lists(finite, min_size=3, max_size=50, unique=True), finite, st.floats(0.1, 100))
def test_affine_invariance(raw, shift, scale):
    raw = np.array(raw)
    before = rescale(raw, compute_norm_stats(raw, "niqe"))
    moved = scale * raw + shift
    after = rescale(moved, compute_norm_stats(moved, "niqe"))
    np.testing.assert_allclose(after, before, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(0.01, 10))
def test_rescale_is_decreasing_and_symmetric(a, mean, std):
    s = NormStats("tpqi", mean, std)
    assert rescale(mean + a, s) + rescale(mean - a, s) == pytest.approx(1.0, abs=1e-12)
    assert 0.0 <= rescale(mean + a, s) <= 1.0
    z = zscore(mean + a, s)
    assert z == pytest.approx(a / std, abs=1e-9)


@given(st.permutations([0.1, 0.4, 0.9]))
def test_sum_is_order_free(p):
    assert bvqi(*p) == pytest.approx(1.4, abs=1e-15)
