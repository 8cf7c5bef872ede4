import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tend.distortions import (
    TRAIN_KINDS,
    VAL_KINDS,
    DistortionSpec,
    Family,
    Kind,
    bilinear_sample,
    distort,
    generate_validation_set,
    sample_train_spec,
    sample_val_spec,
    source_coordinates,
)
from tend.errors import ConfigurationError, ParameterError
from tend.samples import ImageSample, Label, Split

from conftest import natural_image


def sample(px, label=Label.ID, sid="s"):
    return ImageSample(np.asarray(px, dtype=np.float32), label, sid)


def test_families():
    assert all(k.family is Family.TRAIN_SET for k in TRAIN_KINDS)
    assert all(k.family is Family.VAL_SET for k in VAL_KINDS)
    assert set(TRAIN_KINDS) | set(VAL_KINDS) == set(Kind)


def test_affine_identity_is_exact(test_image):
    out = distort(test_image, DistortionSpec(Kind.AFFINE, {"matrix": (1, 0, 0, 1, 0, 0)}))
    assert np.array_equal(out.pixels, test_image.pixels)
    assert out.label is Label.OOD


def test_barrel_unit_polynomial_is_exact(test_image):
    out = distort(test_image, DistortionSpec(Kind.BARREL, {"a": 0, "b": 0, "c": 0, "d": 1}))
    assert np.array_equal(out.pixels, test_image.pixels)


@pytest.mark.parametrize("kind", TRAIN_KINDS)
def test_constant_image_stays_constant_away_from_border(kind):
    side, value = 48, 0.6
    img = sample(np.full((side, side, 1), value))
    spec = DistortionSpec.default(kind)
    out = distort(img, spec).pixels[..., 0]
    sx, sy = source_coordinates(spec, side, side)
    interior = np.isfinite(sx) & (sx >= 0) & (sx <= side - 1) & (sy >= 0) & (sy <= side - 1)
    assert interior.mean() > 0.2
    np.testing.assert_allclose(out[interior], value, atol=1e-6)
    # virtual pixels read black
    outside = ~np.isfinite(sx) | (sx < -1) | (sx > side) | (sy < -1) | (sy > side)
    assert np.all(out[outside] == 0.0)


def test_polar_constant_image_is_constant():
    img = sample(np.full((32, 32, 3), 0.25))
    out = distort(img, DistortionSpec.default(Kind.POLAR))
    np.testing.assert_allclose(out.pixels, 0.25, atol=1e-6)


@pytest.mark.parametrize("kind", TRAIN_KINDS)
def test_training_warps_are_not_trivial(kind, test_image):
    out = distort(test_image, DistortionSpec.default(kind))
    assert np.abs(out.pixels - test_image.pixels).mean() > 0.01


def test_noise_moments_on_mid_gray():
    side, sigma = 64, 0.1
    img = sample(np.full((side, side, 3), 0.5))
    out = distort(img, DistortionSpec(Kind.NOISE, {"sigma": sigma}, seed=7)).pixels
    n = out.size
    delta = out.astype(np.float64) - 0.5
    assert abs(delta.mean()) < 3 * sigma / math.sqrt(n)
    # sample std of a Gaussian has standard error ~ sigma / sqrt(2n)
    assert abs(delta.std() - sigma) < 3 * sigma / math.sqrt(2 * n)


def test_noise_on_zero_image_matches_rectified_gaussian():
    # clamping at 0 keeps max(0, X), X ~ N(0, s^2): mean s/sqrt(2 pi), var s^2 (1/2 - 1/(2 pi))
    side, sigma = 64, 0.1
    img = sample(np.zeros((side, side, 3)))
    out = distort(img, DistortionSpec(Kind.NOISE, {"sigma": sigma}, seed=7)).pixels.astype(np.float64)
    assert out.min() >= 0.0 and out.max() <= 1.0
    mean = sigma / math.sqrt(2 * math.pi)
    sd = sigma * math.sqrt(0.5 - 1 / (2 * math.pi))
    assert abs(out.mean() - mean) < 3 * sd / math.sqrt(out.size)


def test_blur_reduces_variance_on_checkerboard():
    ys, xs = np.mgrid[0:32, 0:32]
    board = (((ys // 4) + (xs // 4)) % 2).astype(np.float32)[..., None]
    val = generate_validation_set([sample(board)], Kind.GAUSSIAN_BLUR)
    assert val[0].pixels.var() < board.var()


def test_random_cut_blacks_out_a_rectangle():
    img = sample(np.ones((40, 40, 1)))
    out = distort(img, DistortionSpec(Kind.RANDOM_CUT, {"area": 0.2}, seed=3)).pixels[..., 0]
    zero = out == 0
    assert 0.1 <= zero.mean() <= 0.3
    rows, cols = np.where(zero)
    assert zero[rows.min():rows.max() + 1, cols.min():cols.max() + 1].all()


def test_crop_resize_of_constant_is_constant():
    img = sample(np.full((32, 32, 1), 0.3))
    out = distort(img, DistortionSpec(Kind.RANDOM_CROP_RESIZE, {"scale": 0.6}, seed=1))
    np.testing.assert_allclose(out.pixels, 0.3, atol=1e-6)


def test_degenerate_parameters_raise(test_image):
    with pytest.raises(ParameterError):
        distort(test_image, DistortionSpec(Kind.RANDOM_CROP_RESIZE, {"scale": 0.0}))
    with pytest.raises(ParameterError):
        distort(test_image, DistortionSpec(Kind.AFFINE, {"matrix": (0, 0, 0, 0, 0, 0)}))
    with pytest.raises(ParameterError):
        distort(test_image, DistortionSpec(Kind.ARC, {"angle": 0}))
    with pytest.raises(ParameterError):
        distort(test_image, DistortionSpec(Kind.TILE, {"k": 0}))


def test_unknown_kind_and_params():
    with pytest.raises(ConfigurationError):
        DistortionSpec("swirl")
    with pytest.raises(ConfigurationError):
        DistortionSpec(Kind.NOISE, {"amount": 3})


def test_bilinear_integer_positions_are_exact():
    img = np.random.default_rng(0).random((5, 6, 2))
    ys, xs = np.mgrid[0:5, 0:6].astype(float)
    assert np.array_equal(bilinear_sample(img, xs, ys), img)
    half = bilinear_sample(img, np.array([[0.5]]), np.array([[0.0]]))
    np.testing.assert_allclose(half[0, 0], (img[0, 0] + img[0, 1]) / 2)


# ---------------------------------------------------------------- sampling


def test_sample_train_spec_is_deterministic():
    assert sample_train_spec(42) == sample_train_spec(42)
    a, b = sample_train_spec(0), sample_train_spec(1)
    assert (a.kind, a.params) != (b.kind, b.params)


def test_sample_train_spec_kind_balance():
    counts = Counter(sample_train_spec(seed).kind for seed in range(6000))
    assert set(counts) == set(TRAIN_KINDS)
    # binomial(6000, 1/6): mean 1000, sd ~28.9; 3 sd bound is well inside [800, 1200]
    assert all(800 <= c <= 1200 for c in counts.values()), counts


def test_sampled_params_within_documented_ranges():
    for seed in range(300):
        spec = sample_train_spec(seed)
        p = spec.params
        if spec.kind is Kind.BARREL:
            assert all(0 <= p[k] <= 0.3 for k in "abc")
            assert p["d"] == pytest.approx(1 - p["a"] - p["b"] - p["c"])
        elif spec.kind is Kind.PERSPECTIVE:
            assert max(abs(v) for v in p["offsets"]) <= 0.25
        elif spec.kind is Kind.ARC:
            assert 45 <= p["angle"] <= 120
    for kind, key, lo, hi in [(Kind.NOISE, "sigma", 0.05, 0.2), (Kind.GAUSSIAN_BLUR, "sigma", 2, 5),
                              (Kind.RANDOM_CUT, "area", 0.1, 0.3), (Kind.RANDOM_CROP_RESIZE, "scale", 0.5, 0.8)]:
        for seed in range(50):
            assert lo <= sample_val_spec(kind, seed).params[key] <= hi


def test_validation_set_shape_and_labels():
    assert generate_validation_set([], Kind.NOISE) == []
    data = [sample(natural_image(32), sid=f"x{i}") for i in range(5)]
    out = generate_validation_set(data, Kind.RANDOM_CUT, seed=1)
    assert len(out) == 5
    assert all(s.label is Label.OOD and s.split is Split.VAL_GENERATED for s in out)
    assert [s.source_id for s in out] == [f"random_cut:x{i}" for i in range(5)]
    again = generate_validation_set(data, Kind.RANDOM_CUT, seed=1)
    assert all(np.array_equal(a.pixels, b.pixels) for a, b in zip(out, again))


def test_validation_set_rejects_training_kind_and_non_id():
    with pytest.raises(ParameterError):
        generate_validation_set([sample(natural_image(32))], Kind.BARREL)
    with pytest.raises(ParameterError):
        generate_validation_set([sample(natural_image(32), label=Label.OOD)], Kind.NOISE)


# ---------------------------------------------------------------- properties


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), side=st.sampled_from([16, 24, 32]),
       channels=st.sampled_from([1, 3]), val=st.booleans())
def test_distort_invariants(seed, side, channels, val):
    rng = np.random.default_rng(seed)
    img = sample(rng.random((side, side, channels)))
    spec = sample_val_spec(VAL_KINDS[seed % 4], seed) if val else sample_train_spec(seed)
    a = distort(img, spec)
    b = distort(img, spec)
    assert a.pixels.shape == img.pixels.shape
    assert a.pixels.dtype == np.float32
    assert np.array_equal(a.pixels, b.pixels)
    assert a.pixels.min() >= 0.0 and a.pixels.max() <= 1.0
