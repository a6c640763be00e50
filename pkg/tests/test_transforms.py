import csv
from importlib import resources

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hsident.errors import DataError
from hsident.hscube import SENSOR_WAVELENGTHS_NM
from hsident.preprocess import SampleSet
from hsident.transforms import (
    XYZ_TO_LINEAR_SRGB,
    FeatureTransform,
    Mode,
    apply_pca,
    fit_pca,
    fit_transform,
    linear_rgb,
    load_color_tables,
    synthesize_rgb,
    transform_dataset,
)

from oracles import pca_by_covariance, xyz_by_summation

WL = SENSOR_WAVELENGTHS_NM


def _table_rows():
    text = resources.files("hsident").joinpath("data/cie1931_d65_5nm.csv").read_text()
    rows = [[float(v) for v in r.values()] for r in csv.DictReader(text.splitlines())]
    ref = next(r[4] for r in rows if r[0] == 560.0)
    return [[r[0], r[1], r[2], r[3], r[4] / ref] for r in rows]


# PCA


def test_five_components_on_151_dim():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(300, 151))
    model = fit_pca(x, 5)
    assert model.components.shape == (5, 151)
    assert apply_pca(model, x[0]).shape == (5,)


def test_points_on_a_line_reconstruct_exactly():
    t = np.linspace(-3, 5, 40)
    x = np.stack([1.0 + 2 * t, -0.5 + 0.5 * t], axis=1)
    model = fit_pca(x, 1)
    recon = model.inverse_transform(model.transform(x))
    np.testing.assert_allclose(recon, x, atol=1e-12)


def test_full_rank_random_matches_covariance_oracle():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(50, 6))
    model = fit_pca(x, 6)
    recon = model.inverse_transform(model.transform(x))
    np.testing.assert_allclose(recon, x, atol=1e-8)
    vals, vecs = pca_by_covariance(x, 6)
    signs = np.sign(np.sum(vecs * model.components, axis=1))
    np.testing.assert_allclose(model.components, vecs * signs[:, None], atol=1e-8)
    np.testing.assert_allclose(model.explained_variance, vals, rtol=1e-10)


def test_components_orthonormal_and_variance_sorted():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(80, 12)) @ rng.normal(size=(12, 12))
    model = fit_pca(x, 7)
    np.testing.assert_allclose(model.components @ model.components.T, np.eye(7), atol=1e-6)
    assert np.all(np.diff(model.explained_variance) <= 0)
    z = model.transform(x)
    np.testing.assert_allclose(z.var(axis=0, ddof=1), model.explained_variance, rtol=1e-6, atol=1e-9)


def test_sign_convention():
    rng = np.random.default_rng(3)
    model = fit_pca(rng.normal(size=(40, 5)), 3)
    for row in model.components:
        assert row[np.argmax(np.abs(row))] > 0


def test_reconstruction_error_non_increasing_in_k():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(60, 8)) @ rng.normal(size=(8, 8))
    errs = []
    for k in range(1, 9):
        m = fit_pca(x, k)
        errs.append(np.sum((m.inverse_transform(m.transform(x)) - x) ** 2))
    assert all(b <= a + 1e-9 for a, b in zip(errs, errs[1:]))


@pytest.mark.parametrize(
    "shape,k,msg",
    [((10, 4), 5, "cannot fit"), ((5, 8), 5, "more than"), ((3, 3), 3, "more than")],
)
def test_pca_errors(shape, k, msg):
    with pytest.raises(DataError, match=msg):
        fit_pca(np.random.default_rng(0).normal(size=shape), k)


def test_zero_variance():
    with pytest.raises(DataError, match="zero variance"):
        fit_pca(np.ones((10, 4)), 2)


def test_apply_pca_mean_and_component():
    rng = np.random.default_rng(5)
    model = fit_pca(rng.normal(size=(30, 6)), 3)
    np.testing.assert_allclose(apply_pca(model, model.mean), np.zeros(3), atol=1e-12)
    np.testing.assert_allclose(apply_pca(model, model.mean + model.components[0]), [1, 0, 0], atol=1e-12)


def test_apply_pca_matches_dense_multiply():
    rng = np.random.default_rng(6)
    model = fit_pca(rng.normal(size=(30, 6)), 4)
    s = rng.normal(size=6)
    expected = [sum(model.components[i, j] * (s[j] - model.mean[j]) for j in range(6)) for i in range(4)]
    np.testing.assert_allclose(apply_pca(model, s), expected, rtol=1e-12)


def test_apply_pca_length_mismatch():
    model = fit_pca(np.random.default_rng(0).normal(size=(20, 6)), 2)
    with pytest.raises(DataError):
        apply_pca(model, np.zeros(5))


def test_pca_model_dict_roundtrip():
    model = fit_pca(np.random.default_rng(0).normal(size=(20, 6)), 2)
    from hsident.transforms import PcaModel

    back = PcaModel.from_dict(model.to_dict())
    np.testing.assert_array_equal(back.components, model.components)
    np.testing.assert_array_equal(back.mean, model.mean)


# colour


def test_tables_loaded():
    t = load_color_tables()
    assert t.wavelengths_nm[0] == 380 and t.wavelengths_nm[-1] == 780
    assert t.cmf.shape == (81, 3)
    assert np.interp(560.0, t.wavelengths_nm, t.illuminant) == pytest.approx(1.0)
    assert np.all(np.isfinite(t.cmf))


def test_zero_spectrum_is_black():
    np.testing.assert_array_equal(synthesize_rgb(np.zeros(151), WL), [0, 0, 0])


@pytest.mark.parametrize("scale", [1.0, 0.5, 0.2])
def test_illuminant_shaped_spectrum_is_achromatic(scale):
    t = load_color_tables()
    spectrum = scale * np.interp(WL, t.wavelengths_nm, t.illuminant, left=0, right=0)
    r, g, b = synthesize_rgb(spectrum, WL)
    assert abs(r - g) < 0.02 and abs(g - b) < 0.02


def test_illuminant_maps_to_white():
    t = load_color_tables()
    spectrum = np.interp(WL, t.wavelengths_nm, t.illuminant, left=0, right=0)
    np.testing.assert_allclose(synthesize_rgb(spectrum, WL), [1, 1, 1], atol=0.01)


def test_green_pulse_matches_summation_oracle():
    spectrum = np.where(np.abs(WL - 550) <= 5, 1.0, 0.0)
    rows = _table_rows()
    xyz = xyz_by_summation(spectrum, WL, rows)
    expected_linear = XYZ_TO_LINEAR_SRGB @ xyz
    np.testing.assert_allclose(linear_rgb(spectrum, WL), expected_linear, rtol=1e-9)
    r, g, b = synthesize_rgb(spectrum, WL)
    assert g > r and g > b


def test_bands_outside_visible_ignored():
    nir = np.where(WL > 780, 5.0, 0.0) + np.where(WL < 380, 3.0, 0.0)
    np.testing.assert_array_equal(synthesize_rgb(nir, WL), [0, 0, 0])


def test_rgb_range_and_determinism():
    rng = np.random.default_rng(0)
    spectra = rng.uniform(0, 2, size=(100, 151))
    a = synthesize_rgb(spectra, WL)
    assert a.shape == (100, 3)
    assert a.min() >= 0 and a.max() <= 1
    np.testing.assert_array_equal(a, synthesize_rgb(spectra, WL))


def test_no_overlap_with_visible():
    with pytest.raises(DataError, match="overlap"):
        synthesize_rgb(np.ones(4), np.array([900.0, 950.0, 1000.0, 1050.0]))


def test_negative_spectrum_rejected():
    with pytest.raises(DataError):
        synthesize_rgb(-np.ones(151), WL)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), s=st.floats(0.01, 1.0))
def test_scaling_down_never_increases_linear_rgb(seed, s):
    spectrum = np.random.default_rng(seed).uniform(0, 1, size=151)
    full = linear_rgb(spectrum, WL)
    scaled = linear_rgb(s * spectrum, WL)
    # linear in intensity: magnitudes shrink, and in-gamut channels never grow
    assert np.all(np.abs(scaled) <= np.abs(full) + 1e-12)
    assert np.all(scaled[full >= 0] <= full[full >= 0] + 1e-12)


# dataset-level


def _samples(n=40, d=151, seed=0):
    rng = np.random.default_rng(seed)
    return SampleSet(
        rng.uniform(0, 1, size=(n, d)).astype(np.float32),
        rng.integers(0, 3, size=n),
        ["c"] * n,
        np.arange(n),
        np.zeros(n),
    )


def test_mode_hs_identity():
    s = _samples()
    out = transform_dataset(s, "hs", fit_transform("hs", s.features, WL))
    np.testing.assert_array_equal(out.features, s.features)
    np.testing.assert_array_equal(transform_dataset(s, Mode.HS, None).features, s.features)


def test_mode_pca_dimension_five():
    s = _samples()
    state = fit_transform("pca", s.features, WL)
    out = transform_dataset(s, "pca", state)
    assert out.dim == 5


def test_mode_rgb_dimension_three_in_unit_range():
    s = _samples()
    out = transform_dataset(s, "rgb", fit_transform("rgb", s.features, WL))
    assert out.dim == 3
    assert out.features.min() >= 0 and out.features.max() <= 1


@pytest.mark.parametrize("mode", ["hs", "pca", "rgb"])
def test_labels_and_provenance_preserved(mode):
    s = _samples()
    out = transform_dataset(s, mode, fit_transform(mode, s.features, WL))
    assert len(out) == len(s)
    np.testing.assert_array_equal(out.labels, s.labels)
    np.testing.assert_array_equal(out.xs, s.xs)
    assert list(out.cube_ids) == list(s.cube_ids)


def test_pca_without_fitted_state():
    s = _samples()
    with pytest.raises(DataError, match="missing fitted state"):
        transform_dataset(s, "pca", None)
    with pytest.raises(DataError, match="missing fitted state"):
        transform_dataset(s, "pca", FeatureTransform(Mode.PCA, WL, None))


def test_transform_state_dict_roundtrip():
    s = _samples()
    state = fit_transform("pca", s.features, WL)
    back = FeatureTransform.from_dict(state.to_dict())
    np.testing.assert_array_equal(back.apply(s.features), state.apply(s.features))
