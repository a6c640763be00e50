"""Input representations: full spectrum, PCA compression and synthesized sRGB."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources
from typing import Any

import numpy as np

from .errors import ConfigError, DataError
from .preprocess import SampleSet

__all__ = [
    "Mode",
    "PcaModel",
    "fit_pca",
    "apply_pca",
    "ColorTables",
    "load_color_tables",
    "spectrum_to_xyz_matrix",
    "linear_rgb",
    "srgb_encode",
    "synthesize_rgb",
    "luminance",
    "FeatureTransform",
    "fit_transform",
    "transform_dataset",
    "PCA_COMPONENTS",
]

PCA_COMPONENTS = 5
VISIBLE_RANGE_NM = (380.0, 780.0)

# XYZ (D65) -> linear sRGB, IEC 61966-2-1
XYZ_TO_LINEAR_SRGB = np.array(
    [
        [3.2404542, -1.5371385, -0.4985314],
        [-0.9692660, 1.8760108, 0.0415560],
        [0.0556434, -0.2040259, 1.0572252],
    ]
)


class Mode(str, Enum):
    HS = "hs"
    PCA = "pca"
    RGB = "rgb"

    @classmethod
    def parse(cls, value: str | Mode) -> Mode:
        try:
            return cls(str(value.value if isinstance(value, Mode) else value).lower())
        except ValueError:
            raise ConfigError(f"unknown mode {value!r}; expected one of hs, pca, rgb") from None


# --------------------------------------------------------------------------
# PCA


@dataclass(eq=False)
class PcaModel:
    """Mean, orthonormal component rows (k x B) and their variances."""

    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray

    @property
    def n_components(self) -> int:
        return int(self.components.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.components.shape[1])

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.n_features:
            raise DataError(f"sample length {x.shape[-1]} does not match PCA input {self.n_features}")
        return (x - self.mean) @ self.components.T

    def inverse_transform(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) @ self.components + self.mean

    def to_dict(self) -> dict[str, Any]:
        return {
            "mean": self.mean.tolist(),
            "components": self.components.tolist(),
            "explained_variance": self.explained_variance.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> PcaModel:
        return cls(
            np.asarray(d["mean"], dtype=np.float64),
            np.asarray(d["components"], dtype=np.float64),
            np.asarray(d["explained_variance"], dtype=np.float64),
        )


def fit_pca(x: np.ndarray, k: int = PCA_COMPONENTS) -> PcaModel:
    """Fit a k-component PCA to the rows of ``x`` via SVD of the centred data.

    Components are ordered by decreasing variance; each row's
    largest-magnitude coefficient is made positive.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DataError(f"PCA input must be N x B, got shape {x.shape}")
    n, b = x.shape
    if isinstance(k, bool) or not isinstance(k, (int, np.integer)) or k < 1:
        raise DataError(f"number of components must be a positive integer, got {k!r}")
    if k > b:
        raise DataError(f"cannot fit {k} components to {b}-dimensional data")
    if n <= k:
        raise DataError(f"need more than {k} samples to fit {k} components, got {n}")
    mean = x.mean(axis=0)
    centred = x - mean
    if not np.any(centred):
        raise DataError("zero variance: all samples are identical")
    _, s, vt = np.linalg.svd(centred, full_matrices=False)
    components = vt[:k].copy()
    pivot = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(k), pivot])
    components *= signs[:, None]
    explained = s[:k] ** 2 / (n - 1)
    return PcaModel(mean, components, explained)


def apply_pca(model: PcaModel, sample: np.ndarray) -> np.ndarray:
    """Project one spectrum (or an N x B batch) onto the model's components."""
    return model.transform(sample)


# --------------------------------------------------------------------------
# colour


@dataclass(eq=False)
class ColorTables:
    """CIE 1931 2-degree CMFs and a reference illuminant on a common grid.

    ``illuminant`` is scaled to 1.0 at 560 nm.
    """

    wavelengths_nm: np.ndarray
    cmf: np.ndarray
    illuminant: np.ndarray
    xyz_to_rgb: np.ndarray

    def __post_init__(self) -> None:
        for name in ("wavelengths_nm", "cmf", "illuminant", "xyz_to_rgb"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise DataError(f"colour table {name} contains non-finite values")
            setattr(self, name, arr)
        if self.cmf.shape != (self.wavelengths_nm.size, 3):
            raise DataError("cmf table must be N x 3 on the wavelength grid")
        if self.illuminant.shape != self.wavelengths_nm.shape:
            raise DataError("illuminant must share the CMF wavelength grid")


def _parse_tables(text: str) -> ColorTables:
    rows = list(csv.DictReader(io.StringIO(text)))
    wl = np.array([float(r["wavelength_nm"]) for r in rows])
    cmf = np.array([[float(r["xbar"]), float(r["ybar"]), float(r["zbar"])] for r in rows])
    ill = np.array([float(r["illuminant"]) for r in rows])
    ill = ill / np.interp(560.0, wl, ill)
    return ColorTables(wl, cmf, ill, XYZ_TO_LINEAR_SRGB.copy())


@lru_cache(maxsize=1)
def load_color_tables() -> ColorTables:
    """CIE 1931 2-degree observer with D65, 380-780 nm at 5 nm (bundled CSV)."""
    text = resources.files("hsident").joinpath("data/cie1931_d65_5nm.csv").read_text(encoding="utf-8")
    return _parse_tables(text)


def _band_widths(wavelengths_nm: np.ndarray) -> np.ndarray:
    if wavelengths_nm.size == 1:
        return np.ones(1)
    return np.gradient(wavelengths_nm)


def spectrum_to_xyz_matrix(wavelengths_nm: np.ndarray, tables: ColorTables | None = None) -> np.ndarray:
    """B x 3 matrix taking a spectrum on ``wavelengths_nm`` to XYZ.

    Bands outside the table range get zero weight. Scaling is such that a
    spectrum equal to the illuminant has Y == 1.
    """
    tables = tables or load_color_tables()
    wl = np.asarray(wavelengths_nm, dtype=np.float64)
    lo, hi = tables.wavelengths_nm[0], tables.wavelengths_nm[-1]
    inside = (wl >= lo) & (wl <= hi)
    if not np.any(inside):
        raise DataError(f"wavelength grid does not overlap {lo:g}-{hi:g} nm")
    dl = _band_widths(wl) * inside
    cmf = np.stack(
        [np.interp(wl, tables.wavelengths_nm, tables.cmf[:, c]) for c in range(3)], axis=1
    )
    ill = np.interp(wl, tables.wavelengths_nm, tables.illuminant)
    weights = cmf * dl[:, None]
    white_y = float(ill @ weights[:, 1])
    return weights / white_y


def linear_rgb(
    spectra: np.ndarray, wavelengths_nm: np.ndarray, tables: ColorTables | None = None
) -> np.ndarray:
    """Unclipped linear sRGB for spectra shaped (..., B)."""
    tables = tables or load_color_tables()
    m = spectrum_to_xyz_matrix(wavelengths_nm, tables)
    xyz = np.asarray(spectra, dtype=np.float64) @ m
    return xyz @ tables.xyz_to_rgb.T


def srgb_encode(linear: np.ndarray) -> np.ndarray:
    c = np.clip(np.asarray(linear, dtype=np.float64), 0.0, 1.0)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * np.power(c, 1 / 2.4) - 0.055)


def synthesize_rgb(
    spectra: np.ndarray,
    wavelengths_nm: np.ndarray,
    tables: ColorTables | None = None,
    gain: float = 1.0,
) -> np.ndarray:
    """Gamma-encoded sRGB in [0, 1] for spectra shaped (..., B).

    Spectra are treated as radiance; ``gain`` scales them before encoding.
    """
    spectra = np.asarray(spectra, dtype=np.float64)
    if spectra.shape[-1] != np.asarray(wavelengths_nm).size:
        raise DataError(
            f"spectrum length {spectra.shape[-1]} does not match {np.asarray(wavelengths_nm).size} wavelengths"
        )
    if not np.all(np.isfinite(spectra)):
        raise DataError("spectrum contains non-finite values")
    if np.any(spectra < 0):
        raise DataError("spectrum contains negative values")
    return srgb_encode(gain * linear_rgb(spectra, wavelengths_nm, tables))


def luminance(spectra: np.ndarray, wavelengths_nm: np.ndarray, tables: ColorTables | None = None) -> np.ndarray:
    """CIE Y of spectra shaped (..., B); the illuminant itself has Y == 1."""
    m = spectrum_to_xyz_matrix(wavelengths_nm, tables)
    return np.asarray(spectra, dtype=np.float64) @ m[:, 1]


# --------------------------------------------------------------------------
# dataset-level switch


@dataclass(eq=False)
class FeatureTransform:
    """Fitted state that maps raw spectra to one of the three representations."""

    mode: Mode
    wavelengths_nm: np.ndarray
    pca: PcaModel | None = None
    rgb_gain: float = 1.0

    def __post_init__(self) -> None:
        self.mode = Mode.parse(self.mode)
        self.wavelengths_nm = np.asarray(self.wavelengths_nm, dtype=np.float64)

    @property
    def input_dim(self) -> int:
        return int(self.wavelengths_nm.size)

    @property
    def output_dim(self) -> int:
        if self.mode is Mode.HS:
            return self.input_dim
        if self.mode is Mode.RGB:
            return 3
        if self.pca is None:
            raise DataError("PCA mode requires a fitted PcaModel (missing fitted state)")
        return self.pca.n_components

    def apply(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features)
        if features.shape[-1] != self.input_dim:
            raise DataError(
                f"feature length {features.shape[-1]} does not match transform input {self.input_dim}"
            )
        if self.mode is Mode.HS:
            out = features
        elif self.mode is Mode.PCA:
            if self.pca is None:
                raise DataError("PCA mode requires a fitted PcaModel (missing fitted state)")
            out = self.pca.transform(features)
        else:
            out = synthesize_rgb(features, self.wavelengths_nm, gain=self.rgb_gain)
        return np.asarray(out, dtype=np.float32)

    def to_dict(self) -> dict[str, Any]:
        return {
            "mode": self.mode.value,
            "wavelengths_nm": self.wavelengths_nm.tolist(),
            "pca": None if self.pca is None else self.pca.to_dict(),
            "rgb_gain": self.rgb_gain,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> FeatureTransform:
        pca = None if d.get("pca") is None else PcaModel.from_dict(d["pca"])
        return cls(Mode.parse(d["mode"]), d["wavelengths_nm"], pca, float(d.get("rgb_gain", 1.0)))


def fit_transform(
    mode: Mode | str,
    train_features: np.ndarray,
    wavelengths_nm: np.ndarray,
    n_components: int = PCA_COMPONENTS,
    rgb_gain: float = 1.0,
) -> FeatureTransform:
    """Fit whatever state ``mode`` needs, using training features only."""
    mode = Mode.parse(mode)
    pca = fit_pca(train_features, n_components) if mode is Mode.PCA else None
    return FeatureTransform(mode, wavelengths_nm, pca, rgb_gain)


def transform_dataset(samples: SampleSet, mode: Mode | str, state: FeatureTransform | None) -> SampleSet:
    """Re-express ``samples`` in the requested representation.

    Labels and provenance pass through untouched.
    """
    mode = Mode.parse(mode)
    if state is None and mode is Mode.HS:
        return samples.with_features(samples.features)
    if state is None:
        raise DataError(f"mode {mode.value!r} requires a fitted FeatureTransform (missing fitted state)")
    if state.mode is not mode:
        raise DataError(f"transform was fitted for mode {state.mode.value!r}, not {mode.value!r}")
    return samples.with_features(state.apply(samples.features))
