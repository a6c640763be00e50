"""Spatial denoising and extraction of annotated pixel spectra."""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .hscube import AnnotationSet, HsCube

__all__ = ["box_filter", "box_filter_plane", "SpectralSample", "SampleSet", "extract_samples"]

# bands filtered per vectorised chunk; bounds float64 scratch memory
_BAND_CHUNK = 16


def _running_mean(a: np.ndarray, k: int, axis: int) -> np.ndarray:
    r = k // 2
    pad = [(0, 0)] * a.ndim
    pad[axis] = (r, r)
    padded = np.pad(a, pad, mode="edge")
    csum = np.cumsum(padded, axis=axis)
    zero_shape = list(csum.shape)
    zero_shape[axis] = 1
    csum = np.concatenate([np.zeros(zero_shape, dtype=csum.dtype), csum], axis=axis)
    n = a.shape[axis]
    hi = np.take(csum, np.arange(k, k + n), axis=axis)
    lo = np.take(csum, np.arange(0, n), axis=axis)
    return (hi - lo) / k


def _check_kernel(kernel: int, height: int, width: int) -> None:
    if isinstance(kernel, bool) or not isinstance(kernel, (int, np.integer)):
        raise DataError(f"kernel must be an integer, got {kernel!r}")
    if kernel < 1 or kernel % 2 == 0:
        raise DataError(f"kernel must be a positive odd integer, got {kernel}")
    if kernel > min(height, width):
        raise DataError(f"kernel {kernel} exceeds image size {height}x{width}")


def box_filter_plane(plane: np.ndarray, kernel: int) -> np.ndarray:
    """Mean over a kernel x kernel window of a 2-D (or H x W x n) array.

    Edges use replicate padding, so the output has the input's shape.
    Accumulation is float64; the result is float64.
    """
    plane = np.asarray(plane)
    _check_kernel(kernel, plane.shape[0], plane.shape[1])
    out = plane.astype(np.float64)
    if kernel == 1:
        return out
    out = _running_mean(out, kernel, axis=0)
    return _running_mean(out, kernel, axis=1)


def box_filter(cube: HsCube, kernel: int = 5) -> HsCube:
    """Apply a spatial box filter to every band of ``cube`` independently."""
    _check_kernel(kernel, cube.height, cube.width)
    if kernel == 1:
        return cube.with_data(cube.data.copy())
    out = np.empty((cube.bands, cube.height, cube.width), dtype=np.float32)
    for start in range(0, cube.bands, _BAND_CHUNK):
        stop = min(start + _BAND_CHUNK, cube.bands)
        chunk = box_filter_plane(cube.data[:, :, start:stop], kernel)
        out[start:stop] = chunk.transpose(2, 0, 1)
    # band-sequential layout, matching cubes read from disk
    return cube.with_data(out.transpose(1, 2, 0))


@dataclass(frozen=True)
class SpectralSample:
    features: np.ndarray
    label: int
    cube_id: str
    x: int
    y: int


@dataclass(eq=False)
class SampleSet:
    """Column-oriented batch of labelled pixel spectra.

    Holding features as one N x D matrix keeps 10^5-scale splits cheap;
    indexing yields individual :class:`SpectralSample` records.
    """

    features: np.ndarray
    labels: np.ndarray
    cube_ids: np.ndarray
    xs: np.ndarray
    ys: np.ndarray

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features)
        if self.features.ndim != 2:
            raise DataError(f"features must be N x D, got shape {self.features.shape}")
        n = self.features.shape[0]
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.cube_ids = np.asarray(self.cube_ids, dtype=object).reshape(-1)
        self.xs = np.asarray(self.xs, dtype=np.int64).reshape(-1)
        self.ys = np.asarray(self.ys, dtype=np.int64).reshape(-1)
        for name in ("labels", "cube_ids", "xs", "ys"):
            if getattr(self, name).shape[0] != n:
                raise DataError(f"{name} has {getattr(self, name).shape[0]} entries, expected {n}")
        if n and not np.all(np.isfinite(self.features)):
            raise DataError("sample features must be finite")

    @classmethod
    def empty(cls, dim: int) -> SampleSet:
        return cls(np.zeros((0, dim), np.float32), [], [], [], [])

    @classmethod
    def concat(cls, parts: Sequence[SampleSet]) -> SampleSet:
        if not parts:
            raise DataError("cannot concatenate zero sample sets")
        return cls(
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.cube_ids for p in parts]),
            np.concatenate([p.xs for p in parts]),
            np.concatenate([p.ys for p in parts]),
        )

    def __len__(self) -> int:
        return int(self.features.shape[0])

    def __getitem__(self, i: int) -> SpectralSample:
        return SpectralSample(
            self.features[i], int(self.labels[i]), str(self.cube_ids[i]), int(self.xs[i]), int(self.ys[i])
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def with_features(self, features: np.ndarray) -> SampleSet:
        """Same labels and provenance, new feature matrix."""
        return SampleSet(features, self.labels, self.cube_ids, self.xs, self.ys)

    def subset(self, index: np.ndarray) -> SampleSet:
        return SampleSet(
            self.features[index], self.labels[index], self.cube_ids[index], self.xs[index], self.ys[index]
        )


def extract_samples(
    cube: HsCube,
    ann: AnnotationSet,
    class_map: Mapping[int, int],
    pixels: np.ndarray | None = None,
) -> SampleSet:
    """Collect the spectra of labelled pixels whose ID appears in ``class_map``.

    Samples come out in row-major order. ``pixels`` optionally restricts
    extraction to an (n, 2) array of (y, x) coordinates, kept in the given order.
    """
    if ann.cube_id != cube.cube_id:
        raise DataError(f"annotation is for cube {ann.cube_id!r}, not {cube.cube_id!r}")
    if ann.id_mask.shape != (cube.height, cube.width):
        raise DataError(
            f"mask dimension mismatch: mask {ann.id_mask.shape}, cube {(cube.height, cube.width)}"
        )
    lut = np.full(int(ann.id_mask.max()) + 1, -1, dtype=np.int64)
    for ident, cls in class_map.items():
        if 0 < ident < lut.size:
            lut[ident] = cls
    if pixels is None:
        classes = lut[ann.id_mask]
        ys, xs = np.nonzero(classes >= 0)
    else:
        pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
        ys, xs = pixels[:, 0], pixels[:, 1]
        if np.any(lut[ann.id_mask[ys, xs]] < 0):
            raise DataError("requested pixels include unlabelled or unmapped IDs")
    labels = lut[ann.id_mask[ys, xs]]
    features = cube.data[ys, xs, :]
    return SampleSet(features, labels, np.full(len(ys), cube.cube_id, dtype=object), xs, ys)
