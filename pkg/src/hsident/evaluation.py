"""Accuracy reports, label-map and band-image rendering, interval-mean spectra."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Any

import numpy as np

from .errors import DataError
from .hscube import AnnotationSet, BandImage, HsCube
from .transforms import luminance

__all__ = [
    "EvalReport",
    "evaluate",
    "PALETTE",
    "NEUTRAL_GRAY",
    "render_label_map",
    "render_band_image",
    "save_png",
    "SpectraRow",
    "SpectraSummary",
    "interval_mean_spectra",
]


@dataclass(eq=False)
class EvalReport:
    """Confusion matrix (rows true, columns predicted) and derived accuracies.

    Classes with no true samples get a per-class accuracy of NaN.
    """

    confusion: np.ndarray
    per_class_accuracy: np.ndarray
    overall_accuracy: float

    @property
    def n_classes(self) -> int:
        return int(self.confusion.shape[0])

    @property
    def average_accuracy(self) -> float:
        """Unweighted mean of per-class accuracies (equals OA for balanced classes)."""
        valid = self.per_class_accuracy[~np.isnan(self.per_class_accuracy)]
        return float(valid.mean()) if valid.size else float("nan")

    def to_dict(self) -> dict[str, Any]:
        def clean(v: float) -> float | None:
            return None if math.isnan(v) else float(v)

        return {
            "confusion": self.confusion.tolist(),
            "per_class_accuracy": [clean(v) for v in self.per_class_accuracy],
            "overall_accuracy": clean(self.overall_accuracy),
            "average_accuracy": clean(self.average_accuracy),
            "support": self.confusion.sum(axis=1).tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    def format_table(self, row_label: str = "HS", class_names: Sequence[str] | None = None) -> str:
        """Accuracy table in percent: one column per class, then the average."""
        names = list(class_names) if class_names is not None else [str(i + 1) for i in range(self.n_classes)]
        header = ["data type", *names, "Ave. (%)"]
        cells = [row_label] + [
            "-" if math.isnan(v) else f"{100 * v:.2f}" for v in self.per_class_accuracy
        ]
        cells.append("-" if math.isnan(self.average_accuracy) else f"{100 * self.average_accuracy:.2f}")
        widths = [max(len(h), len(c)) for h, c in zip(header, cells)]
        line = " | ".join(h.rjust(w) for h, w in zip(header, widths))
        rule = "-+-".join("-" * w for w in widths)
        row = " | ".join(c.rjust(w) for c, w in zip(cells, widths))
        return f"{line}\n{rule}\n{row}\nOA: {100 * self.overall_accuracy:.2f}%\n"


def evaluate(predictions: np.ndarray, truth: np.ndarray, n_classes: int) -> EvalReport:
    predictions = np.asarray(predictions).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    if predictions.size != truth.size:
        raise DataError(f"length mismatch: {predictions.size} predictions, {truth.size} labels")
    for name, arr in (("predictions", predictions), ("truth", truth)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise DataError(f"{name} contain labels outside [0, {n_classes})")
    confusion = np.bincount(
        truth.astype(np.int64) * n_classes + predictions.astype(np.int64), minlength=n_classes * n_classes
    ).reshape(n_classes, n_classes)
    support = confusion.sum(axis=1)
    diag = np.diag(confusion)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(support > 0, diag / np.maximum(support, 1), np.nan)
    total = int(support.sum())
    oa = float(diag.sum() / total) if total else float("nan")
    return EvalReport(confusion, per_class.astype(np.float64), oa)


# --------------------------------------------------------------------------
# rendering

NEUTRAL_GRAY = (128, 128, 128)

# 27 distinguishable colours, one per individual in the full dataset;
# index 4 (ID 5) is magenta
PALETTE = np.array(
    [
        (230, 25, 75),
        (60, 180, 75),
        (255, 225, 25),
        (0, 130, 200),
        (240, 50, 230),
        (245, 130, 48),
        (70, 240, 240),
        (145, 30, 180),
        (210, 245, 60),
        (250, 190, 212),
        (0, 128, 128),
        (220, 190, 255),
        (170, 110, 40),
        (255, 250, 200),
        (128, 0, 0),
        (170, 255, 195),
        (128, 128, 0),
        (255, 215, 180),
        (0, 0, 128),
        (255, 255, 255),
        (0, 0, 0),
        (100, 149, 237),
        (255, 99, 71),
        (46, 139, 87),
        (218, 165, 32),
        (199, 21, 133),
        (72, 61, 139),
    ],
    dtype=np.uint8,
)


def render_label_map(
    labels: np.ndarray, palette: np.ndarray | None = None, mask: np.ndarray | None = None
) -> np.ndarray:
    """H x W x 3 uint8 image with each pixel coloured ``palette[label]``.

    Pixels where ``mask`` is false are drawn neutral gray.
    """
    labels = np.asarray(labels)
    palette = PALETTE if palette is None else np.asarray(palette, dtype=np.uint8)
    if labels.size and (labels.min() < 0 or labels.max() >= len(palette)):
        raise DataError(f"palette has {len(palette)} entries, labels reach {int(labels.max())}")
    image = palette[labels]
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != labels.shape:
            raise DataError(f"mask shape {mask.shape} differs from label map {labels.shape}")
        image[~mask] = NEUTRAL_GRAY
    return image


def render_band_image(band: BandImage | np.ndarray, colormap: str = "viridis") -> np.ndarray:
    """Min-max normalise a band plane and map it through a matplotlib colormap.

    A constant plane renders at the colormap midpoint.
    """
    from matplotlib import colormaps

    plane = band.plane if isinstance(band, BandImage) else np.asarray(band)
    plane = np.asarray(plane, dtype=np.float64)
    if not np.all(np.isfinite(plane)):
        raise DataError("band plane contains non-finite values")
    lo, hi = float(plane.min()), float(plane.max())
    if hi > lo:
        t = (plane - lo) / (hi - lo)
    else:
        t = np.full(plane.shape, 0.5)
    cmap = colormaps[colormap]
    return np.asarray(cmap(t, bytes=True))[..., :3].copy()


def save_png(image: np.ndarray, path: str | os.PathLike) -> Path:
    from PIL import Image

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(image)).save(path)
    return path


# --------------------------------------------------------------------------
# interval-averaged spectra


@dataclass(frozen=True)
class SpectraRow:
    individual: int
    interval_start: datetime
    interval_end: datetime
    count: int
    n_cubes: int
    mean: np.ndarray


@dataclass(eq=False)
class SpectraSummary:
    wavelengths_nm: np.ndarray
    rows: list[SpectraRow]

    def get(self, individual: int, interval_start: datetime | None = None) -> SpectraRow | None:
        for r in self.rows:
            if r.individual == individual and interval_start in (None, r.interval_start):
                return r
        return None

    def to_csv(self, path: str | os.PathLike | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        bands = len(self.wavelengths_nm)
        w.writerow(
            ["individual", "interval_start", "interval_end", "count", "n_cubes"]
            + [f"b{i}" for i in range(bands)]
        )
        for r in self.rows:
            w.writerow(
                [r.individual, _iso(r.interval_start), _iso(r.interval_end), r.count, r.n_cubes]
                + [repr(float(v)) for v in r.mean]
            )
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text


def _iso(t: datetime) -> str:
    return t.isoformat().replace("+00:00", "Z")


def _select_region(
    cube: HsCube, region: np.ndarray, white_quantile: float | None
) -> np.ndarray:
    """Pixels of ``region`` kept by the bright-part rule, as a boolean mask."""
    if white_quantile is None or not np.any(region):
        return region
    spectra = cube.data[region]
    lum = luminance(spectra, cube.wavelengths_nm)
    threshold = np.quantile(lum, white_quantile)
    keep = np.zeros_like(region)
    keep[region] = lum >= threshold
    return keep


def interval_mean_spectra(
    items: Iterable[tuple[HsCube, AnnotationSet]],
    intervals: Sequence[tuple[datetime, datetime]],
    white_quantile: float | None = 0.6,
    individuals: Sequence[int] | None = None,
) -> SpectraSummary:
    """Mean spectrum per (individual, interval) over every cube captured in it.

    Within each cube, an individual's pixels are restricted to those whose
    luminance is at or above ``white_quantile`` of that individual's
    luminance distribution (None keeps every labelled pixel). Empty
    (individual, interval) pairs are omitted.
    """
    items = list(items)
    intervals = [(a, b) for a, b in intervals]
    for a, b in intervals:
        if not a < b:
            raise DataError(f"empty interval [{a}, {b})")
    ordered = sorted(intervals)
    for (_, e1), (s2, _) in zip(ordered, ordered[1:]):
        if s2 < e1:
            raise DataError("intervals overlap")
    if white_quantile is not None and not 0 <= white_quantile <= 1:
        raise DataError(f"white_quantile must be in [0, 1], got {white_quantile}")
    missing = [c.cube_id for c, _ in items if c.capture_time is None]
    if missing:
        raise DataError(f"cubes without capture_time: {', '.join(missing)}")
    if not items:
        return SpectraSummary(np.zeros(0), [])
    wl = items[0][0].wavelengths_nm
    bands = wl.size
    wanted = None if individuals is None else set(int(i) for i in individuals)

    sums: dict[tuple[int, int], np.ndarray] = {}
    counts: dict[tuple[int, int], int] = {}
    cubes_seen: dict[tuple[int, int], int] = {}
    for cube, ann in items:
        if ann.cube_id != cube.cube_id:
            raise DataError(f"annotation {ann.cube_id!r} paired with cube {cube.cube_id!r}")
        if ann.id_mask.shape != (cube.height, cube.width):
            raise DataError(f"mask dimension mismatch for cube {cube.cube_id!r}")
        if cube.bands != bands or not np.array_equal(cube.wavelengths_nm, wl):
            raise DataError(f"cube {cube.cube_id!r} has a different wavelength grid")
        slot = next(
            (k for k, (a, b) in enumerate(intervals) if a <= cube.capture_time < b), None
        )
        if slot is None:
            continue
        for ident in ann.ids():
            if wanted is not None and ident not in wanted:
                continue
            keep = _select_region(cube, ann.id_mask == ident, white_quantile)
            n = int(keep.sum())
            if n == 0:
                continue
            key = (ident, slot)
            sums[key] = sums.get(key, np.zeros(bands)) + cube.data[keep].astype(np.float64).sum(axis=0)
            counts[key] = counts.get(key, 0) + n
            cubes_seen[key] = cubes_seen.get(key, 0) + 1

    rows = []
    for ident, slot in sorted(sums, key=lambda k: (intervals[k[1]][0], k[0])):
        key = (ident, slot)
        a, b = intervals[slot]
        rows.append(SpectraRow(ident, a, b, counts[key], cubes_seen[key], sums[key] / counts[key]))
    return SpectraSummary(wl.copy(), rows)
