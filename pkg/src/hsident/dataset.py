"""Image-disjoint stratified splits and the synthetic scene generator."""

from __future__ import annotations

import json
import math
import os
from collections.abc import Callable, Mapping, Sequence
from dataclasses import asdict, dataclass
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ConfigError, DataError
from .hscube import SENSOR_WAVELENGTHS_NM, AnnotationSet, Box, HsCube
from .preprocess import SampleSet
from .seeding import rng_for

__all__ = [
    "SPLIT_NAMES",
    "DEFAULT_TARGETS",
    "SplitPlan",
    "build_splits",
    "collect_samples",
    "SynthConfig",
    "generate_synthetic",
    "class_signatures",
    "synthetic_wavelengths",
    "default_class_map",
]

SPLIT_NAMES = ("train", "val", "test")

# ten individuals; 50,000 / 5,000 / 5,000 pixels per individual
DEFAULT_TARGETS = {"train": 50_000, "val": 5_000, "test": 5_000}


def _class_counts(ann: AnnotationSet, class_map: Mapping[int, int], n_classes: int) -> np.ndarray:
    hist = np.bincount(ann.id_mask.ravel(), minlength=int(ann.id_mask.max()) + 1)
    counts = np.zeros(n_classes, dtype=np.int64)
    for ident, cls in class_map.items():
        if 0 < ident < hist.size:
            counts[cls] += hist[ident]
    return counts


def _normalise_targets(targets: Mapping[str, int | Sequence[int]], n_classes: int) -> dict[str, np.ndarray]:
    if not targets:
        raise ConfigError("at least one split target is required")
    out = {}
    for name, t in targets.items():
        arr = np.full(n_classes, t, dtype=np.int64) if np.isscalar(t) else np.asarray(t, dtype=np.int64)
        if arr.shape != (n_classes,):
            raise ConfigError(f"split {name!r}: expected {n_classes} per-class targets, got {arr.size}")
        if np.any(arr < 0):
            raise ConfigError(f"split {name!r}: targets must be non-negative")
        out[str(name)] = arr
    return out


def _check_class_map(class_map: Mapping[int, int]) -> int:
    if not class_map:
        raise ConfigError("class_map is empty")
    classes = sorted(set(class_map.values()))
    if classes != list(range(len(classes))):
        raise ConfigError(f"class indices must be 0..C-1, got {classes}")
    if any(ident < 1 for ident in class_map):
        raise ConfigError("individual IDs must be >= 1")
    return len(classes)


@dataclass(eq=False)
class SplitPlan:
    """Pixel selections per split, each split drawn from its own set of cubes.

    ``entries[split]`` is a dict of equal-length arrays: cube_id, y, x, label.
    """

    class_map: dict[int, int]
    targets: dict[str, np.ndarray]
    assignment: dict[str, list[str]]
    entries: dict[str, dict[str, np.ndarray]]
    seed: int

    @property
    def n_classes(self) -> int:
        return len(set(self.class_map.values()))

    def split_names(self) -> list[str]:
        return list(self.targets)

    def counts(self, split: str) -> np.ndarray:
        return np.bincount(self.entries[split]["label"], minlength=self.n_classes)

    def cube_ids(self) -> list[str]:
        return sorted({c for ids in self.assignment.values() for c in ids})

    def validate(self) -> None:
        """Raise DataError if any plan invariant is broken."""
        seen: dict[str, str] = {}
        for split, ids in self.assignment.items():
            for cid in ids:
                if cid in seen:
                    raise DataError(f"cube {cid!r} appears in splits {seen[cid]!r} and {split!r}")
                seen[cid] = split
        keys = set()
        for split, e in self.entries.items():
            if not np.array_equal(self.counts(split), self.targets[split]):
                raise DataError(f"split {split!r} counts differ from targets")
            allowed = set(self.assignment[split])
            for cid, y, x in zip(e["cube_id"], e["y"], e["x"]):
                if cid not in allowed:
                    raise DataError(f"split {split!r} uses pixel from unassigned cube {cid!r}")
                key = (cid, int(y), int(x))
                if key in keys:
                    raise DataError(f"duplicate pixel {key}")
                keys.add(key)

    def to_dict(self) -> dict[str, Any]:
        splits = {}
        for name in self.targets:
            e = self.entries[name]
            ids = self.assignment[name]
            index = {cid: i for i, cid in enumerate(ids)}
            rows = [
                [index[c], int(y), int(x), int(lbl)]
                for c, y, x, lbl in zip(e["cube_id"], e["y"], e["x"], e["label"])
            ]
            splits[name] = {"targets": self.targets[name].tolist(), "cube_ids": ids, "pixels": rows}
        return {
            "seed": self.seed,
            "class_map": {str(k): v for k, v in sorted(self.class_map.items())},
            "splits": splits,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> SplitPlan:
        try:
            class_map = {int(k): int(v) for k, v in d["class_map"].items()}
            targets, assignment, entries = {}, {}, {}
            for name, s in d["splits"].items():
                targets[name] = np.asarray(s["targets"], dtype=np.int64)
                ids = [str(c) for c in s["cube_ids"]]
                assignment[name] = ids
                rows = np.asarray(s["pixels"], dtype=np.int64).reshape(-1, 4)
                entries[name] = {
                    "cube_id": np.array([ids[i] for i in rows[:, 0]], dtype=object),
                    "y": rows[:, 1],
                    "x": rows[:, 2],
                    "label": rows[:, 3],
                }
            return cls(class_map, targets, assignment, entries, int(d["seed"]))
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise DataError(f"malformed split plan: {exc}") from exc

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), separators=(",", ":")) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | os.PathLike) -> SplitPlan:
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except FileNotFoundError:
            raise DataError(f"split plan {path} not found") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"malformed split plan JSON: {exc}") from exc


def build_splits(
    annotations: Sequence[AnnotationSet],
    class_map: Mapping[int, int],
    targets: Mapping[str, int | Sequence[int]],
    seed: int = 0,
) -> SplitPlan:
    """Assign whole cubes to splits, then sample pixels per class.

    Cubes are visited in descending labelled-pixel order and each goes to the
    split whose remaining targets it covers best (as a fraction of target).
    Infeasible targets raise DataError naming the first short split/class;
    constraints are never relaxed. Within a split, each class's pixels are
    drawn uniformly without replacement from all pixels the split's cubes offer.
    """
    n_classes = _check_class_map(class_map)
    tgt = _normalise_targets(targets, n_classes)
    ids = [a.cube_id for a in annotations]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate cube_id among annotations")
    counts = {a.cube_id: _class_counts(a, class_map, n_classes) for a in annotations}
    order = sorted(ids, key=lambda c: (-int(counts[c].sum()), c))

    remaining = {s: t.copy() for s, t in tgt.items()}
    assigned: dict[str, list[str]] = {s: [] for s in tgt}
    scale = {s: 1.0 / np.maximum(t, 1) for s, t in tgt.items()}
    for cid in order:
        best, best_gain = None, 0.0
        for s in tgt:
            gain = float((np.minimum(counts[cid], remaining[s]) * scale[s]).sum())
            if gain > best_gain:
                best, best_gain = s, gain
        if best is None:
            continue
        assigned[best].append(cid)
        remaining[best] = np.maximum(remaining[best] - counts[cid], 0)

    for s, rem in remaining.items():
        short = np.nonzero(rem > 0)[0]
        if short.size:
            c = int(short[0])
            have = int(tgt[s][c] - rem[c])
            raise DataError(
                f"infeasible split targets: split {s!r} class {c} has {have} of "
                f"{int(tgt[s][c])} pixels available from image-disjoint cubes"
            )

    by_id = {a.cube_id: a for a in annotations}
    lut_size = max(class_map) + 1
    lut = np.full(lut_size, -1, dtype=np.int64)
    for ident, cls in class_map.items():
        lut[ident] = cls

    rng = rng_for(seed, "split")
    entries = {}
    for s in tgt:
        cube_ids = sorted(assigned[s])
        assigned[s] = cube_ids
        per_cube = np.stack([counts[c] for c in cube_ids]) if cube_ids else np.zeros((0, n_classes), np.int64)
        chosen = []
        for c in range(n_classes):
            total = int(per_cube[:, c].sum()) if cube_ids else 0
            picks = np.sort(rng.choice(total, size=int(tgt[s][c]), replace=False))
            chosen.append(picks)
        offsets = np.concatenate([np.zeros((1, n_classes), np.int64), np.cumsum(per_cube, axis=0)])
        cid_col, y_col, x_col, lbl_col = [], [], [], []
        for i, cid in enumerate(cube_ids):
            mask = by_id[cid].id_mask
            classes = np.where(mask < lut_size, lut[np.minimum(mask, lut_size - 1)], -1)
            for c in range(n_classes):
                lo, hi = offsets[i, c], offsets[i + 1, c]
                sel = chosen[c][(chosen[c] >= lo) & (chosen[c] < hi)] - lo
                if sel.size == 0:
                    continue
                ys, xs = np.nonzero(classes == c)
                cid_col.append(np.full(sel.size, cid, dtype=object))
                y_col.append(ys[sel])
                x_col.append(xs[sel])
                lbl_col.append(np.full(sel.size, c, dtype=np.int64))
        if cid_col:
            e = {
                "cube_id": np.concatenate(cid_col),
                "y": np.concatenate(y_col).astype(np.int64),
                "x": np.concatenate(x_col).astype(np.int64),
                "label": np.concatenate(lbl_col),
            }
        else:
            e = {
                "cube_id": np.zeros(0, dtype=object),
                "y": np.zeros(0, np.int64),
                "x": np.zeros(0, np.int64),
                "label": np.zeros(0, np.int64),
            }
        entries[s] = e
    return SplitPlan(dict(class_map), tgt, assigned, entries, int(seed))


def collect_samples(
    plan: SplitPlan,
    load_cube: Callable[[str], HsCube],
    splits: Sequence[str] | None = None,
) -> dict[str, SampleSet]:
    """Materialise split features, loading each referenced cube once.

    ``load_cube`` receives a cube_id and returns the (possibly filtered) cube.
    ``splits`` limits the work to the named splits. Samples keep the plan's
    entry order.
    """
    names = list(plan.entries) if splits is None else list(splits)
    unknown = set(names) - set(plan.entries)
    if unknown:
        raise DataError(f"plan has no split(s) {sorted(unknown)}")
    entries = {s: plan.entries[s] for s in names}
    features: dict[str, np.ndarray | None] = {s: None for s in entries}
    cube_ids = sorted({c for s in names for c in plan.assignment[s]})
    for cid in cube_ids:
        cube = load_cube(cid)
        if cube.cube_id != cid:
            raise DataError(f"loader returned cube {cube.cube_id!r} for {cid!r}")
        for s, e in entries.items():
            rows = np.nonzero(e["cube_id"] == cid)[0]
            if rows.size == 0:
                continue
            if features[s] is None:
                features[s] = np.zeros((e["label"].size, cube.bands), dtype=np.float32)
            features[s][rows] = cube.data[e["y"][rows], e["x"][rows], :]
    out = {}
    for s, e in entries.items():
        f = features[s] if features[s] is not None else np.zeros((0, 0), np.float32)
        out[s] = SampleSet(f, e["label"], e["cube_id"], e["x"], e["y"])
    return out


# --------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SynthConfig:
    """Parameters of the synthetic scene generator.

    Class signatures are a shared smooth base curve modulated by
    ``signature_terms`` Gaussian bumps spread over the wavelength range, with
    relative strength ``signature_amplitude``. Each scene multiplies every
    spectrum by one illumination factor drawn from 1 +/- ``illumination_range``
    and adds i.i.d. Gaussian noise of standard deviation ``noise``.
    """

    classes: int = 10
    bands: int = 151
    height: int = 64
    width: int = 64
    scenes: int = 30
    regions_per_scene: int = 4
    signature_terms: int = 16
    signature_amplitude: float = 0.05
    illumination_range: float = 0.3
    noise: float = 0.1
    seed: int = 0
    start_time: str = "2023-06-23T10:00:00Z"
    scene_interval_minutes: float = 10.0

    def validate(self) -> None:
        if self.classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.classes}")
        if self.bands < 1 or self.height < 1 or self.width < 1 or self.scenes < 1:
            raise ConfigError("bands, height, width and scenes must be positive")
        if not 1 <= self.regions_per_scene <= self.classes:
            raise ConfigError(f"regions_per_scene must be in [1, {self.classes}]")
        if self.scenes * self.regions_per_scene < 3 * self.classes:
            raise ConfigError(
                f"{self.scenes} scenes x {self.regions_per_scene} regions cannot show each of "
                f"{self.classes} classes in at least 3 scenes"
            )
        if self.signature_terms < 1:
            raise ConfigError("signature_terms must be >= 1")
        if self.noise < 0 or self.signature_amplitude < 0:
            raise ConfigError("noise and signature_amplitude must be non-negative")
        if not 0 <= self.illumination_range < 1:
            raise ConfigError("illumination_range must be in [0, 1)")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> SynthConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synth config fields: {sorted(unknown)}")
        return cls(**d)


def synthetic_wavelengths(bands: int) -> np.ndarray:
    if bands == SENSOR_WAVELENGTHS_NM.size:
        return SENSOR_WAVELENGTHS_NM.copy()
    return np.linspace(350.0, 1100.0, bands)


def _base_curve(wl: np.ndarray) -> np.ndarray:
    t = (wl - 350.0) / 750.0
    return 0.45 + 0.3 / (1.0 + np.exp(-(wl - 520.0) / 45.0)) - 0.12 * t**2


def _background_curve(wl: np.ndarray) -> np.ndarray:
    return 0.25 + 0.1 * np.exp(-(((wl - 560.0) / 120.0) ** 2)) + 0.15 / (1.0 + np.exp(-(wl - 720.0) / 25.0))


def class_signatures(config: SynthConfig) -> np.ndarray:
    """Noise-free C x B mean spectra of the synthetic individuals."""
    rng = rng_for(config.seed, "synth.signatures")
    wl = synthetic_wavelengths(config.bands)
    centres = np.linspace(350.0, 1100.0, config.signature_terms)
    width = 750.0 / max(config.signature_terms - 1, 1) * 0.6
    basis = np.exp(-0.5 * ((wl[None, :] - centres[:, None]) / width) ** 2)
    coeffs = rng.standard_normal((config.classes, config.signature_terms))
    modulation = 1.0 + config.signature_amplitude * np.tanh(coeffs @ basis)
    return _base_curve(wl)[None, :] * modulation


def _ellipse_layout(config: SynthConfig, rng: np.random.Generator) -> list[np.ndarray]:
    k = config.regions_per_scene
    cols = math.ceil(math.sqrt(k))
    rows = math.ceil(k / cols)
    cell_h, cell_w = config.height / rows, config.width / cols
    if min(cell_h, cell_w) * 0.3 < 2.0:
        raise DataError(
            f"regions cannot fit scene: {k} regions in {config.height}x{config.width} leaves "
            f"cells of {cell_h:.1f}x{cell_w:.1f} px"
        )
    yy, xx = np.mgrid[0 : config.height, 0 : config.width]
    regions = []
    for i in range(k):
        r, c = divmod(i, cols)
        ay = cell_h * rng.uniform(0.3, 0.45)
        ax = cell_w * rng.uniform(0.3, 0.45)
        cy = (r + 0.5) * cell_h + rng.uniform(-1, 1) * (cell_h / 2 - ay)
        cx = (c + 0.5) * cell_w + rng.uniform(-1, 1) * (cell_w / 2 - ax)
        regions.append(((yy + 0.5 - cy) / ay) ** 2 + ((xx + 0.5 - cx) / ax) ** 2 <= 1.0)
    return regions


def generate_synthetic(config: SynthConfig) -> list[tuple[HsCube, AnnotationSet]]:
    """Deterministically render ``config.scenes`` labelled cubes.

    Individual IDs are class index + 1. Classes rotate through scenes so each
    appears in at least three of them.
    """
    config.validate()
    rng = rng_for(config.seed, "synth.scenes")
    wl = synthetic_wavelengths(config.bands)
    signatures = class_signatures(config)
    background = _background_curve(wl)
    offset = int(rng.integers(config.classes))
    start = datetime.fromisoformat(config.start_time.replace("Z", "+00:00"))
    if start.tzinfo is None:
        start = start.replace(tzinfo=timezone.utc)

    scenes = []
    for s in range(config.scenes):
        regions = _ellipse_layout(config, rng)
        first = offset + s * config.regions_per_scene
        classes = [(first + j) % config.classes for j in range(config.regions_per_scene)]
        illum = 1.0 + rng.uniform(-config.illumination_range, config.illumination_range)
        mask = np.zeros((config.height, config.width), dtype=np.uint16)
        clean = np.broadcast_to(background, (config.height, config.width, config.bands)).copy()
        boxes = []
        for cls, region in zip(classes, regions):
            mask[region] = cls + 1
            clean[region] = signatures[cls]
            ys, xs = np.nonzero(region)
            boxes.append(Box(cls + 1, int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1))
        data = clean * illum
        if config.noise > 0:
            data = data + rng.normal(0.0, config.noise, size=data.shape)
        data = np.clip(data, 0.0, None).astype(np.float32)
        cube_id = f"synth_{s:03d}"
        when = start + timedelta(minutes=config.scene_interval_minutes * s)
        scenes.append((HsCube(data, wl, cube_id, when), AnnotationSet(cube_id, mask, boxes)))
    return scenes


def default_class_map(annotations: Sequence[AnnotationSet], ids: Sequence[int] | None = None) -> dict[int, int]:
    """Map individual IDs to consecutive class indices in ascending ID order."""
    if ids is None:
        found = set()
        for a in annotations:
            found.update(a.ids())
        ids = sorted(found)
    ids = sorted(int(i) for i in ids)
    return {ident: cls for cls, ident in enumerate(ids)}
