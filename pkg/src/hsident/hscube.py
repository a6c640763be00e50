"""Hyperspectral cube and annotation containers.

A cube lives on disk as two files sharing a stem::

    <stem>.hsc.json   header (cube_id, dims, wavelengths_nm, capture_time, ...)
    <stem>.hsc.raw    little-endian float32 payload, band-sequential (BSQ)

Annotations use ``<stem>.mask.png`` (16-bit grayscale ID map) and
``<stem>.boxes.json`` (labelled bounding boxes plus the declared mask size).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image

from .errors import DataError

__all__ = [
    "SENSOR_WAVELENGTHS_NM",
    "SENSOR_HEIGHT",
    "SENSOR_WIDTH",
    "HsCube",
    "Box",
    "AnnotationSet",
    "BandImage",
    "read_cube",
    "write_cube",
    "read_header",
    "validate_header",
    "extract_band",
    "read_annotations",
    "write_annotations",
    "cube_stem",
]

# 151 bands, 350-1100 nm at 5 nm; 2048x1080 frames
SENSOR_WAVELENGTHS_NM = np.arange(350.0, 1100.0 + 1e-9, 5.0)
SENSOR_WIDTH = 2048
SENSOR_HEIGHT = 1080

HEADER_SUFFIX = ".hsc.json"
PAYLOAD_SUFFIX = ".hsc.raw"
MASK_SUFFIX = ".mask.png"
BOXES_SUFFIX = ".boxes.json"

_HEADER_KEYS = {
    "cube_id",
    "height",
    "width",
    "bands",
    "wavelengths_nm",
    "capture_time",
    "payload",
    "dtype",
    "order",
}


def _format_time(t: datetime | None) -> str | None:
    if t is None:
        return None
    return t.astimezone(timezone.utc).isoformat().replace("+00:00", "Z")


def _parse_time(value: Any) -> datetime | None:
    if value is None:
        return None
    if not isinstance(value, str):
        raise DataError(f"capture_time must be an ISO-8601 string or null, got {value!r}")
    text = value[:-1] + "+00:00" if value.endswith("Z") else value
    try:
        t = datetime.fromisoformat(text)
    except ValueError as exc:
        raise DataError(f"unparseable capture_time {value!r}") from exc
    if t.tzinfo is None:
        raise DataError(f"capture_time {value!r} lacks a UTC offset")
    return t.astimezone(timezone.utc)


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _check_wavelengths(wl: np.ndarray, bands: int) -> None:
    if wl.ndim != 1 or wl.shape[0] != bands:
        raise DataError(f"wavelengths_nm has length {wl.size}, expected {bands}")
    if not np.all(np.isfinite(wl)):
        raise DataError("wavelengths_nm contains non-finite values")
    if bands > 1 and not np.all(np.diff(wl) > 0):
        raise DataError("wavelengths_nm must be strictly ascending")


@dataclass(eq=False)
class HsCube:
    """An H x W x B intensity volume with its wavelength axis.

    ``data`` is indexed ``[row, col, band]`` and always float32. Cubes read
    from disk are views onto band-sequential storage, so band planes are
    contiguous. Treat instances as immutable.
    """

    data: np.ndarray
    wavelengths_nm: np.ndarray
    cube_id: str
    capture_time: datetime | None = None

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise DataError(f"cube data must be 3-D (H, W, B), got shape {self.data.shape}")
        self.wavelengths_nm = np.asarray(self.wavelengths_nm, dtype=np.float64)
        _check_wavelengths(self.wavelengths_nm, self.bands)
        if not isinstance(self.cube_id, str) or not self.cube_id:
            raise DataError("cube_id must be a non-empty string")
        if min(self.data.shape) < 1:
            raise DataError(f"cube dimensions must be positive, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise DataError(f"cube {self.cube_id!r} contains non-finite values")
        if np.any(self.data < 0):
            raise DataError(f"cube {self.cube_id!r} contains negative intensities")
        if self.capture_time is not None:
            if self.capture_time.tzinfo is None:
                self.capture_time = self.capture_time.replace(tzinfo=timezone.utc)
            self.capture_time = self.capture_time.astimezone(timezone.utc)

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def bands(self) -> int:
        return int(self.data.shape[2])

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.height, self.width, self.bands

    def is_sensor_conformant(self) -> bool:
        """True for 151-band cubes on the 350-1100 nm / 5 nm grid."""
        return self.bands == SENSOR_WAVELENGTHS_NM.size and np.array_equal(
            self.wavelengths_nm, SENSOR_WAVELENGTHS_NM
        )

    def with_data(self, data: np.ndarray) -> HsCube:
        """Return a cube sharing this cube's metadata but holding ``data``."""
        return HsCube(data, self.wavelengths_nm.copy(), self.cube_id, self.capture_time)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, HsCube):
            return NotImplemented
        return (
            self.cube_id == other.cube_id
            and self.capture_time == other.capture_time
            and self.data.shape == other.data.shape
            and np.array_equal(self.wavelengths_nm, other.wavelengths_nm)
            and self.data.tobytes() == other.data.tobytes()
        )


@dataclass(frozen=True)
class Box:
    id: int
    x0: int
    y0: int
    x1: int
    y1: int

    def to_dict(self) -> dict[str, int]:
        return {"id": self.id, "x0": self.x0, "y0": self.y0, "x1": self.x1, "y1": self.y1}


@dataclass(eq=False)
class AnnotationSet:
    """Pixel-level individual IDs plus labelled boxes for one cube.

    ``id_mask`` is H x W; 0 marks background, k >= 1 an individual.
    """

    cube_id: str
    id_mask: np.ndarray
    boxes: list[Box] = field(default_factory=list)

    def __post_init__(self) -> None:
        mask = np.asarray(self.id_mask)
        if mask.ndim != 2:
            raise DataError(f"id_mask must be 2-D, got shape {mask.shape}")
        if mask.size and (mask.min() < 0 or mask.max() > np.iinfo(np.uint16).max):
            raise DataError("id_mask values must fit in uint16")
        if not np.issubdtype(mask.dtype, np.integer):
            if not np.array_equal(mask, np.round(mask)):
                raise DataError("id_mask must hold integer IDs")
        self.id_mask = mask.astype(np.uint16)
        self.boxes = [b if isinstance(b, Box) else _box_from_dict(b) for b in self.boxes]
        h, w = self.id_mask.shape
        for box in self.boxes:
            _check_box(box, h, w)

    @property
    def height(self) -> int:
        return int(self.id_mask.shape[0])

    @property
    def width(self) -> int:
        return int(self.id_mask.shape[1])

    def ids(self) -> list[int]:
        """Sorted individual IDs present in the mask."""
        values = np.unique(self.id_mask)
        return [int(v) for v in values if v > 0]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AnnotationSet):
            return NotImplemented
        return (
            self.cube_id == other.cube_id
            and self.id_mask.shape == other.id_mask.shape
            and np.array_equal(self.id_mask, other.id_mask)
            and self.boxes == other.boxes
        )


def _box_from_dict(d: Any) -> Box:
    if not isinstance(d, dict):
        raise DataError(f"malformed box {d!r}")
    try:
        vals = {k: d[k] for k in ("id", "x0", "y0", "x1", "y1")}
    except KeyError as exc:
        raise DataError(f"malformed box {d!r}: missing {exc.args[0]!r}") from None
    if not all(_is_int(v) for v in vals.values()):
        raise DataError(f"malformed box {d!r}: coordinates must be integers")
    return Box(**vals)


def _check_box(box: Box, height: int, width: int) -> None:
    if box.id < 1:
        raise DataError(f"box id must be >= 1, got {box.id}")
    if box.x1 <= box.x0 or box.y1 <= box.y0:
        raise DataError(f"degenerate box {box.to_dict()}")
    if box.x0 < 0 or box.y0 < 0 or box.x1 > width or box.y1 > height:
        raise DataError(f"box {box.to_dict()} exceeds image bounds {width}x{height}")


@dataclass(frozen=True)
class BandImage:
    band_index: int
    wavelength_nm: float
    plane: np.ndarray


def extract_band(cube: HsCube, band_index: int) -> BandImage:
    """Return band ``band_index`` as a view onto the cube (no copy)."""
    if not _is_int(band_index) and not isinstance(band_index, np.integer):
        raise DataError(f"band index must be an integer, got {band_index!r}")
    if not 0 <= band_index < cube.bands:
        raise DataError(f"band index {band_index} out of range [0, {cube.bands})")
    return BandImage(
        int(band_index),
        float(cube.wavelengths_nm[band_index]),
        cube.data[:, :, band_index],
    )


def cube_stem(path: str | os.PathLike) -> Path:
    """Strip any known container suffix from ``path``."""
    p = Path(path)
    name = p.name
    for suffix in (HEADER_SUFFIX, PAYLOAD_SUFFIX, MASK_SUFFIX, BOXES_SUFFIX):
        if name.endswith(suffix):
            return p.with_name(name[: -len(suffix)])
    return p


def validate_header(header: Any) -> dict[str, Any]:
    """Check a parsed header dict and return it normalised.

    Raises DataError naming the first violated field.
    """
    if not isinstance(header, dict):
        raise DataError("header must be a JSON object")
    missing = _HEADER_KEYS - header.keys()
    if missing:
        raise DataError(f"header missing fields: {sorted(missing)}")
    extra = header.keys() - _HEADER_KEYS
    if extra:
        raise DataError(f"header has unknown fields: {sorted(extra)}")
    if not isinstance(header["cube_id"], str) or not header["cube_id"]:
        raise DataError("cube_id must be a non-empty string")
    for key in ("height", "width", "bands"):
        if not _is_int(header[key]) or header[key] < 1:
            raise DataError(f"{key} must be a positive integer, got {header[key]!r}")
    wl_raw = header["wavelengths_nm"]
    if not isinstance(wl_raw, list) or not all(
        isinstance(v, (int, float)) and not isinstance(v, bool) for v in wl_raw
    ):
        raise DataError("wavelengths_nm must be a list of numbers")
    wl = np.asarray(wl_raw, dtype=np.float64)
    _check_wavelengths(wl, header["bands"])
    capture_time = _parse_time(header["capture_time"])
    if not isinstance(header["payload"], str) or not header["payload"]:
        raise DataError("payload must be a relative file path")
    if os.path.isabs(header["payload"]):
        raise DataError("payload path must be relative to the header")
    if header["dtype"] != "f32le":
        raise DataError(f"unsupported dtype {header['dtype']!r}; expected 'f32le'")
    if header["order"] != "bsq":
        raise DataError(f"unsupported order {header['order']!r}; expected 'bsq'")
    out = dict(header)
    out["wavelengths_nm"] = wl
    out["capture_time"] = capture_time
    return out


def read_header(path: str | os.PathLike) -> dict[str, Any]:
    stem = cube_stem(path)
    header_path = stem.with_name(stem.name + HEADER_SUFFIX)
    try:
        text = header_path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"no cube header at {header_path}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed header JSON in {header_path}: {exc}") from exc
    header = validate_header(raw)
    header["_path"] = header_path
    return header


def read_cube(path: str | os.PathLike) -> HsCube:
    """Load a cube from its header (``.hsc.json``) or stem path."""
    header = read_header(path)
    payload_path = header["_path"].parent / header["payload"]
    h, w, b = header["height"], header["width"], header["bands"]
    expected = h * w * b * 4
    try:
        actual = payload_path.stat().st_size
    except FileNotFoundError:
        raise DataError(f"payload file {payload_path} not found") from None
    if actual != expected:
        raise DataError(
            f"payload size mismatch: {payload_path.name} has {actual} bytes, "
            f"header implies {expected} ({h}x{w}x{b} float32)"
        )
    flat = np.fromfile(payload_path, dtype="<f4")
    data = flat.astype(np.float32, copy=False).reshape(b, h, w).transpose(1, 2, 0)
    return HsCube(data, header["wavelengths_nm"], header["cube_id"], header["capture_time"])


def _header_dict(cube: HsCube, payload_name: str) -> dict[str, Any]:
    return {
        "cube_id": cube.cube_id,
        "height": cube.height,
        "width": cube.width,
        "bands": cube.bands,
        "wavelengths_nm": [float(v) for v in cube.wavelengths_nm],
        "capture_time": _format_time(cube.capture_time),
        "payload": payload_name,
        "dtype": "f32le",
        "order": "bsq",
    }


def write_cube(cube: HsCube, path: str | os.PathLike) -> Path:
    """Write ``cube`` as an HSC container; returns the header path."""
    if not np.all(np.isfinite(cube.data)):
        raise DataError(f"refusing to write cube {cube.cube_id!r} with non-finite values")
    stem = cube_stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    payload_name = stem.name + PAYLOAD_SUFFIX
    header_path = stem.with_name(stem.name + HEADER_SUFFIX)
    bsq = np.ascontiguousarray(cube.data.transpose(2, 0, 1), dtype="<f4")
    bsq.tofile(stem.with_name(payload_name))
    header = _header_dict(cube, payload_name)
    header_path.write_text(json.dumps(header, indent=1) + "\n", encoding="utf-8")
    return header_path


def write_annotations(ann: AnnotationSet, path: str | os.PathLike) -> Path:
    """Write mask PNG and boxes JSON next to ``path``; returns the JSON path."""
    stem = cube_stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(ann.id_mask, dtype=np.uint16)).save(
        stem.with_name(stem.name + MASK_SUFFIX)
    )
    sidecar = {
        "cube_id": ann.cube_id,
        "height": ann.height,
        "width": ann.width,
        "mask": stem.name + MASK_SUFFIX,
        "boxes": [b.to_dict() for b in ann.boxes],
    }
    boxes_path = stem.with_name(stem.name + BOXES_SUFFIX)
    boxes_path.write_text(json.dumps(sidecar, indent=1) + "\n", encoding="utf-8")
    return boxes_path


def read_annotations(
    path: str | os.PathLike, expected_shape: tuple[int, int] | None = None
) -> AnnotationSet:
    """Load annotations; ``expected_shape`` (H, W) is checked when given."""
    stem = cube_stem(path)
    boxes_path = stem.with_name(stem.name + BOXES_SUFFIX)
    try:
        sidecar = json.loads(boxes_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"no annotation sidecar at {boxes_path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed annotation JSON in {boxes_path}: {exc}") from exc
    if not isinstance(sidecar, dict):
        raise DataError(f"{boxes_path} must hold a JSON object")
    for key in ("cube_id", "height", "width", "mask", "boxes"):
        if key not in sidecar:
            raise DataError(f"{boxes_path} missing field {key!r}")
    if not isinstance(sidecar["boxes"], list):
        raise DataError(f"{boxes_path}: boxes must be a list")
    mask_path = boxes_path.parent / sidecar["mask"]
    try:
        with Image.open(mask_path) as im:
            mask = np.asarray(im)
    except FileNotFoundError:
        raise DataError(f"mask image {mask_path} not found") from None
    if mask.ndim != 2:
        raise DataError(f"mask {mask_path} must be single-channel")
    declared = (sidecar["height"], sidecar["width"])
    if mask.shape != declared:
        raise DataError(f"mask dimension mismatch: image is {mask.shape}, sidecar declares {declared}")
    if expected_shape is not None and tuple(expected_shape) != mask.shape:
        raise DataError(
            f"mask dimension mismatch: mask is {mask.shape}, cube is {tuple(expected_shape)}"
        )
    return AnnotationSet(sidecar["cube_id"], mask, [_box_from_dict(b) for b in sidecar["boxes"]])
