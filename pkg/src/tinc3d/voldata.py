"""Longitudinal cohort data model, manifest/volume I/O, preprocessing and labels.

A cohort lives on disk as one JSON manifest plus one raw float32 file per
visit. Volumes are plain ``float32`` numpy arrays shaped (S, H, W) with the
slice (B-scan) axis first.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Optional

import numpy as np

DAYS_PER_MONTH = 30


class ManifestError(ValueError):
    """Manifest does not match the schema or violates a cohort invariant."""


class GeometryError(ValueError):
    """Requested window/offset does not fit the array."""


@dataclass(frozen=True)
class VisitRecord:
    patient_id: str
    eye_id: str
    visit_day: int
    volume_path: str
    shape: tuple[int, int, int]

    @property
    def visit_month(self) -> int:
        return self.visit_day // DAYS_PER_MONTH


@dataclass(frozen=True)
class EyeSeries:
    patient_id: str
    eye_id: str
    visits: tuple[VisitRecord, ...]
    study_length_months: int
    conversion_month: Optional[int] = None

    @property
    def key(self) -> tuple[str, str]:
        return (self.patient_id, self.eye_id)


@dataclass
class Cohort:
    eyes: list[EyeSeries]
    manifest_path: str = ""

    @property
    def patients(self) -> list[str]:
        return sorted({e.patient_id for e in self.eyes})

    @property
    def visits(self) -> list[VisitRecord]:
        return [v for e in self.eyes for v in e.visits]

    @property
    def n_scans(self) -> int:
        return sum(len(e.visits) for e in self.eyes)

    def summary(self) -> dict:
        return {
            "patients": len(self.patients),
            "eyes": len(self.eyes),
            "scans": self.n_scans,
            "converters": sum(e.conversion_month is not None for e in self.eyes),
        }


class Label(str, Enum):
    NEGATIVE = "negative"
    POSITIVE = "positive"
    EXCLUDED = "excluded"


@dataclass(frozen=True)
class LabelledScan:
    visit: VisitRecord
    label: Label


# ---------------------------------------------------------------------------
# manifest


def _require(entry: dict, key: str, where: str):
    if key not in entry:
        raise ManifestError(f"{where}: missing key {key!r}")
    return entry[key]


def validate_eye(eye: EyeSeries) -> None:
    where = f"eye {eye.patient_id}/{eye.eye_id}"
    days = [v.visit_day for v in eye.visits]
    if any(d < 0 for d in days):
        raise ManifestError(f"{where}: negative visit_day in {days}")
    if any(b <= a for a, b in zip(days, days[1:])):
        raise ManifestError(f"{where}: visit days must be strictly increasing, got {days}")
    if eye.study_length_months < 0:
        raise ManifestError(f"{where}: negative study_length_months")
    c = eye.conversion_month
    if c is not None and not 0 <= c <= eye.study_length_months:
        raise ManifestError(f"{where}: conversion_month {c} outside "
                            f"[0, {eye.study_length_months}]")


def load_manifest(path) -> Cohort:
    """Read and validate a cohort manifest. Volume files are not opened."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("eyes"), list):
        raise ManifestError(f"{path}: top level must be an object with an 'eyes' list")

    root = path.parent
    eyes, seen = [], set()
    for i, entry in enumerate(doc["eyes"]):
        where = f"eyes[{i}]"
        if not isinstance(entry, dict):
            raise ManifestError(f"{where}: expected an object")
        pid = str(_require(entry, "patient_id", where))
        eid = str(_require(entry, "eye_id", where))
        where = f"{where} ({pid}/{eid})"
        if (pid, eid) in seen:
            raise ManifestError(f"{where}: duplicate (patient_id, eye_id)")
        seen.add((pid, eid))
        conv = _require(entry, "conversion_month", where)
        visits = []
        for j, v in enumerate(_require(entry, "visits", where)):
            vw = f"{where} visits[{j}]"
            shape = tuple(int(s) for s in _require(v, "shape", vw))
            if len(shape) != 3 or min(shape) < 1:
                raise ManifestError(f"{vw}: shape must be three positive integers, got {shape}")
            day = _require(v, "visit_day", vw)
            if not isinstance(day, int) or isinstance(day, bool):
                raise ManifestError(f"{vw}: visit_day must be an integer, got {day!r}")
            visits.append(VisitRecord(pid, eid, day,
                                      str(root / _require(v, "volume_file", vw)), shape))
        eye = EyeSeries(pid, eid, tuple(visits),
                        int(_require(entry, "study_length_months", where)),
                        None if conv is None else int(conv))
        validate_eye(eye)
        eyes.append(eye)
    return Cohort(eyes, str(path))


def write_manifest(cohort: Cohort, path) -> None:
    """Write ``cohort`` as a manifest; volume paths are stored relative to it."""
    path = Path(path)
    root = path.parent
    doc = {"eyes": [
        {
            "patient_id": e.patient_id,
            "eye_id": e.eye_id,
            "study_length_months": e.study_length_months,
            "conversion_month": e.conversion_month,
            "visits": [{"visit_day": v.visit_day,
                        "volume_file": os.path.relpath(v.volume_path, root),
                        "shape": list(v.shape)} for v in e.visits],
        }
        for e in cohort.eyes
    ]}
    path.write_text(json.dumps(doc, indent=1) + "\n")


def read_volume(path, shape) -> np.ndarray:
    shape = tuple(shape)
    data = np.fromfile(path, dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise ManifestError(f"{path}: expected {int(np.prod(shape))} float32 values "
                            f"for shape {shape}, found {data.size}")
    return data.reshape(shape).astype(np.float32, copy=False)


def write_volume(path, volume: np.ndarray) -> None:
    np.ascontiguousarray(volume, dtype="<f4").tofile(path)


def load_visit(visit: VisitRecord) -> np.ndarray:
    return read_volume(visit.volume_path, visit.shape)


# ---------------------------------------------------------------------------
# preprocessing


def normalize_volume(raw) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant input maps to all zeros."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        raise ValueError("cannot normalize an empty volume")
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return np.zeros(raw.shape, dtype=np.float32)
    return ((raw - lo) / (hi - lo)).astype(np.float32)


def central_slab(volume: np.ndarray, count: int) -> np.ndarray:
    """The ``count`` central slices; an odd remainder drops the extra high-index slice."""
    n = volume.shape[0]
    if not 1 <= count <= n:
        raise GeometryError(f"cannot take {count} central slices from a volume with {n}")
    start = (n - count) // 2
    return volume[start:start + count]


def flatten_retina(volume: np.ndarray) -> np.ndarray:
    """Placeholder for layer-based flattening; returns the input unchanged."""
    return volume


def preprocess(raw: np.ndarray, n_slices: Optional[int] = None,
               flatten: Callable[[np.ndarray], np.ndarray] = flatten_retina) -> np.ndarray:
    vol = flatten(np.asarray(raw))
    if n_slices is not None:
        vol = central_slab(vol, n_slices)
    return normalize_volume(vol)


# ---------------------------------------------------------------------------
# labels


def label_for(conversion_month: Optional[int], month: int, horizon_months: int = 6) -> Label:
    if conversion_month is None:
        return Label.NEGATIVE
    gap = conversion_month - month
    if gap < 0:
        return Label.EXCLUDED
    if gap <= horizon_months:
        return Label.POSITIVE
    return Label.NEGATIVE


def assign_labels(eye: EyeSeries, horizon_months: int = 6) -> list[LabelledScan]:
    """Conversion labels: positive if conversion happens within the horizon.

    Visits after the conversion month carry :attr:`Label.EXCLUDED`.
    """
    return [LabelledScan(v, label_for(eye.conversion_month, v.visit_month, horizon_months))
            for v in eye.visits]


# ---------------------------------------------------------------------------
# texture


def quantize(image: np.ndarray, levels: int) -> np.ndarray:
    q = np.floor(np.asarray(image, dtype=np.float64) * levels).astype(np.int64)
    return np.clip(q, 0, levels - 1)


def cooccurrence(image: np.ndarray, levels: int, offset=(0, 1)) -> np.ndarray:
    """Normalized gray-level co-occurrence matrix over ordered pixel pairs."""
    if levels < 2:
        raise ValueError("levels must be at least 2")
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"expected a 2D image, got shape {image.shape}")
    di, dj = offset
    h, w = image.shape
    if abs(di) >= h or abs(dj) >= w:
        raise GeometryError(f"offset {offset} does not fit a {h}x{w} image")
    q = quantize(image, levels)
    a = q[max(0, -di):h - max(0, di), max(0, -dj):w - max(0, dj)]
    b = q[max(0, di):h - max(0, -di) or None, max(0, dj):w - max(0, -dj) or None]
    counts = np.bincount((a * levels + b).ravel(), minlength=levels * levels)
    return counts.reshape(levels, levels) / counts.sum()


def glcm_contrast(image: np.ndarray, levels: int = 256, offset=(0, 1)) -> float:
    p = cooccurrence(image, levels, offset)
    i, j = np.indices(p.shape)
    return float(np.sum(p * (i - j) ** 2))


def volume_contrast(volume: np.ndarray, levels: int = 256, offset=(0, 1)) -> float:
    """Mean GLCM contrast over the slices of a volume."""
    return float(np.mean([glcm_contrast(s, levels, offset) for s in volume]))


def cohort_contrast(cohort: Cohort, levels: int = 256, offset=(0, 1)) -> float:
    """Mean slice contrast over every min-max normalized scan of a cohort."""
    if not cohort.visits:
        raise ValueError("cohort has no scans")
    return float(np.mean([volume_contrast(normalize_volume(load_visit(v)), levels, offset)
                          for v in cohort.visits]))
