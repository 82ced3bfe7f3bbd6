"""Intra-patient visit pairs and one-pair-per-patient batch sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations
from typing import Callable, Optional

import numpy as np

from .augment3d import AugmentConfig, View, derive_rng, make_view
from .voldata import Cohort, EyeSeries, VisitRecord, load_visit


class InsufficientPatientsError(ValueError):
    """Not enough patients with eligible pairs to fill a batch."""


@dataclass(frozen=True)
class SamplerConfig:
    dt_min_days: int = 90
    dt_max_days: int = 540
    batch_size: int = 32
    steps_per_epoch_mode: str = "per_patient"
    equalize_steps: bool = False

    def __post_init__(self):
        if not 0 < self.dt_min_days < self.dt_max_days:
            raise ValueError(f"need 0 < dt_min_days < dt_max_days, got "
                             f"{self.dt_min_days}, {self.dt_max_days}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.steps_per_epoch_mode not in ("per_patient", "per_image"):
            raise ValueError(f"unknown steps_per_epoch_mode {self.steps_per_epoch_mode!r}")


@dataclass(frozen=True)
class VisitPair:
    visit_a: VisitRecord
    visit_b: VisitRecord
    dt_days: int
    dt_norm: float


@dataclass
class PairBatch:
    views_a: list[View]
    views_b: list[View]
    dt_norm: np.ndarray
    patient_ids: list[str]
    pairs: list[VisitPair]

    def __len__(self):
        return len(self.patient_ids)

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.stack([v.voxels for v in self.views_a]),
                np.stack([v.voxels for v in self.views_b]))


def normalize_dt(dt_days, cfg: SamplerConfig):
    return (dt_days - cfg.dt_min_days) / (cfg.dt_max_days - cfg.dt_min_days)


def eligible_pairs(eye: EyeSeries, cfg: SamplerConfig) -> list[VisitPair]:
    """All unordered visit pairs of one eye whose gap lies within the day bounds."""
    out = []
    for a, b in combinations(eye.visits, 2):
        dt = abs(b.visit_day - a.visit_day)
        if cfg.dt_min_days <= dt <= cfg.dt_max_days:
            out.append(VisitPair(a, b, dt, float(normalize_dt(dt, cfg))))
    return out


def pairs_by_patient(cohort: Cohort, cfg: SamplerConfig) -> dict[str, list[VisitPair]]:
    """Eligible pairs pooled over each patient's eyes; patients without pairs are dropped."""
    pooled: dict[str, list[VisitPair]] = {}
    for eye in cohort.eyes:
        pooled.setdefault(eye.patient_id, []).extend(eligible_pairs(eye, cfg))
    return {pid: ps for pid, ps in sorted(pooled.items()) if ps}


def draw_pairs(pool: dict[str, list[VisitPair]], batch_size: int, rng) -> list[VisitPair]:
    patients = list(pool)
    if len(patients) < batch_size:
        raise InsufficientPatientsError(
            f"batch_size {batch_size} needs that many patients with eligible pairs; "
            f"only {len(patients)} available (short by {batch_size - len(patients)})")
    chosen = rng.choice(len(patients), size=batch_size, replace=False)
    return [pool[patients[i]][int(rng.integers(len(pool[patients[i]])))] for i in chosen]


VolumeLoader = Callable[[VisitRecord], np.ndarray]


def sample_batch(cohort: Cohort, cfg: SamplerConfig, aug_cfg: AugmentConfig, rng,
                 loader: VolumeLoader = load_visit, view_seed: Optional[int] = None,
                 pool: Optional[dict[str, list[VisitPair]]] = None) -> PairBatch:
    """Draw ``batch_size`` distinct patients and one eligible pair for each.

    Each of the two volumes is augmented with its own generator. When
    ``view_seed`` is given, those generators are derived from
    ``(view_seed, patient_id, visit_day, view_index)`` so that views do not
    depend on the order in which they are materialized.
    """
    if pool is None:
        pool = pairs_by_patient(cohort, cfg)
    pairs = draw_pairs(pool, cfg.batch_size, rng)
    views_a, views_b = [], []
    for pair in pairs:
        for view_index, (visit, dest) in enumerate(((pair.visit_a, views_a),
                                                     (pair.visit_b, views_b))):
            if view_seed is None:
                vrng = rng
            else:
                vrng = derive_rng(view_seed, visit.patient_id, visit.eye_id,
                                  visit.visit_day, view_index)
            dest.append(make_view(loader(visit), aug_cfg, vrng))
    return PairBatch(views_a, views_b, np.array([p.dt_norm for p in pairs]),
                     [p.visit_a.patient_id for p in pairs], pairs)


def steps_per_epoch(cohort: Cohort, cfg: SamplerConfig, mode: Optional[str] = None) -> int:
    mode = mode or cfg.steps_per_epoch_mode
    if not cohort.eyes:
        raise ValueError("empty cohort")
    if mode == "per_patient":
        return math.ceil(len(pairs_by_patient(cohort, cfg)) / cfg.batch_size)
    if mode == "per_image":
        return math.ceil(cohort.n_scans / cfg.batch_size)
    raise ValueError(f"unknown mode {mode!r}")


def resampling_factor(cohort: Cohort, cfg: SamplerConfig) -> int:
    """round(#scans / #eligible patients): pairs drawn per patient per epoch to
    approach the per-image budget."""
    n_patients = len(pairs_by_patient(cohort, cfg))
    return max(1, round(cohort.n_scans / max(n_patients, 1)))


def training_steps_per_epoch(cohort: Cohort, cfg: SamplerConfig) -> int:
    """Optimizer steps per pretraining epoch.

    With ``equalize_steps`` a per-patient epoch is resampled until it matches
    the per-image step count exactly, so methods compared under the two epoch
    conventions get the same number of updates.
    """
    if cfg.equalize_steps:
        return steps_per_epoch(cohort, cfg, "per_image")
    return steps_per_epoch(cohort, cfg)
