"""Synthetic longitudinal cohorts with a monotone latent severity process.

Every patient gets one eye with a layered background, a fixed multiplicative
speckle field and a centered lesion whose radius and brightness grow with a
non-decreasing severity trace. Converters cross ``conversion_threshold`` at a
sampled visit; their ``conversion_month`` is the month of the first visit at
or above the threshold.

The rendering is pointwise non-decreasing in severity, so any fixed region of
a patient's volumes can only get brighter from one visit to the next.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .voldata import (
    DAYS_PER_MONTH,
    Cohort,
    EyeSeries,
    VisitRecord,
    write_manifest,
    write_volume,
)

MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int = 200
    visits_per_patient: tuple[int, int] = (8, 12)
    visit_interval_days: tuple[int, int] = (30, 90)
    volume_shape: tuple[int, int, int] = (16, 64, 64)
    converter_fraction: float = 0.25
    severity_rate: tuple[float, float] = (0.02, 0.08)
    initial_severity: tuple[float, float] = (0.0, 0.4)
    non_converter_max_severity: float = 0.8
    conversion_threshold: float = 1.0
    noise_level: float = 0.2
    seed: int = 0

    def __post_init__(self):
        for name in ("visits_per_patient", "visit_interval_days", "volume_shape",
                     "severity_rate", "initial_severity"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.n_patients < 1:
            raise ValueError("n_patients must be positive")
        if not 0 <= self.converter_fraction <= 1:
            raise ValueError("converter_fraction must lie in [0, 1]")
        lo, hi = self.visits_per_patient
        if not 1 <= lo <= hi:
            raise ValueError(f"invalid visits_per_patient {self.visits_per_patient}")
        lo, hi = self.visit_interval_days
        if not 1 <= lo <= hi:
            raise ValueError(f"invalid visit_interval_days {self.visit_interval_days}")
        for name in ("severity_rate", "initial_severity"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise ValueError(f"invalid {name} {(lo, hi)}")
        if self.initial_severity[1] >= self.non_converter_max_severity:
            raise ValueError("initial_severity must stay below non_converter_max_severity")
        if not 0 < self.non_converter_max_severity < self.conversion_threshold:
            raise ValueError("need 0 < non_converter_max_severity < conversion_threshold")
        if self.noise_level < 0 or self.noise_level >= 1:
            raise ValueError("noise_level must lie in [0, 1)")
        if len(self.volume_shape) != 3 or min(self.volume_shape) < 4:
            raise ValueError(f"invalid volume_shape {self.volume_shape}")


@dataclass(frozen=True)
class PatientPlan:
    patient_id: str
    days: tuple[int, ...]
    severity: tuple[float, ...]
    conversion_month: Optional[int]
    crossing_day: Optional[float]


def patient_seed(cfg: SynthConfig, index: int) -> int:
    return int(np.random.SeedSequence([cfg.seed, index]).generate_state(1)[0])


def _plan(seed: int, cfg: SynthConfig, patient_id: str = "") -> PatientPlan:
    rng = np.random.default_rng(seed)
    n = int(rng.integers(cfg.visits_per_patient[0], cfg.visits_per_patient[1] + 1))
    gaps = rng.integers(cfg.visit_interval_days[0], cfg.visit_interval_days[1] + 1, size=n - 1)
    days = np.concatenate([[0], np.cumsum(gaps)]).astype(int)
    rates = rng.uniform(*cfg.severity_rate, size=n - 1)  # per month
    increments = rates * gaps / DAYS_PER_MONTH
    growth = np.concatenate([[0.0], np.cumsum(increments)])
    wants_conversion = rng.random() < cfg.converter_fraction
    s0 = rng.uniform(*cfg.initial_severity)
    thr = cfg.conversion_threshold
    crossing_visit = None
    if wants_conversion and n >= 3 and growth[-1] > 0:
        k = int(rng.integers(2, n))
        # choose s0 so the trace crosses thr strictly inside (day[k-1], day[k]]
        frac = rng.uniform(0.05, 1.0)
        target = growth[k - 1] + frac * (growth[k] - growth[k - 1])
        if growth[k] > growth[k - 1]:
            s0 = thr - target
            crossing_visit = k
    if crossing_visit is None:
        cap = cfg.non_converter_max_severity
        if s0 + growth[-1] > cap:
            growth = growth * (cap - s0) / growth[-1]
    severity = np.maximum(s0 + growth, 0.0)
    conv_month, crossing_day = None, None
    if crossing_visit is not None:
        k = crossing_visit
        conv_month = int(days[k] // DAYS_PER_MONTH)
        lo, hi = s0 + growth[k - 1], s0 + growth[k]
        crossing_day = float(days[k - 1] + (thr - lo) / (hi - lo) * (days[k] - days[k - 1]))
    return PatientPlan(patient_id, tuple(int(d) for d in days),
                       tuple(float(s) for s in severity), conv_month, crossing_day)


def severity_trace(seed: int, cfg: SynthConfig) -> list[tuple[int, float]]:
    """The (visit_day, severity) trace :func:`generate_cohort` renders for ``seed``."""
    plan = _plan(seed, cfg)
    return list(zip(plan.days, plan.severity))


# ---------------------------------------------------------------------------
# rendering


@dataclass(frozen=True)
class Anatomy:
    depth: float          # axial position of the lesion-bearing layer, in rows
    curvature: float
    layer_offsets: tuple[float, ...]
    layer_widths: tuple[float, ...]
    layer_levels: tuple[float, ...]
    gain: float
    speckle: np.ndarray   # multiplicative field, fixed per patient


def sample_anatomy(rng, shape, noise_level: float) -> Anatomy:
    s, h, w = shape
    n_layers = 4
    return Anatomy(
        depth=float(rng.uniform(0.45, 0.6) * h),
        curvature=float(rng.uniform(-1.0, 1.0) * 0.15 * h / (w / 2) ** 2),
        layer_offsets=tuple(float(v) for v in np.sort(rng.uniform(-0.35, 0.1, n_layers)) * h),
        layer_widths=tuple(float(v) for v in rng.uniform(0.02, 0.06, n_layers) * h),
        layer_levels=tuple(float(v) for v in rng.uniform(0.15, 0.45, n_layers)),
        gain=float(rng.uniform(0.85, 1.15)),
        speckle=(1.0 + noise_level * rng.uniform(-1.0, 1.0, shape)).astype(np.float32),
    )


def lesion_size(severity: float, thr: float, shape) -> tuple[float, float]:
    """(in-plane radius in pixels, peak brightness) for a severity level."""
    x = min(max(severity, 0.0) / thr, 1.5) / 1.5
    return (0.04 + 0.16 * x) * shape[2], 0.15 + 0.45 * x


def render_volume(anatomy: Anatomy, severity: float, shape, thr: float = 1.0) -> np.ndarray:
    s, h, w = shape
    z = np.arange(s)[:, None, None]
    y = np.arange(h)[None, :, None]
    x = np.arange(w)[None, None, :]
    surface = anatomy.depth + anatomy.curvature * (x - (w - 1) / 2) ** 2
    bg = np.full((s, h, w), 0.05)
    for off, width, level in zip(anatomy.layer_offsets, anatomy.layer_widths,
                                 anatomy.layer_levels):
        bg = bg + level * np.exp(-0.5 * ((y - surface - off) / width) ** 2)
    bg = bg + 0.5 * np.exp(-0.5 * ((y - surface) / (0.03 * h)) ** 2)

    radius, peak = lesion_size(severity, thr, shape)
    # ellipsoid centred on the layer at the middle of the scan; slices are
    # spaced further apart than in-plane pixels
    dz = (z - (s - 1) / 2) * (w / s) * 0.5
    dy = (y - (surface - 0.6 * radius)) * 1.5
    dx = x - (w - 1) / 2
    dist = np.sqrt(dz ** 2 + dy ** 2 + dx ** 2)
    lesion = peak * np.clip((radius - dist) / 2.0 + 0.5, 0.0, 1.0)

    vol = (bg + lesion) * anatomy.gain * anatomy.speckle
    return np.clip(vol, 0.0, 1.0).astype(np.float32)


def lesion_region(shape, thr: float = 1.0) -> tuple[slice, slice, slice]:
    """A box around the volume centre that contains the lesion core."""
    s, h, w = shape
    r = int(lesion_size(thr, thr, shape)[0])
    return (slice(s // 2 - 1, s // 2 + 1), slice(0, h), slice(w // 2 - r, w // 2 + r))


# ---------------------------------------------------------------------------


def plan_cohort(cfg: SynthConfig) -> list[PatientPlan]:
    width = max(3, len(str(cfg.n_patients - 1)))
    return [_plan(patient_seed(cfg, i), cfg, f"P{i:0{width}d}") for i in range(cfg.n_patients)]


def generate_cohort(cfg: SynthConfig, out_dir) -> Cohort:
    """Write ``manifest.json`` plus one raw float32 volume per visit into ``out_dir``."""
    out_dir = Path(out_dir)
    vol_dir = out_dir / "volumes"
    try:
        vol_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write cohort to {out_dir}: {exc}") from exc
    eyes = []
    for i, plan in enumerate(plan_cohort(cfg)):
        rng = np.random.default_rng([patient_seed(cfg, i), 1])
        anatomy = sample_anatomy(rng, cfg.volume_shape, cfg.noise_level)
        visits = []
        for day, sev in zip(plan.days, plan.severity):
            path = vol_dir / f"{plan.patient_id}_OD_{day:05d}.f32"
            write_volume(path, render_volume(anatomy, sev, cfg.volume_shape,
                                             cfg.conversion_threshold))
            visits.append(VisitRecord(plan.patient_id, "OD", day, str(path), cfg.volume_shape))
        study_months = max(math.ceil(plan.days[-1] / DAYS_PER_MONTH), 1)
        eyes.append(EyeSeries(plan.patient_id, "OD", tuple(visits), study_months,
                              plan.conversion_month))
    manifest = out_dir / MANIFEST_NAME
    cohort = Cohort(eyes, str(manifest))
    write_manifest(cohort, manifest)
    return cohort
