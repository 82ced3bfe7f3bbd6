import numpy as np
import pytest

from tinc3d.augment3d import AugmentConfig
from tinc3d.pairs import (
    InsufficientPatientsError,
    SamplerConfig,
    draw_pairs,
    eligible_pairs,
    normalize_dt,
    pairs_by_patient,
    resampling_factor,
    sample_batch,
    steps_per_epoch,
    training_steps_per_epoch,
)
from tinc3d.voldata import Cohort, EyeSeries, VisitRecord

CFG = SamplerConfig()


def make_eye(pid, days, eye="OD"):
    return EyeSeries(pid, eye, tuple(VisitRecord(pid, eye, d, "", (2, 8, 8)) for d in days), 24)


def make_cohort(n_patients, days=(0, 100, 250, 400, 600)):
    return Cohort([make_eye(f"p{i:03d}", days) for i in range(n_patients)])


def test_eligible_pairs_examples():
    # (0, 600) is out of bounds; (90, 600) spans 510 days and stays eligible
    pairs = eligible_pairs(make_eye("a", [0, 90, 600]), CFG)
    got = {(p.visit_a.visit_day, p.visit_b.visit_day): p.dt_norm for p in pairs}
    assert got == {(0, 90): 0.0, (90, 600): pytest.approx(420 / 450)}
    [pair] = eligible_pairs(make_eye("a", [0, 540]), CFG)
    assert pair.dt_norm == 1.0
    [pair] = eligible_pairs(make_eye("a", [0, 315]), CFG)
    assert pair.dt_norm == 0.5
    assert eligible_pairs(make_eye("a", [0, 60]), CFG) == []


def test_dt_norm_monotone_and_bounds():
    days = np.arange(90, 541)
    norm = normalize_dt(days, CFG)
    assert norm[0] == 0.0 and norm[-1] == 1.0
    assert np.all(np.diff(norm) > 0)


def test_pairs_stay_within_one_eye():
    cohort = Cohort([make_eye("p", [0, 100], "OD"), make_eye("p", [0, 200], "OS")])
    pool = pairs_by_patient(cohort, CFG)
    assert len(pool["p"]) == 2
    for pair in pool["p"]:
        assert pair.visit_a.eye_id == pair.visit_b.eye_id


def _loader(visit):
    return np.full(visit.shape, visit.visit_day / 1000, np.float32)


TINY_AUG = AugmentConfig(output_shape=(2, 8, 8), blur_kernel=3)


def test_sample_batch_distinct_patients():
    cohort = make_cohort(10)
    cfg = SamplerConfig(batch_size=4)
    batch = sample_batch(cohort, cfg, TINY_AUG, np.random.default_rng(0), loader=_loader)
    assert len(set(batch.patient_ids)) == 4
    a, b = batch.stacked()
    assert a.shape == b.shape == (4, 2, 8, 8)


def test_sample_batch_insufficient():
    with pytest.raises(InsufficientPatientsError, match="short by 1"):
        sample_batch(make_cohort(3), SamplerConfig(batch_size=4), TINY_AUG,
                     np.random.default_rng(0), loader=_loader)


def test_sample_batch_view_seed_is_order_independent():
    cohort = make_cohort(6)
    cfg = SamplerConfig(batch_size=3)
    b1 = sample_batch(cohort, cfg, TINY_AUG, np.random.default_rng(5), loader=_loader, view_seed=9)
    b2 = sample_batch(cohort, cfg, TINY_AUG, np.random.default_rng(5), loader=_loader, view_seed=9)
    assert b1.stacked()[0].tobytes() == b2.stacked()[0].tobytes()
    assert [v.applied_ops for v in b1.views_b] == [v.applied_ops for v in b2.views_b]


def test_many_batches_no_collisions():
    cohort = make_cohort(40)
    pool = pairs_by_patient(cohort, CFG)
    rng = np.random.default_rng(1)
    for _ in range(1000):
        pairs = draw_pairs(pool, 32, rng)
        assert len({p.visit_a.patient_id for p in pairs}) == 32
        for p in pairs:
            assert 90 <= p.dt_days <= 540 and 0 <= p.dt_norm <= 1


def test_patient_frequency_uniform():
    cohort = make_cohort(10)
    pool = pairs_by_patient(cohort, CFG)
    rng = np.random.default_rng(2)
    n_batches, k = 3000, 4
    counts = dict.fromkeys(pool, 0)
    for _ in range(n_batches):
        for p in draw_pairs(pool, k, rng):
            counts[p.visit_a.patient_id] += 1
    p = k / len(pool)
    mean, sd = n_batches * p, np.sqrt(n_batches * p * (1 - p))
    assert all(abs(c - mean) < 3 * sd for c in counts.values())


def test_steps_per_epoch():
    big = Cohort([make_eye(f"p{i}", [0, 100]) for i in range(463)])
    assert steps_per_epoch(big, SamplerConfig(batch_size=32)) == 15
    scans = Cohort([make_eye(f"p{i}", list(range(0, 30 * 22, 30))) for i in range(459)]
                   + [make_eye("extra", list(range(0, 30 * 10, 30)))])
    assert scans.n_scans == 10108
    assert steps_per_epoch(scans, SamplerConfig(batch_size=32, steps_per_epoch_mode="per_image")) == 316
    assert steps_per_epoch(make_cohort(1), SamplerConfig(batch_size=1)) == 1


def test_equalized_steps_match_per_image_budget():
    cohort = Cohort([make_eye(f"p{i}", [0, 100, 200, 300, 400, 500, 600][: 3 + i % 5])
                     for i in range(37)])
    cfg = SamplerConfig(batch_size=8, equalize_steps=True)
    per_image = steps_per_epoch(cohort, cfg, "per_image")
    assert training_steps_per_epoch(cohort, cfg) == per_image
    assert training_steps_per_epoch(cohort, SamplerConfig(batch_size=8)) == 5
    assert resampling_factor(cohort, cfg) == round(cohort.n_scans / 37)
