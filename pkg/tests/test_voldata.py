import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tinc3d.voldata import (
    EyeSeries,
    GeometryError,
    Label,
    ManifestError,
    VisitRecord,
    assign_labels,
    central_slab,
    glcm_contrast,
    load_manifest,
    load_visit,
    normalize_volume,
    read_volume,
    write_volume,
)


def _eye_entry(pid, eid, days, conv=None, shape=(2, 3, 4)):
    return {
        "patient_id": pid,
        "eye_id": eid,
        "study_length_months": 24,
        "conversion_month": conv,
        "visits": [{"visit_day": d, "volume_file": f"{pid}_{eid}_{d}.f32", "shape": list(shape)}
                   for d in days],
    }


def _write(tmp_path, eyes):
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps({"eyes": eyes}))
    return path


def test_manifest_counts(tmp_path):
    path = _write(tmp_path, [_eye_entry("p1", "OD", [0, 30, 90]),
                             _eye_entry("p2", "OS", [0, 100, 200], conv=5)])
    cohort = load_manifest(path)
    assert len(cohort.eyes) == 2
    assert cohort.n_scans == 6
    assert cohort.eyes[1].conversion_month == 5
    assert cohort.eyes[0].visits[1].visit_month == 1


def test_manifest_duplicate_key(tmp_path):
    path = _write(tmp_path, [_eye_entry("p1", "OD", [0, 30]), _eye_entry("p1", "OD", [0, 60])])
    with pytest.raises(ManifestError, match="duplicate"):
        load_manifest(path)


def test_manifest_non_increasing_days(tmp_path):
    path = _write(tmp_path, [_eye_entry("p7", "OS", [0, 30, 30])])
    with pytest.raises(ManifestError, match="p7/OS"):
        load_manifest(path)


def test_manifest_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_manifest(tmp_path / "nope.json")


def test_manifest_schema_violation(tmp_path):
    entry = _eye_entry("p1", "OD", [0, 30])
    del entry["visits"][1]["shape"]
    with pytest.raises(ManifestError, match="shape"):
        load_manifest(_write(tmp_path, [entry]))
    with pytest.raises(ManifestError, match="conversion_month"):
        load_manifest(_write(tmp_path, [_eye_entry("p1", "OD", [0, 30], conv=99)]))


def test_volume_roundtrip(tmp_path):
    vol = np.random.default_rng(0).random((2, 3, 4)).astype(np.float32)
    path = _write(tmp_path, [_eye_entry("p1", "OD", [0])])
    write_volume(tmp_path / "p1_OD_0.f32", vol)
    assert (tmp_path / "p1_OD_0.f32").stat().st_size == 2 * 3 * 4 * 4
    cohort = load_manifest(path)
    np.testing.assert_array_equal(load_visit(cohort.visits[0]), vol)
    with pytest.raises(ManifestError):
        read_volume(tmp_path / "p1_OD_0.f32", (2, 3, 5))


def test_normalize_examples():
    out = normalize_volume(np.array([[[10.0, 15.0, 20.0]]]))
    assert out[0, 0, 1] == pytest.approx(0.5)
    assert not normalize_volume(np.full((2, 2, 2), 7.0)).any()
    x = np.random.default_rng(1).random((3, 4, 5))
    x[0, 0, 0], x[0, 0, 1] = 0.0, 1.0
    np.testing.assert_allclose(normalize_volume(x), x, atol=1e-7)


@given(arrays(np.float64, (3, 4, 5), elements=st.floats(-1e3, 1e3)))
def test_normalize_range(raw):
    out = normalize_volume(raw)
    if raw.max() > raw.min():
        assert out.min() == 0.0 and out.max() == 1.0
    assert ((out >= 0) & (out <= 1)).all()


@pytest.mark.parametrize("n,count,lo", [(128, 32, 48), (32, 32, 0), (5, 2, 1)])
def test_central_slab(n, count, lo):
    vol = np.arange(n, dtype=np.float32)[:, None, None] * np.ones((1, 2, 2))
    out = central_slab(vol, count)
    np.testing.assert_array_equal(out[:, 0, 0], np.arange(lo, lo + count))


def test_central_slab_too_many():
    with pytest.raises(GeometryError):
        central_slab(np.zeros((4, 2, 2)), 5)


@given(st.integers(1, 40), st.data())
def test_central_slab_idempotent(n, data):
    k = data.draw(st.integers(1, n))
    vol = np.arange(n)[:, None, None]
    once = central_slab(vol, k)
    np.testing.assert_array_equal(central_slab(once, k), once)


def _eye(months, conv):
    visits = tuple(VisitRecord("p", "OD", 30 * m, "", (1, 1, 1)) for m in months)
    return EyeSeries("p", "OD", visits, 24, conv)


@pytest.mark.parametrize("conv,t,label", [
    (12, 8, Label.POSITIVE), (12, 3, Label.NEGATIVE), (12, 13, Label.EXCLUDED),
    (None, 5, Label.NEGATIVE), (12, 12, Label.POSITIVE), (12, 6, Label.POSITIVE),
    (12, 5, Label.NEGATIVE),
])
def test_assign_label_examples(conv, t, label):
    [scan] = assign_labels(_eye([t], conv))
    assert scan.label is label


def _glcm_oracle(img, levels, offset):
    di, dj = offset
    h, w = img.shape
    q = [[min(int(img[r][c] * levels), levels - 1) for c in range(w)] for r in range(h)]
    counts = {}
    total = 0
    for r in range(h):
        for c in range(w):
            r2, c2 = r + di, c + dj
            if 0 <= r2 < h and 0 <= c2 < w:
                key = (q[r][c], q[r2][c2])
                counts[key] = counts.get(key, 0) + 1
                total += 1
    return sum(n * (i - j) ** 2 for (i, j), n in counts.items()) / total


def test_glcm_constant_and_checkerboard():
    assert glcm_contrast(np.full((5, 6), 0.3), 8, (1, 1)) == 0.0
    board = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert glcm_contrast(board, 2, (0, 1)) == pytest.approx(1.0)


@pytest.mark.parametrize("offset", [(0, 1), (1, 0), (1, 1), (-1, 2), (2, -3), (0, -1)])
@pytest.mark.parametrize("levels", [2, 7, 256])
def test_glcm_matches_pair_count_oracle(offset, levels):
    img = np.random.default_rng(levels + 10 * abs(offset[1])).random((9, 11))
    assert glcm_contrast(img, levels, offset) == pytest.approx(
        _glcm_oracle(img, levels, offset), abs=1e-9)


@settings(max_examples=30)
@given(arrays(np.float64, (6, 7), elements=st.floats(0, 1)), st.integers(2, 16))
def test_glcm_property_oracle(img, levels):
    assert abs(glcm_contrast(img, levels, (1, 2)) - _glcm_oracle(img, levels, (1, 2))) < 1e-9


def test_glcm_shift_within_bins():
    # values sit at bin centers, so a small shift keeps every bin assignment
    q = np.random.default_rng(3).integers(0, 8, (10, 10))
    img = (q + 0.5) / 8
    assert glcm_contrast(img + 0.03, 8) == pytest.approx(glcm_contrast(img, 8), abs=1e-12)


def test_glcm_offset_too_large():
    with pytest.raises(GeometryError):
        glcm_contrast(np.zeros((3, 3)), 4, (0, 3))
