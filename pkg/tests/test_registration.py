import math

import numpy as np
import pytest

from cardiofat.atlas import build_atlas
from cardiofat.imaging import binarize
from cardiofat.registration import (
    EmptyHistogramError,
    RangeError,
    RegistrationResult,
    UnconfirmedRegistrationError,
    align_patient,
    confirm_position,
    find_retrosternal,
    joint_histogram,
    quantize,
    select_registration_slice,
    translate,
    wmi,
    wmi_score_grid,
)


def hand_wmi(counts, g=2.0):
    """Independent brute-force oracle: direct summation over nonzero cells."""
    counts = np.asarray(counts, dtype=float)
    total = counts.sum()
    pf = counts.sum(axis=1) / total
    pm = counts.sum(axis=0) / total
    s = 0.0
    for f in range(counts.shape[0]):
        for m in range(counts.shape[1]):
            c = counts[f, m]
            if c == 0:
                continue
            p = c / total
            s += (1.0 / (abs(f - m) + 1)) * p * math.log(p / (pf[f] * pm[m]), g)
    return s


# ---------------------------------------------------------------------------
# quantize


def test_quantize_endpoints():
    assert quantize(np.array([0.0]), 0, 1, 32)[0] == 0
    assert quantize(np.array([1.0]), 0, 1, 32)[0] == 31  # clamp
    assert quantize(np.array([0.5]), 0, 1, 32)[0] == 16


def test_quantize_invalid_range():
    with pytest.raises(RangeError):
        quantize(np.array([1.0]), 5, 5, 4)


# ---------------------------------------------------------------------------
# joint histogram


def test_joint_histogram_identity_diagonal():
    img = np.random.default_rng(0).integers(0, 8, size=(10, 10))
    h = joint_histogram(img, img, 8)
    assert h.sum() == 100
    assert np.array_equal(np.nonzero(h)[0], np.nonzero(h)[1])


def test_joint_histogram_direct_tally():
    h = joint_histogram(np.array([[0, 1]]), np.array([[1, 0]]), 2)
    assert h[0, 1] == 1 and h[1, 0] == 1 and h.sum() == 2


def test_joint_histogram_four_pixels():
    fixed = np.array([[0, 0], [1, 0]])
    moving = np.array([[0, 0], [1, 1]])
    h = joint_histogram(fixed, moving, 2)
    assert h[0, 0] == 2 and h[1, 1] == 1 and h[0, 1] == 1


def test_joint_histogram_shape_mismatch():
    with pytest.raises(RangeError):
        joint_histogram(np.zeros((2, 2)), np.zeros((2, 3)), 4)


# ---------------------------------------------------------------------------
# wmi


def test_wmi_independent_uniform_is_zero():
    assert wmi(np.array([[1, 1], [1, 1]]), 2.0) == pytest.approx(0.0, abs=1e-12)


def test_wmi_diagonal_equals_entropy():
    assert wmi(np.array([[2, 0], [0, 2]]), 2.0) == pytest.approx(1.0, abs=1e-12)


def test_wmi_hand_value():
    counts = np.array([[2, 1], [0, 1]])
    assert hand_wmi(counts) == pytest.approx(0.3844, abs=1e-4)
    assert wmi(counts, 2.0) == pytest.approx(hand_wmi(counts), abs=1e-9)


def test_wmi_empty_histogram():
    with pytest.raises(EmptyHistogramError):
        wmi(np.zeros((4, 4)), 2.0)


def test_wmi_self_identity_random():
    rng = np.random.default_rng(1)
    for _ in range(50):
        img = rng.integers(0, 16, size=(12, 12))
        h = joint_histogram(img, img, 16)
        p = np.bincount(img.ravel(), minlength=16) / img.size
        entropy = float(-(p[p > 0] * np.log2(p[p > 0])).sum())
        assert wmi(h, 2.0) == pytest.approx(entropy, abs=1e-9)


def test_wmi_factorizing_joint_is_zero():
    rng = np.random.default_rng(2)
    for _ in range(20):
        a = rng.integers(1, 5, size=4)
        b = rng.integers(1, 5, size=4)
        assert abs(wmi(np.outer(a, b), 2.0)) < 1e-12


def test_wmi_terms_bounded_by_unweighted():
    rng = np.random.default_rng(3)
    for _ in range(20):
        counts = rng.integers(0, 6, size=(6, 6))
        counts[0, 0] += 1
        # per-term magnitude of the weighted sum never exceeds unweighted MI terms
        total = counts.sum()
        p = counts / total
        pf, pm = p.sum(axis=1), p.sum(axis=0)
        f, m = np.nonzero(p)
        pj = p[f, m]
        raw = pj * np.log2(pj / (pf[f] * pm[m]))
        weighted = raw / (np.abs(f - m) + 1)
        assert (np.abs(weighted) <= np.abs(raw) + 1e-15).all()


# ---------------------------------------------------------------------------
# search


def _planted_scene(rng, slice_shape=(48, 48), atlas_shape=(10, 6)):
    ah, aw = atlas_shape
    pattern = (rng.random(atlas_shape) < 0.5).astype(np.uint8)
    pattern[0, 0] = 1
    atl = build_atlas([pattern])
    sl = np.zeros(slice_shape, dtype=np.uint8)
    x0 = int(rng.integers(0, slice_shape[1] - aw + 1))
    y0 = int(rng.integers(0, max(1, int(0.6 * slice_shape[0]) - ah)))
    sl[y0 : y0 + ah, x0 : x0 + aw] = pattern * 200
    return sl, atl, (x0, y0)


def test_find_recovers_planted_atlas_many_trials():
    rng = np.random.default_rng(4)
    for _ in range(100):
        sl, atl, pos = _planted_scene(rng)
        res = find_retrosternal(sl, atl)
        assert res.position == pos
        assert res.score >= res.second_best_score


def test_score_grid_matches_bruteforce_oracle():
    rng = np.random.default_rng(5)
    sl = rng.integers(0, 256, size=(20, 22)).astype(np.uint8)
    pattern = (rng.random((6, 5)) < 0.5).astype(np.uint8)
    atl = build_atlas([pattern])
    grid = wmi_score_grid(sl, atl, n_bins=16)
    fixed_bins = quantize(sl, 0, 256, 16)
    atlas_bins = quantize(atl.p, 0.0, 1.0, 16)
    for y in range(grid.shape[0]):
        for x in range(grid.shape[1]):
            h = joint_histogram(
                fixed_bins[y : y + 6, x : x + 5], atlas_bins, 16
            )
            assert grid[y, x] == pytest.approx(wmi(h, 2.0), abs=1e-9)


def test_atlas_size_equals_slice():
    rng = np.random.default_rng(6)
    sl = rng.integers(1, 256, size=(8, 8)).astype(np.uint8)
    atl = build_atlas([binarize(sl)])
    res = find_retrosternal(sl, atl)
    assert res.position == (0, 0)
    assert res.second_best_score == float("-inf")


def test_constant_slice_tie_break_and_rejection():
    sl = np.full((20, 20), 128, dtype=np.uint8)
    atl = build_atlas([np.ones((4, 4), dtype=np.uint8)])
    res = find_retrosternal(sl, atl)
    assert res.position == (0, 0)
    assert not confirm_position(res, sl, atl)
    assert not res.confirmed


def test_atlas_larger_than_slice():
    atl = build_atlas([np.ones((10, 10), dtype=np.uint8)])
    with pytest.raises(RangeError):
        find_retrosternal(np.zeros((4, 4), dtype=np.uint8), atl)


def test_confirm_planted_true():
    rng = np.random.default_rng(7)
    sl, atl, pos = _planted_scene(rng)
    res = find_retrosternal(sl, atl)
    assert confirm_position(res, sl, atl)


def test_confirm_rejects_bottom_band():
    rng = np.random.default_rng(8)
    ah, aw = 8, 6
    pattern = (rng.random((ah, aw)) < 0.5).astype(np.uint8)
    atl = build_atlas([pattern])
    sl = np.zeros((64, 32), dtype=np.uint8)
    sl[54 : 54 + ah, 10 : 10 + aw] = pattern * 200  # bottom ~10%
    res = find_retrosternal(sl, atl)
    assert res.position == (10, 54)
    assert not confirm_position(res, sl, atl)


# ---------------------------------------------------------------------------
# alignment


def test_align_identity():
    sl = np.random.default_rng(9).integers(0, 256, size=(6, 6)).astype(np.uint8)
    res = RegistrationResult("p", (0, 0), 1.0, 0.0, True, (0, 0))
    out = align_patient([sl], res, (0, 0))
    assert np.array_equal(out[0], sl)


def test_align_single_pixel():
    sl = np.zeros((20, 20), dtype=np.uint8)
    sl[10, 10] = 7
    res = RegistrationResult("p", (0, 0), 1.0, 0.0, True, (3, -2))
    out = align_patient([sl], res, (0, 0))
    assert out[0][8, 13] == 7
    assert out[0].sum() == 7


def test_align_discards_past_border():
    sl = np.zeros((4, 4), dtype=np.uint8)
    sl[0, 3] = 9
    out = translate(sl, 2, 0)
    assert out.sum() == 0


def test_align_unconfirmed_raises():
    res = RegistrationResult("p", (0, 0), 1.0, 0.0, False, (1, 1))
    with pytest.raises(UnconfirmedRegistrationError):
        align_patient([np.zeros((2, 2), dtype=np.uint8)], res, (0, 0))
    align_patient([np.zeros((2, 2), dtype=np.uint8)], res, (0, 0), force=True)


def test_align_roundtrip_restores_interior():
    rng = np.random.default_rng(10)
    sl = rng.integers(0, 256, size=(16, 16)).astype(np.uint8)
    moved = translate(translate(sl, 3, -2), -3, 2)
    inner = sl[2:14, 0:13]
    assert np.array_equal(moved[2:14, 0:13], inner)


def test_same_translation_applied_to_all_slices():
    rng = np.random.default_rng(11)
    slices = [rng.integers(0, 256, size=(8, 8)).astype(np.uint8) for _ in range(4)]
    res = RegistrationResult("p", (1, 1), 1.0, 0.0, True, (2, 1))
    out = align_patient(slices, res, (0, 0))
    for before, after in zip(slices, out):
        assert np.array_equal(after, translate(before, 2, 1))


def test_select_registration_slice():
    empty = np.zeros((8, 8), dtype=np.uint8)
    busy = np.full((8, 8), 9, dtype=np.uint8)
    assert select_registration_slice([empty, busy, empty, empty]) == 1
    assert select_registration_slice([empty, busy, empty], z=2) == 2
    with pytest.raises(RangeError):
        select_registration_slice([empty], z=5)


def test_record_roundtrip():
    res = RegistrationResult("pat7", (12, 34), 0.125, -0.5, True, (-3, 4))
    again = RegistrationResult.from_record(res.to_record())
    assert again == res
