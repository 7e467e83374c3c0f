import numpy as np
import pytest

from cardiofat.atlas import (
    AtlasError,
    RoiSelection,
    build_atlas,
    crop_roi,
    load_atlas,
    save_atlas,
)


def _rand_crops(rng, k, shape=(6, 8)):
    return [(rng.random(shape) < 0.5).astype(np.uint8) for _ in range(k)]


def test_single_crop_atlas_equals_crop():
    crop = np.array([[1, 0], [0, 1]], dtype=np.uint8)
    atl = build_atlas([crop])
    assert np.array_equal(atl.p, crop.astype(float))


def test_complementary_crops_give_half():
    rng = np.random.default_rng(0)
    a = (rng.random((4, 4)) < 0.5).astype(np.uint8)
    atl = build_atlas([a, 1 - a])
    assert (atl.p == 0.5).all()


def test_two_of_three_hit():
    base = np.zeros((2, 2), dtype=np.uint8)
    c1, c2, c3 = base.copy(), base.copy(), base.copy()
    c1[0, 0] = c2[0, 0] = 1
    atl = build_atlas([c1, c2, c3])
    assert atl.p[0, 0] == pytest.approx(2 / 3)


def test_empty_sources_error():
    with pytest.raises(AtlasError):
        build_atlas([])


def test_shape_mismatch_error():
    with pytest.raises(AtlasError):
        build_atlas([np.zeros((2, 2)), np.zeros((2, 3))])


def test_permutation_invariance():
    rng = np.random.default_rng(1)
    crops = _rand_crops(rng, 5)
    a = build_atlas(crops)
    b = build_atlas(crops[::-1])
    assert a == b


def test_identical_crops_mean_is_crop():
    crop = (np.random.default_rng(2).random((5, 5)) < 0.5).astype(np.uint8)
    atl = build_atlas([crop] * 4)
    assert np.array_equal(atl.p, crop.astype(float))


def test_pixelwise_bounds():
    rng = np.random.default_rng(3)
    crops = _rand_crops(rng, 7)
    atl = build_atlas(crops)
    stack = np.stack(crops)
    assert (atl.p >= stack.min(axis=0)).all()
    assert (atl.p <= stack.max(axis=0)).all()


def test_values_are_multiples_of_one_over_k():
    rng = np.random.default_rng(4)
    crops = _rand_crops(rng, 6)
    atl = build_atlas(crops)
    scaled = atl.p * 6
    assert np.allclose(scaled, np.rint(scaled))


def test_atlas_immutable():
    atl = build_atlas([np.ones((2, 2), dtype=np.uint8)])
    with pytest.raises(ValueError):
        atl.hits[0, 0] = 5


def test_anchor_is_center():
    atl = build_atlas([np.zeros((4, 7), dtype=np.uint8)])
    assert atl.anchor == (3, 2)


def test_crop_roi_full_slice():
    s = np.arange(12, dtype=np.uint8).reshape(3, 4)
    roi = RoiSelection("p", 0, 0, 0, 4, 3)
    assert np.array_equal(crop_roi(s, roi), s)


def test_crop_roi_single_pixel():
    s = np.arange(12, dtype=np.uint8).reshape(3, 4)
    assert crop_roi(s, RoiSelection("p", 0, 2, 1, 1, 1))[0, 0] == s[1, 2]


def test_crop_roi_out_of_bounds():
    s = np.zeros((3, 4), dtype=np.uint8)
    with pytest.raises(AtlasError):
        crop_roi(s, RoiSelection("p", 0, 3, 0, 2, 2))


def test_atlas_file_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    atl = build_atlas(_rand_crops(rng, 9))
    path = tmp_path / "atlas.txt"
    save_atlas(path, atl)
    again = load_atlas(path)
    assert again == atl
