import numpy as np
import pytest

from cardiofat import labels as L
from cardiofat.imaging import FAT_HU_HI, FAT_HU_LO, window_to_fat_range
from cardiofat.phantom import (
    EPI_HU,
    MEDI_HU,
    PERI_HU,
    PhantomSpec,
    PhantomSpecError,
    generate_phantom,
    retrosternal_pattern,
)


def test_deterministic_per_seed():
    a, ta, _ = generate_phantom(PhantomSpec(seed=3, noise_hu=10.0))
    b, tb, _ = generate_phantom(PhantomSpec(seed=3, noise_hu=10.0))
    c, _, _ = generate_phantom(PhantomSpec(seed=4, noise_hu=10.0))
    for sa, sb in zip(a.slices, b.slices):
        assert np.array_equal(sa, sb)
    for sa, sb in zip(ta, tb):
        assert np.array_equal(sa, sb)
    assert not np.array_equal(a.slices[0], c.slices[0])


def test_shape_and_patient_id():
    vol, truths, pos = generate_phantom(PhantomSpec(seed=12, n_slices=3, size=64,
                                                    center=(32, 40),
                                                    r_inner=6, r_epi=10,
                                                    r_peri=11, r_medi=20,
                                                    pattern_offset=(10, 4),
                                                    pattern_size=(12, 6)))
    assert vol.patient_id == "phantom0012"
    assert len(vol.slices) == 3
    assert vol.slices[0].shape == (64, 64)
    assert pos == (10, 4)


def test_window_foreground_equals_truth_foreground():
    vol, truths, _ = generate_phantom(PhantomSpec(seed=1))
    for hu, truth in zip(vol.slices, truths):
        grey = window_to_fat_range(hu)
        assert np.array_equal(grey > 0, truth > 0)


def test_hu_subranges_are_disjoint_and_inside_window():
    bands = sorted([EPI_HU, PERI_HU, MEDI_HU])
    for (lo, hi), (lo2, _) in zip(bands, bands[1:]):
        assert hi < lo2
    for lo, hi in bands:
        assert FAT_HU_LO + 20 <= lo and hi <= FAT_HU_HI - 20


def test_noise_keeps_classes_inside_window():
    vol, truths, _ = generate_phantom(PhantomSpec(seed=2, noise_hu=20.0))
    for hu, truth in zip(vol.slices, truths):
        fat = truth > 0
        assert hu[fat].min() >= FAT_HU_LO
        assert hu[fat].max() <= FAT_HU_HI
        assert (hu[~fat] < FAT_HU_LO).all() | (hu[~fat] > FAT_HU_HI).all() or (
            ((hu[~fat] < FAT_HU_LO) | (hu[~fat] > FAT_HU_HI)).all()
        )


def test_truth_bands_by_radius():
    spec = PhantomSpec(seed=5)
    _, truths, _ = generate_phantom(spec)
    truth = truths[0]
    cx, cy = spec.center
    yy, xx = np.indices(truth.shape)
    r = np.hypot(xx - cx, yy - cy)
    ring = (r >= spec.r_inner + 1) & (r < spec.r_epi - 1)
    assert (truth[ring] == L.EPICARDIAL).all()
    ring = (r >= spec.r_peri + 1) & (r < spec.r_medi - 1)
    assert (truth[ring] == L.MEDIASTINAL).all()
    assert (truth[r < spec.r_inner - 1] == L.BACKGROUND).all()


def test_planted_pattern_is_mediastinal():
    spec = PhantomSpec(seed=6)
    _, truths, (px, py) = generate_phantom(spec)
    bits = retrosternal_pattern(spec.pattern_size)
    ph, pw = bits.shape
    region = truths[0][py : py + ph, px : px + pw]
    assert (region[bits] == L.MEDIASTINAL).all()


def test_pattern_shared_across_specs():
    assert np.array_equal(retrosternal_pattern(), retrosternal_pattern())
    assert retrosternal_pattern((24, 12)).shape == (12, 24)
    assert retrosternal_pattern()[0, 0]


def test_spec_validation():
    with pytest.raises(PhantomSpecError):
        PhantomSpec(r_inner=50, r_epi=40)
    with pytest.raises(PhantomSpecError):
        PhantomSpec(pattern_offset=(250, 0))


def test_slices_differ_within_volume():
    vol, _, _ = generate_phantom(PhantomSpec(seed=7))
    assert not np.array_equal(vol.slices[0], vol.slices[1])
