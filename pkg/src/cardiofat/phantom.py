"""Synthetic phantom patients for desk-scale verification.

Each phantom is a stack of slices with a concentric "heart": an inner
non-fat disk, an epicardial fat ring, a pericardium shell, and a
mediastinal fat annulus, plus a planted retrosternal pattern near the top
of the frame. The three tissue classes occupy disjoint HU sub-ranges of
the fat window, all chosen to survive +-20 HU of noise without leaving
the window.
"""

from dataclasses import dataclass, field

import numpy as np

from . import labels as L
from .imaging import PatientVolume

# HU sub-ranges per class; disjoint and noise-robust inside [-200, -30]
EPI_HU = (-175, -145)
PERI_HU = (-130, -100)
MEDI_HU = (-95, -55)
SOFT_TISSUE_HU = 40
LUNG_HU = -700

# The pattern bitmap is shared by every phantom so one atlas fits all.
_PATTERN_SEED = 0xC0FFEE


class PhantomSpecError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    size: int = 256
    n_slices: int = 8
    center: tuple = (128, 150)
    # The pericardium is a thin sheet; its band stays ~1 px wide so hybrid
    # pixels (lone pericardium hits fuse to hybrid) stay rare relative to
    # the fat rings.
    r_inner: float = 38.0
    r_epi: float = 55.0
    r_peri: float = 56.0
    r_medi: float = 90.0
    pattern_offset: tuple = (64, 20)  # top-left (x, y) of the planted pattern
    pattern_size: tuple = (24, 12)  # (w, h)
    noise_hu: float = 0.0
    seed: int = 0

    def __post_init__(self):
        radii = (self.r_inner, self.r_epi, self.r_peri, self.r_medi)
        if not all(a < b for a, b in zip(radii, radii[1:])):
            raise PhantomSpecError("radii must be strictly increasing")
        px, py = self.pattern_offset
        pw, ph = self.pattern_size
        if px < 0 or py < 0 or px + pw > self.size or py + ph > self.size:
            raise PhantomSpecError("pattern does not fit in the frame")


def retrosternal_pattern(size=(24, 12)):
    """Shared binary pattern bitmap (w, h) -> bool grid [h, w]."""
    w, h = size
    rng = np.random.default_rng(_PATTERN_SEED)
    bits = rng.random((h, w)) < 0.5
    bits[0, 0] = True  # keep the corner stable for offset checks
    return bits


def generate_phantom(spec):
    """(PatientVolume in HU, truth label slices, planted pattern position).

    Deterministic per seed. Fat-class pixels draw HU uniformly from their
    class sub-range; everything else sits outside the fat window.
    """
    rng = np.random.default_rng(spec.seed)
    size = spec.size
    yy, xx = np.indices((size, size))
    cx, cy = spec.center
    r = np.hypot(xx - cx, yy - cy)

    epi_band = (r >= spec.r_inner) & (r < spec.r_epi)
    peri_band = (r >= spec.r_epi) & (r < spec.r_peri)
    medi_band = (r >= spec.r_peri) & (r < spec.r_medi)
    inner = r < spec.r_inner

    bits = retrosternal_pattern(spec.pattern_size)
    px, py = spec.pattern_offset
    ph, pw = bits.shape

    slices = []
    truths = []
    for _z in range(spec.n_slices):
        hu = np.full((size, size), LUNG_HU, dtype=np.float64)
        truth = np.zeros((size, size), dtype=np.uint8)

        hu[inner] = SOFT_TISSUE_HU
        for band, (lo, hi), lbl in (
            (epi_band, EPI_HU, L.EPICARDIAL),
            (peri_band, PERI_HU, L.PERICARDIUM),
            (medi_band, MEDI_HU, L.MEDIASTINAL),
        ):
            hu[band] = rng.uniform(lo, hi, size=int(band.sum()))
            truth[band] = lbl

        pat_hu = rng.uniform(*MEDI_HU, size=int(bits.sum()))
        region = hu[py : py + ph, px : px + pw]
        region[bits] = pat_hu
        t_region = truth[py : py + ph, px : px + pw]
        t_region[bits] = L.MEDIASTINAL

        if spec.noise_hu > 0:
            hu += rng.uniform(-spec.noise_hu, spec.noise_hu, size=hu.shape)

        slices.append(np.rint(hu).astype(np.int16))
        truths.append(truth)

    volume = PatientVolume(f"phantom{spec.seed:04d}", slices)
    return volume, truths, spec.pattern_offset
