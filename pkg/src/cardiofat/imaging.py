"""CT intensity handling: HU windowing to the fat range, binarization and
foreground statistics.

All images are numpy arrays indexed [y, x]. HU slices are signed integers;
fat-windowed slices are uint8 with 0 = background and 1..255 encoding the
window linearly.
"""

from dataclasses import dataclass, field

import numpy as np

FAT_HU_LO = -200
FAT_HU_HI = -30

# Slice files store HU + 1024 as unsigned 16-bit.
HU_STORAGE_OFFSET = 1024


class WindowError(ValueError):
    """Raised for an invalid HU window (lo >= hi)."""


class EmptyForegroundError(ValueError):
    """Raised when an operation needs at least one foreground pixel."""


@dataclass
class PatientVolume:
    """Ordered stack of HU slices for one patient (z = slice index)."""

    patient_id: str
    slices: list  # list of 2D int arrays, all same shape
    spacing: tuple | None = None

    def __post_init__(self):
        if not self.slices:
            raise ValueError("patient volume needs at least one slice")
        shape = self.slices[0].shape
        for s in self.slices:
            if s.shape != shape:
                raise ValueError("all slices of a volume must share dimensions")

    @property
    def shape(self):
        return self.slices[0].shape

    def __len__(self):
        return len(self.slices)


def window_to_fat_range(hu, lo=FAT_HU_LO, hi=FAT_HU_HI):
    """Map HU values in [lo, hi] linearly onto grey 1..255; everything else to 0."""
    if lo >= hi:
        raise WindowError(f"invalid HU window [{lo}, {hi}]")
    hu = np.asarray(hu)
    grey = np.rint(1.0 + (hu.astype(np.float64) - lo) * 254.0 / (hi - lo))
    inside = (hu >= lo) & (hu <= hi)
    return np.where(inside, grey, 0.0).astype(np.uint8)


def unwindow(grey, lo=FAT_HU_LO, hi=FAT_HU_HI):
    """Inverse of the windowing map for nonzero grey; background maps to lo - 1."""
    grey = np.asarray(grey)
    hu = np.rint(lo + (grey.astype(np.float64) - 1.0) * (hi - lo) / 254.0)
    return np.where(grey > 0, hu, lo - 1).astype(np.int32)


def binarize(windowed):
    """0/1 image from a fat-windowed slice: 1 wherever grey > 0."""
    return (np.asarray(windowed) > 0).astype(np.uint8)


def center_of_gravity(windowed):
    """Intensity-weighted centroid (cx, cy) over nonzero pixels."""
    w = np.asarray(windowed, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise EmptyForegroundError("slice has no foreground pixels")
    ys, xs = np.nonzero(w)
    g = w[ys, xs]
    cx = float((xs * g).sum() / total)
    cy = float((ys * g).sum() / total)
    return cx, cy


def foreground_count(windowed):
    return int(np.count_nonzero(windowed))
