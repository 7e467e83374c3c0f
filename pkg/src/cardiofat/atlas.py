"""Probabilistic atlas of the retrosternal area.

The atlas is the arithmetic mean of manually selected, binarized ROI crops.
Internally it keeps the integer hit counts so values are exact rationals
hits / n_sources and files round-trip bit-exactly.
"""

from dataclasses import dataclass

import numpy as np

DEFAULT_ROI_W = 128
DEFAULT_ROI_H = 64


class AtlasError(ValueError):
    pass


@dataclass(frozen=True)
class RoiSelection:
    """Manual ROI pick: top-left corner plus size on one slice of one patient."""

    patient_id: str
    z: int
    x: int
    y: int
    w: int
    h: int


class ProbAtlas:
    """Immutable mean-of-binaries grid with a canonical center anchor."""

    def __init__(self, hits, n_sources):
        hits = np.asarray(hits, dtype=np.int32)
        if hits.ndim != 2:
            raise AtlasError("atlas grid must be 2D")
        if n_sources < 1:
            raise AtlasError("atlas needs at least one source crop")
        if hits.min() < 0 or hits.max() > n_sources:
            raise AtlasError("hit counts must lie in [0, n_sources]")
        hits = hits.copy()
        hits.setflags(write=False)
        self.hits = hits
        self.n_sources = int(n_sources)

    @property
    def h(self):
        return self.hits.shape[0]

    @property
    def w(self):
        return self.hits.shape[1]

    @property
    def p(self):
        return self.hits / float(self.n_sources)

    @property
    def anchor(self):
        """Canonical reference pixel: the grid center, rounded down."""
        return (self.w // 2, self.h // 2)

    def __eq__(self, other):
        return (
            isinstance(other, ProbAtlas)
            and self.n_sources == other.n_sources
            and np.array_equal(self.hits, other.hits)
        )


def build_atlas(crops):
    """Mean of binary crops; all crops must share one shape."""
    crops = list(crops)
    if not crops:
        raise AtlasError("no source crops")
    shape = np.asarray(crops[0]).shape
    hits = np.zeros(shape, dtype=np.int32)
    for c in crops:
        c = np.asarray(c)
        if c.shape != shape:
            raise AtlasError(f"crop shape {c.shape} differs from {shape}")
        hits += (c > 0).astype(np.int32)
    return ProbAtlas(hits, len(crops))


def crop_roi(windowed, roi):
    """Sub-grid of a fat-windowed slice; the ROI must lie fully inside it."""
    windowed = np.asarray(windowed)
    h, w = windowed.shape
    if roi.w <= 0 or roi.h <= 0:
        raise AtlasError("ROI dimensions must be positive")
    if roi.x < 0 or roi.y < 0 or roi.x + roi.w > w or roi.y + roi.h > h:
        raise AtlasError(
            f"ROI {roi.x},{roi.y} {roi.w}x{roi.h} exceeds slice bounds {w}x{h}"
        )
    return windowed[roi.y : roi.y + roi.h, roi.x : roi.x + roi.w].copy()


def save_atlas(path, atlas):
    """Plain-text format: header `w h k`, probability rows, then exact hit counts."""
    lines = [f"{atlas.w} {atlas.h} {atlas.n_sources}"]
    p = atlas.p
    for row in p:
        lines.append(" ".join(repr(float(v)) for v in row))
    for row in atlas.hits:
        lines.append(" ".join(str(int(v)) for v in row))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_atlas(path):
    with open(path) as f:
        tokens = f.read().split("\n")
    w, h, k = (int(t) for t in tokens[0].split())
    # Probabilities are informational; the hit counts are authoritative.
    hit_rows = tokens[1 + h : 1 + 2 * h]
    hits = np.array([[int(v) for v in row.split()] for row in hit_rows], dtype=np.int32)
    if hits.shape != (h, w):
        raise AtlasError("corrupt atlas file")
    return ProbAtlas(hits, k)
