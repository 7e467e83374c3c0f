"""Retrosternal localization by exhaustive weighted-mutual-information search,
heuristic confirmation, and whole-volume translation to a common frame.

The similarity score is mutual information with each (f, m) term scaled by
1 / (|f - m| + 1), so dissimilar intensity pairings are down-weighted. The
fixed slice (grey 0..255) and the moving atlas (p in [0, 1]) are quantized
onto one common bin scale so |f - m| is commensurate.
"""

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

DEFAULT_N_BINS = 32
DEFAULT_LOG_BASE = 2.0
DEFAULT_MARGIN = 0.05
DEFAULT_BAND = 0.6


class RangeError(ValueError):
    pass


class EmptyHistogramError(ValueError):
    pass


class UnconfirmedRegistrationError(RuntimeError):
    pass


@dataclass
class RegistrationResult:
    patient_id: str
    position: tuple  # (x, y) top-left of best atlas placement
    score: float
    second_best_score: float
    confirmed: bool
    translation: tuple  # (dx, dy) moving the detected anchor onto the reference

    def to_record(self):
        x, y = self.position
        dx, dy = self.translation
        fields = [
            self.patient_id,
            str(x),
            str(y),
            repr(float(self.score)),
            repr(float(self.second_best_score)),
            "1" if self.confirmed else "0",
            str(dx),
            str(dy),
        ]
        return " ".join(fields)

    @classmethod
    def from_record(cls, line):
        pid, x, y, score, second, conf, dx, dy = line.split()
        return cls(
            patient_id=pid,
            position=(int(x), int(y)),
            score=float(score),
            second_best_score=float(second),
            confirmed=conf == "1",
            translation=(int(dx), int(dy)),
        )


def quantize(values, lo, hi, n_bins):
    """floor((v - lo) / (hi - lo) * n_bins), clamped to [0, n_bins - 1]."""
    if lo >= hi:
        raise RangeError(f"invalid quantization range [{lo}, {hi}]")
    if n_bins < 2:
        raise RangeError("need at least 2 bins")
    v = np.asarray(values, dtype=np.float64)
    bins = np.floor((v - lo) / (hi - lo) * n_bins).astype(np.int64)
    return np.clip(bins, 0, n_bins - 1)


def joint_histogram(fixed_bins, moving_bins, n_bins):
    """Tally of aligned (fixed, moving) bin pairs; rows index the fixed bin."""
    fixed_bins = np.asarray(fixed_bins)
    moving_bins = np.asarray(moving_bins)
    if fixed_bins.shape != moving_bins.shape:
        raise RangeError(
            f"shape mismatch {fixed_bins.shape} vs {moving_bins.shape}"
        )
    if fixed_bins.size == 0:
        raise EmptyHistogramError("empty overlap")
    flat = fixed_bins.ravel() * n_bins + moving_bins.ravel()
    counts = np.bincount(flat, minlength=n_bins * n_bins)
    return counts.reshape(n_bins, n_bins).astype(np.int64)


def wmi(counts, g=DEFAULT_LOG_BASE):
    """Weighted mutual information of a joint histogram; zero joint cells contribute 0."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise EmptyHistogramError("histogram has no counts")
    if g <= 1:
        raise RangeError("log base must exceed 1")
    p = counts / total
    pf = p.sum(axis=1)
    pm = p.sum(axis=0)
    f_idx, m_idx = np.nonzero(p)
    pj = p[f_idx, m_idx]
    weight = 1.0 / (np.abs(f_idx - m_idx) + 1.0)
    terms = weight * pj * np.log(pj / (pf[f_idx] * pm[m_idx])) / math.log(g)
    return float(terms.sum())


@njit(cache=True)
def _wmi_score_grid(fixed_bins, atlas_bins, n_bins, stride, inv_log_g):
    """Score every placement on the stride lattice.

    Logs come from a table over integer counts (cell counts and marginals are
    all integers), so the inner loop has no transcendental calls. The moving
    marginal and the set of occupied moving bins never change, so the score
    scan only visits n_bins x (distinct atlas bins) cells.
    """
    sh, sw = fixed_bins.shape
    ah, aw = atlas_bins.shape
    ny = (sh - ah) // stride + 1
    nx = (sw - aw) // stride + 1
    total = ah * aw

    log_t = np.empty(total + 1)
    log_t[0] = 0.0
    for c in range(1, total + 1):
        log_t[c] = math.log(c) * inv_log_g

    m_seen = np.zeros(n_bins, np.bool_)
    rm = np.zeros(n_bins, np.int64)
    for j in range(ah):
        for i in range(aw):
            m = atlas_bins[j, i]
            m_seen[m] = True
            rm[m] += 1
    m_vals = np.flatnonzero(m_seen)

    hist = np.zeros((n_bins, n_bins), np.int64)
    rf = np.zeros(n_bins, np.int64)
    scores = np.empty((ny, nx))
    lt_total = log_t[total]

    for iy in range(ny):
        y = iy * stride
        for ix in range(nx):
            x = ix * stride
            for k in range(m_vals.size):
                m = m_vals[k]
                for f in range(n_bins):
                    hist[f, m] = 0
            rf[:] = 0
            for j in range(ah):
                for i in range(aw):
                    f = fixed_bins[y + j, x + i]
                    hist[f, atlas_bins[j, i]] += 1
                    rf[f] += 1
            s = 0.0
            for f in range(n_bins):
                if rf[f] == 0:
                    continue
                lf = log_t[rf[f]]
                for k in range(m_vals.size):
                    m = m_vals[k]
                    c = hist[f, m]
                    if c == 0:
                        continue
                    term = log_t[c] + lt_total - lf - log_t[rm[m]]
                    d = f - m
                    if d < 0:
                        d = -d
                    s += (c / total) * term / (d + 1.0)
            scores[iy, ix] = s
    return scores


def wmi_score_grid(windowed, atlas, g=DEFAULT_LOG_BASE, stride=1, n_bins=DEFAULT_N_BINS):
    """Dense WMI score for every valid atlas placement over the slice."""
    windowed = np.asarray(windowed)
    sh, sw = windowed.shape
    if atlas.h > sh or atlas.w > sw:
        raise RangeError(
            f"atlas {atlas.w}x{atlas.h} does not fit inside slice {sw}x{sh}"
        )
    if stride < 1:
        raise RangeError("stride must be >= 1")
    fixed_bins = quantize(windowed, 0, 256, n_bins)
    atlas_bins = quantize(atlas.p, 0.0, 1.0, n_bins)
    return _wmi_score_grid(
        np.ascontiguousarray(fixed_bins),
        np.ascontiguousarray(atlas_bins),
        n_bins,
        stride,
        1.0 / math.log(g),
    )


def find_retrosternal(
    windowed,
    atlas,
    g=DEFAULT_LOG_BASE,
    stride=1,
    n_bins=DEFAULT_N_BINS,
    patient_id="",
    reference_point=None,
):
    """Exhaustive WMI maximization over all placements on the stride lattice.

    Ties break toward smallest y then smallest x. The runner-up score is the
    best score among placements farther than atlas_width / 2 (Chebyshev) from
    the winner, which feeds the confirmation margin.
    """
    scores = wmi_score_grid(windowed, atlas, g=g, stride=stride, n_bins=n_bins)
    iy, ix = np.unravel_index(np.argmax(scores), scores.shape)
    best = float(scores[iy, ix])
    x, y = int(ix) * stride, int(iy) * stride

    radius = atlas.w / 2.0
    gy, gx = np.indices(scores.shape)
    far = np.maximum(np.abs(gy - iy), np.abs(gx - ix)) * stride > radius
    second = float(scores[far].max()) if far.any() else float("-inf")

    ax, ay = atlas.anchor
    if reference_point is None:
        reference_point = (x + ax, y + ay)
    rx, ry = reference_point
    result = RegistrationResult(
        patient_id=patient_id,
        position=(x, y),
        score=best,
        second_best_score=second,
        confirmed=False,
        translation=(rx - (x + ax), ry - (y + ay)),
    )
    result.confirmed = confirm_position(result, windowed, atlas)
    return result


def confirm_position(
    result, windowed, atlas, margin=DEFAULT_MARGIN, band=DEFAULT_BAND
):
    """Heuristic check: a clear score margin over the far runner-up, and the
    detected anchor sitting in the upper part of the slice.

    The margin must be strictly positive, so a flat score landscape (all
    placements equal) is always rejected.
    """
    gap = result.score - result.second_best_score
    gap_ok = gap > 0 and gap >= margin * abs(result.score)
    anchor_y = result.position[1] + atlas.anchor[1]
    band_ok = anchor_y < band * np.asarray(windowed).shape[0]
    return bool(gap_ok and band_ok)


def translate(image, dx, dy, fill=0):
    """Integer translation; content shifted outside the frame is discarded."""
    image = np.asarray(image)
    out = np.full_like(image, fill)
    h, w = image.shape
    src_x0, src_x1 = max(0, -dx), min(w, w - dx)
    src_y0, src_y1 = max(0, -dy), min(h, h - dy)
    if src_x0 < src_x1 and src_y0 < src_y1:
        out[src_y0 + dy : src_y1 + dy, src_x0 + dx : src_x1 + dx] = image[
            src_y0:src_y1, src_x0:src_x1
        ]
    return out


def align_patient(windowed_slices, result, reference_point, force=False):
    """Apply one integer translation, derived from the registered slice, to
    every slice of the patient."""
    if not result.confirmed and not force:
        raise UnconfirmedRegistrationError(
            f"registration for {result.patient_id!r} is unconfirmed"
        )
    dx, dy = result.translation
    return [translate(s, dx, dy) for s in windowed_slices]


def select_registration_slice(windowed_slices, z=None):
    """Slice used for registration: the one with the largest foreground count
    within the upper half of the stack, unless an explicit z is given."""
    if z is not None:
        if not 0 <= z < len(windowed_slices):
            raise RangeError(f"slice index {z} out of range")
        return z
    upper = windowed_slices[: max(1, (len(windowed_slices) + 1) // 2)]
    counts = [int(np.count_nonzero(s)) for s in upper]
    return int(np.argmax(counts))
