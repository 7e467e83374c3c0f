"""Per-pixel feature extraction over foreground pixels of fat-windowed slices.

Each foreground pixel yields an 18-value vector: grey, absolute and
centroid-relative position, and texture statistics of the square
neighborhood centered on it (mean, four co-occurrence moments, central
geometric moments, run-length statistics, 1D Gaussian-weighted mean).
Background and out-of-bounds neighborhood cells are excluded from every
statistic, never mirrored or clamped.

The per-operation functions below are the reference path; `extract_slice`
is the compiled bulk path used by dataset building and segmentation. Both
must agree (tested), and the bulk path alone defines file-level bit
determinism.
"""

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import labels as L

SCHEMA_VERSION = "v1"

FEATURE_NAMES = (
    "grey",
    "x",
    "y",
    "z",
    "rel_x",
    "rel_y",
    "patch_mean",
    "glcm_contrast",
    "glcm_energy",
    "glcm_homogeneity",
    "glcm_entropy",
    "mu00",
    "mu11",
    "mu20",
    "mu02",
    "run_percentage",
    "grey_level_non_uniformity",
    "gauss_mean",
)

GLCM_OFFSETS = ((0, 1), (1, 0), (1, 1), (1, -1))  # (dy, dx)


class BackgroundPixelError(ValueError):
    pass


class ShapeError(ValueError):
    pass


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureSchema:
    """Frozen description of the extracted feature vector."""

    neighborhood: int = 5
    glcm_levels: int = 16
    glrlm_levels: int = 16
    gaussian_sigma: float = None

    def __post_init__(self):
        w = self.neighborhood
        if w < 3 and w != 1 or w % 2 == 0:
            raise SchemaError("neighborhood must be an odd count >= 3 (or 1)")
        if self.glcm_levels < 2 or self.glrlm_levels < 2:
            raise SchemaError("quantization levels must be >= 2")
        if self.gaussian_sigma is None:
            object.__setattr__(self, "gaussian_sigma", w / 6.0)
        if self.gaussian_sigma <= 0:
            raise SchemaError("gaussian sigma must be positive")

    @property
    def feature_names(self):
        return FEATURE_NAMES

    def canonical(self):
        return "|".join(
            [
                SCHEMA_VERSION,
                f"w={self.neighborhood}",
                f"glcm={self.glcm_levels}",
                f"glrlm={self.glrlm_levels}",
                f"sigma={self.gaussian_sigma!r}",
                ",".join(FEATURE_NAMES),
            ]
        )

    @property
    def schema_hash(self):
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]


def quantize_grey(grey, levels):
    """Map foreground grey 1..255 onto 0..levels-1."""
    q = (np.asarray(grey).astype(np.int64) - 1) * levels // 255
    return np.minimum(q, levels - 1)


def neighborhood_patch(windowed, x, y, w):
    """w x w window centered on (x, y) plus its validity mask.

    Out-of-bounds or background cells are invalid; the center must be
    foreground.
    """
    windowed = np.asarray(windowed)
    h, sw = windowed.shape
    if windowed[y, x] == 0:
        raise BackgroundPixelError(f"pixel ({x}, {y}) is background")
    half = w // 2
    vals = np.zeros((w, w), dtype=np.int64)
    valid = np.zeros((w, w), dtype=bool)
    for j in range(w):
        for i in range(w):
            yy, xx = y - half + j, x - half + i
            if 0 <= yy < h and 0 <= xx < sw and windowed[yy, xx] > 0:
                vals[j, i] = windowed[yy, xx]
                valid[j, i] = True
    return vals, valid


def patch_mean(patch):
    vals, valid = patch
    return float(vals[valid].mean())


def glcm(patch, levels, offsets=GLCM_OFFSETS):
    """Symmetric normalized co-occurrence matrix summed over the offsets.

    Returns None when no valid co-occurring pair exists (degenerate patch);
    callers emit 0 for all moments in that case.
    """
    vals, valid = patch
    q = quantize_grey(vals, levels)
    ph, pw = vals.shape
    mat = np.zeros((levels, levels), dtype=np.float64)
    for dy, dx in offsets:
        for j in range(ph):
            j2 = j + dy
            if not 0 <= j2 < ph:
                continue
            for i in range(pw):
                i2 = i + dx
                if not 0 <= i2 < pw:
                    continue
                if valid[j, i] and valid[j2, i2]:
                    mat[q[j, i], q[j2, i2]] += 1.0
                    mat[q[j2, i2], q[j, i]] += 1.0
    total = mat.sum()
    if total == 0:
        return None
    return mat / total


def glcm_moments(P):
    """(contrast, energy, homogeneity, entropy) of a normalized GLCM."""
    if P is None:
        return 0.0, 0.0, 0.0, 0.0
    i, j = np.indices(P.shape)
    contrast = float(((i - j) ** 2 * P).sum())
    energy = float((P**2).sum())
    homogeneity = float((P / (1.0 + np.abs(i - j))).sum())
    nz = P[P > 0]
    entropy = float(-(nz * np.log2(nz)).sum())
    return contrast, energy, homogeneity, entropy


def geometric_moments(patch):
    """(mu00, mu11, mu20, mu02): intensity mass and central second moments
    in patch-local coordinates."""
    vals, valid = patch
    js, is_ = np.nonzero(valid)
    g = vals[valid].astype(np.float64)
    m00 = g.sum()
    xbar = (is_ * g).sum() / m00
    ybar = (js * g).sum() / m00
    dx = is_ - xbar
    dy = js - ybar
    mu11 = float((dx * dy * g).sum())
    mu20 = float((dx * dx * g).sum())
    mu02 = float((dy * dy * g).sum())
    return float(m00), mu11, mu20, mu02


def glrlm_features(patch, levels):
    """(run_percentage, grey_level_non_uniformity) from horizontal runs.

    Invalid cells break runs and are excluded from the pixel count.
    """
    vals, valid = patch
    q = quantize_grey(vals, levels)
    ph, pw = vals.shape
    runs_per_level = np.zeros(levels, dtype=np.int64)
    n_valid = 0
    for j in range(ph):
        prev = -1
        for i in range(pw):
            if not valid[j, i]:
                prev = -1
                continue
            n_valid += 1
            if q[j, i] != prev:
                runs_per_level[q[j, i]] += 1
            prev = q[j, i]
    total_runs = int(runs_per_level.sum())
    rp = total_runs / n_valid
    gln = float((runs_per_level.astype(np.float64) ** 2).sum()) / total_runs
    return rp, gln


def gaussian_weighted_mean(windowed, x, y, w, sigma):
    """Mean of the horizontal w-segment centered at (x, y), weighted by a
    Gaussian in the x offset and renormalized over valid cells."""
    windowed = np.asarray(windowed)
    if windowed[y, x] == 0:
        raise BackgroundPixelError(f"pixel ({x}, {y}) is background")
    half = w // 2
    num = 0.0
    den = 0.0
    for d in range(-half, half + 1):
        xx = x + d
        if 0 <= xx < windowed.shape[1] and windowed[y, xx] > 0:
            k = math.exp(-(d * d) / (2.0 * sigma * sigma))
            num += k * float(windowed[y, xx])
            den += k
    return num / den


def extract_pixel_features(windowed, z, x, y, schema, cog):
    """Reference-path composition of the individual feature operations."""
    cx, cy = cog
    patch = neighborhood_patch(windowed, x, y, schema.neighborhood)
    contrast, energy, homog, entropy = glcm_moments(glcm(patch, schema.glcm_levels))
    m00, mu11, mu20, mu02 = geometric_moments(patch)
    rp, gln = glrlm_features(patch, schema.glrlm_levels)
    gwm = gaussian_weighted_mean(
        windowed, x, y, schema.neighborhood, schema.gaussian_sigma
    )
    return np.array(
        [
            float(windowed[y, x]),
            float(x),
            float(y),
            float(z),
            x - cx,
            y - cy,
            patch_mean(patch),
            contrast,
            energy,
            homog,
            entropy,
            m00,
            mu11,
            mu20,
            mu02,
            rp,
            gln,
            gwm,
        ]
    )


@njit(cache=True)
def _extract_kernel(grey, z, cx, cy, w, glcm_levels, glrlm_levels, gauss_k, coords, out):
    """Bulk extraction over every foreground pixel, rows ordered by (y, x)."""
    h, sw = grey.shape
    half = w // 2
    inv_log2 = 1.0 / math.log(2.0)
    gmat = np.zeros((glcm_levels, glcm_levels), np.float64)
    runs = np.zeros(glrlm_levels, np.int64)
    n = 0
    for y in range(h):
        for x in range(sw):
            g0 = grey[y, x]
            if g0 == 0:
                continue
            # neighborhood pass: mean + geometric centroid accumulators
            s_g = 0.0
            s_xg = 0.0
            s_yg = 0.0
            n_valid = 0
            for j in range(w):
                yy = y - half + j
                if yy < 0 or yy >= h:
                    continue
                for i in range(w):
                    xx = x - half + i
                    if xx < 0 or xx >= sw:
                        continue
                    gv = grey[yy, xx]
                    if gv == 0:
                        continue
                    n_valid += 1
                    s_g += gv
                    s_xg += i * float(gv)
                    s_yg += j * float(gv)
            mean = s_g / n_valid
            xbar = s_xg / s_g
            ybar = s_yg / s_g
            mu11 = 0.0
            mu20 = 0.0
            mu02 = 0.0
            for j in range(w):
                yy = y - half + j
                if yy < 0 or yy >= h:
                    continue
                for i in range(w):
                    xx = x - half + i
                    if xx < 0 or xx >= sw:
                        continue
                    gv = grey[yy, xx]
                    if gv == 0:
                        continue
                    dxc = i - xbar
                    dyc = j - ybar
                    mu11 += dxc * dyc * gv
                    mu20 += dxc * dxc * gv
                    mu02 += dyc * dyc * gv
            # co-occurrence over 4 offsets, symmetrized
            gmat[:, :] = 0.0
            npairs = 0
            for j in range(w):
                yy = y - half + j
                if yy < 0 or yy >= h:
                    continue
                for i in range(w):
                    xx = x - half + i
                    if xx < 0 or xx >= sw:
                        continue
                    gv = grey[yy, xx]
                    if gv == 0:
                        continue
                    qa = (gv - 1) * glcm_levels // 255
                    if qa > glcm_levels - 1:
                        qa = glcm_levels - 1
                    for o in range(4):
                        if o == 0:
                            dy, dx = 0, 1
                        elif o == 1:
                            dy, dx = 1, 0
                        elif o == 2:
                            dy, dx = 1, 1
                        else:
                            dy, dx = 1, -1
                        j2 = j + dy
                        i2 = i + dx
                        if j2 < 0 or j2 >= w or i2 < 0 or i2 >= w:
                            continue
                        yy2 = y - half + j2
                        xx2 = x - half + i2
                        if yy2 < 0 or yy2 >= h or xx2 < 0 or xx2 >= sw:
                            continue
                        gv2 = grey[yy2, xx2]
                        if gv2 == 0:
                            continue
                        qb = (gv2 - 1) * glcm_levels // 255
                        if qb > glcm_levels - 1:
                            qb = glcm_levels - 1
                        gmat[qa, qb] += 1.0
                        gmat[qb, qa] += 1.0
                        npairs += 2
            contrast = 0.0
            energy = 0.0
            homog = 0.0
            entropy = 0.0
            if npairs > 0:
                for a in range(glcm_levels):
                    for b in range(glcm_levels):
                        c = gmat[a, b]
                        if c == 0.0:
                            continue
                        p = c / npairs
                        d = a - b
                        if d < 0:
                            d = -d
                        contrast += d * d * p
                        energy += p * p
                        homog += p / (1.0 + d)
                        entropy -= p * math.log(p) * inv_log2
            # horizontal run lengths
            runs[:] = 0
            total_runs = 0
            for j in range(w):
                yy = y - half + j
                if yy < 0 or yy >= h:
                    continue
                prev = -1
                for i in range(w):
                    xx = x - half + i
                    if xx < 0 or xx >= sw:
                        prev = -1
                        continue
                    gv = grey[yy, xx]
                    if gv == 0:
                        prev = -1
                        continue
                    qv = (gv - 1) * glrlm_levels // 255
                    if qv > glrlm_levels - 1:
                        qv = glrlm_levels - 1
                    if qv != prev:
                        runs[qv] += 1
                        total_runs += 1
                    prev = qv
            rp = total_runs / n_valid
            gln = 0.0
            for lvl in range(glrlm_levels):
                gln += float(runs[lvl]) * float(runs[lvl])
            gln /= total_runs
            # 1D Gaussian-weighted mean along the row
            num = 0.0
            den = 0.0
            for d in range(-half, half + 1):
                xx = x + d
                if xx < 0 or xx >= sw:
                    continue
                gv = grey[y, xx]
                if gv == 0:
                    continue
                k = gauss_k[d + half]
                num += k * gv
                den += k
            coords[n, 0] = x
            coords[n, 1] = y
            out[n, 0] = g0
            out[n, 1] = x
            out[n, 2] = y
            out[n, 3] = z
            out[n, 4] = x - cx
            out[n, 5] = y - cy
            out[n, 6] = mean
            out[n, 7] = contrast
            out[n, 8] = energy
            out[n, 9] = homog
            out[n, 10] = entropy
            out[n, 11] = s_g
            out[n, 12] = mu11
            out[n, 13] = mu20
            out[n, 14] = mu02
            out[n, 15] = rp
            out[n, 16] = gln
            out[n, 17] = num / den
            n += 1
    return n


def extract_slice(windowed, z, schema, cog=None):
    """Features for every foreground pixel of one slice.

    Returns (coords, X): coords is (n, 2) int32 of (x, y) ordered by (y, x);
    X is (n, 18) float64.
    """
    from .imaging import center_of_gravity

    windowed = np.ascontiguousarray(windowed, dtype=np.int64)
    if cog is None:
        cog = center_of_gravity(windowed)
    n_fg = int(np.count_nonzero(windowed))
    coords = np.empty((n_fg, 2), dtype=np.int32)
    X = np.empty((n_fg, len(FEATURE_NAMES)), dtype=np.float64)
    half = schema.neighborhood // 2
    gauss_k = np.exp(
        -(np.arange(-half, half + 1, dtype=np.float64) ** 2)
        / (2.0 * schema.gaussian_sigma**2)
    )
    n = _extract_kernel(
        windowed,
        float(z),
        float(cog[0]),
        float(cog[1]),
        schema.neighborhood,
        schema.glcm_levels,
        schema.glrlm_levels,
        gauss_k,
        coords,
        X,
    )
    assert n == n_fg
    return coords, X


@dataclass
class Dataset:
    """Feature rows with provenance; labels use the codes in labels.py
    (-1 marks unlabeled rows)."""

    schema: FeatureSchema
    X: np.ndarray  # (n, 18) float64
    y: np.ndarray  # (n,) int8
    patient_ids: list  # distinct patient ids, indexed by patient_idx
    patient_idx: np.ndarray  # (n,) int32
    zxy: np.ndarray  # (n, 3) int32

    def __len__(self):
        return self.X.shape[0]

    @property
    def class_counts(self):
        out = {}
        for lbl in np.unique(self.y):
            out[int(lbl)] = int((self.y == lbl).sum())
        return out


def build_dataset(volumes, label_volumes, schema, sample_rate=1.0, seed=0):
    """Labeled dataset over the foreground pixels of registered volumes.

    `volumes` is a sequence of (patient_id, [windowed slices]); each label
    grid must align pixelwise with its slice. Sampling is uniform per class,
    deterministic per seed; rows stay ordered by (patient, z, y, x).
    """
    if not 0.0 <= sample_rate <= 1.0:
        raise ValueError("sample_rate must lie in [0, 1]")
    patient_ids = []
    xs, ys_, pidx, zxy = [], [], [], []
    for p, (patient_id, slices) in enumerate(volumes):
        truth = label_volumes[p]
        if len(truth) != len(slices):
            raise ShapeError(f"{patient_id}: {len(truth)} label grids for {len(slices)} slices")
        patient_ids.append(patient_id)
        for z, windowed in enumerate(slices):
            lab = np.asarray(truth[z])
            if lab.shape != np.asarray(windowed).shape:
                raise ShapeError(
                    f"{patient_id} z={z}: label grid {lab.shape} vs slice "
                    f"{np.asarray(windowed).shape}"
                )
            coords, X = extract_slice(windowed, z, schema)
            row_labels = lab[coords[:, 1], coords[:, 0]].astype(np.int8)
            keep = row_labels != L.BACKGROUND
            xs.append(X[keep])
            ys_.append(row_labels[keep])
            n_keep = int(keep.sum())
            pidx.append(np.full(n_keep, p, dtype=np.int32))
            zxy.append(
                np.column_stack(
                    [
                        np.full(n_keep, z, dtype=np.int32),
                        coords[keep][:, 0],
                        coords[keep][:, 1],
                    ]
                )
            )
    X = np.concatenate(xs) if xs else np.empty((0, len(FEATURE_NAMES)))
    y = np.concatenate(ys_) if ys_ else np.empty(0, dtype=np.int8)
    pidx = np.concatenate(pidx) if pidx else np.empty(0, dtype=np.int32)
    zxy = np.concatenate(zxy) if zxy else np.empty((0, 3), dtype=np.int32)

    if sample_rate < 1.0:
        rng = np.random.default_rng(seed)
        chosen = []
        for lbl in sorted(np.unique(y)):
            idx = np.flatnonzero(y == lbl)
            n_take = int(round(len(idx) * sample_rate))
            chosen.append(np.sort(rng.choice(idx, size=n_take, replace=False)))
        order = np.sort(np.concatenate(chosen)) if chosen else np.empty(0, dtype=np.int64)
        X, y, pidx, zxy = X[order], y[order], pidx[order], zxy[order]
    return Dataset(schema, X, y, patient_ids, pidx, zxy)


def save_dataset(path, ds):
    """Comma-separated rows with a schema header; floats use shortest
    round-trip formatting so identical runs produce identical bytes."""
    s = ds.schema
    header = (
        f"# cardiofat-dataset {SCHEMA_VERSION} w={s.neighborhood} "
        f"glcm_levels={s.glcm_levels} glrlm_levels={s.glrlm_levels} "
        f"sigma={s.gaussian_sigma!r} hash={s.schema_hash}"
    )
    cols = "patient,z,x,y," + ",".join(FEATURE_NAMES) + ",label"
    with open(path, "w") as f:
        f.write(header + "\n" + cols + "\n")
        for i in range(len(ds)):
            z, x, y = (int(v) for v in ds.zxy[i])
            lbl = int(ds.y[i])
            parts = [ds.patient_ids[ds.patient_idx[i]], str(z), str(x), str(y)]
            parts.extend(repr(float(v)) for v in ds.X[i])
            parts.append(L.LABEL_NAMES[lbl] if lbl >= 0 else "")
            f.write(",".join(parts) + "\n")


def load_dataset(path):
    with open(path) as f:
        header = f.readline().strip()
        f.readline()  # column names
        rows = f.read().splitlines()
    if not header.startswith("# cardiofat-dataset "):
        raise SchemaError("not a cardiofat dataset file")
    kv = dict(tok.split("=", 1) for tok in header.split()[3:])
    schema = FeatureSchema(
        neighborhood=int(kv["w"]),
        glcm_levels=int(kv["glcm_levels"]),
        glrlm_levels=int(kv["glrlm_levels"]),
        gaussian_sigma=float(kv["sigma"]),
    )
    if schema.schema_hash != kv["hash"]:
        raise SchemaError("schema hash mismatch in dataset file")
    n = len(rows)
    X = np.empty((n, len(FEATURE_NAMES)))
    y = np.empty(n, dtype=np.int8)
    pidx = np.empty(n, dtype=np.int32)
    zxy = np.empty((n, 3), dtype=np.int32)
    patient_ids = []
    pid_index = {}
    for i, row in enumerate(rows):
        parts = row.split(",")
        pid = parts[0]
        if pid not in pid_index:
            pid_index[pid] = len(patient_ids)
            patient_ids.append(pid)
        pidx[i] = pid_index[pid]
        zxy[i] = [int(parts[1]), int(parts[2]), int(parts[3])]
        X[i] = [float(v) for v in parts[4 : 4 + len(FEATURE_NAMES)]]
        lbl = parts[4 + len(FEATURE_NAMES)]
        y[i] = L.NAME_TO_LABEL[lbl] if lbl else -1
    return Dataset(schema, X, y, patient_ids, pidx, zxy)
