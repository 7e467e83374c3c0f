"""On-disk formats: patient manifests, 16-bit HU slice images, color masks.

Slice files are 16-bit grayscale PNGs storing HU + 1024 (bit-exact).
Masks and overlays are lossless RGB PNGs restricted to the six-color
palette in labels.py; off-palette pixels are a hard error naming the
offending coordinate. All writes go to a temp file first and are renamed
into place on success.
"""

import io
import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import labels as L
from .imaging import HU_STORAGE_OFFSET, PatientVolume


class PaletteError(ValueError):
    pass


class ManifestError(ValueError):
    pass


def atomic_write_bytes(path, data):
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode())


def save_hu_slice(path, hu):
    """Store HU + 1024 as a 16-bit grayscale PNG."""
    stored = np.asarray(hu, dtype=np.int64) + HU_STORAGE_OFFSET
    if stored.min() < 0 or stored.max() > 0xFFFF:
        raise ValueError("HU values out of storable range")
    img = Image.fromarray(stored.astype(np.uint16))
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def load_hu_slice(path):
    arr = np.array(Image.open(path))
    if arr.dtype != np.uint16 and arr.dtype != np.int32:
        raise ValueError(f"{path}: expected a 16-bit grayscale image, got {arr.dtype}")
    return arr.astype(np.int32) - HU_STORAGE_OFFSET


@dataclass
class PatientManifest:
    patient_id: str
    slice_paths: list
    spacing: tuple | None = None

    HU_ENCODING_NOTE = f"stored = HU + {HU_STORAGE_OFFSET}"


def save_manifest(path, manifest):
    doc = {
        "patient_id": manifest.patient_id,
        "hu_encoding": PatientManifest.HU_ENCODING_NOTE,
        "slices": [os.fspath(p) for p in manifest.slice_paths],
    }
    if manifest.spacing is not None:
        doc["spacing_mm"] = list(manifest.spacing)
    atomic_write_text(path, json.dumps(doc, indent=2) + "\n")


def load_manifest(path):
    with open(path) as f:
        doc = json.load(f)
    base = os.path.dirname(os.fspath(path))
    paths = [p if os.path.isabs(p) else os.path.join(base, p) for p in doc["slices"]]
    for p in paths:
        if not os.path.exists(p):
            raise ManifestError(f"missing slice file {p}")
    spacing = tuple(doc["spacing_mm"]) if "spacing_mm" in doc else None
    return PatientManifest(doc["patient_id"], paths, spacing)


def load_patient_volume(manifest_path):
    m = load_manifest(manifest_path)
    slices = [load_hu_slice(p) for p in m.slice_paths]
    return PatientVolume(m.patient_id, slices, m.spacing)


def save_patient_volume(out_dir, volume):
    """Write slices plus manifest.json under out_dir; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    rel_paths = []
    for z, hu in enumerate(volume.slices):
        name = f"z{z:03d}.png"
        save_hu_slice(os.path.join(out_dir, name), hu)
        rel_paths.append(name)
    manifest = PatientManifest(volume.patient_id, rel_paths, volume.spacing)
    path = os.path.join(out_dir, "manifest.json")
    save_manifest(path, manifest)
    return path


# ---------------------------------------------------------------------------
# color masks


def render_overlay(label_slice):
    """Label grid -> RGB color mask using the strict six-color palette."""
    lab = np.asarray(label_slice)
    rgb = np.zeros(lab.shape + (3,), dtype=np.uint8)
    for label, color in L.PALETTE.items():
        rgb[lab == label] = color
    return rgb


def decode_ground_truth(rgb):
    """RGB color mask -> label grid; off-palette pixels raise PaletteError."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] < 3:
        raise PaletteError("mask must be an RGB image")
    rgb = rgb[:, :, :3]
    out = np.full(rgb.shape[:2], 255, dtype=np.uint8)
    for label, color in L.PALETTE.items():
        out[(rgb == color).all(axis=2)] = label
    bad = np.argwhere(out == 255)
    if bad.size:
        y, x = (int(v) for v in bad[0])
        raise PaletteError(
            f"off-palette color {tuple(int(v) for v in rgb[y, x])} at ({x}, {y})"
        )
    return out


def save_mask(path, label_slice):
    img = Image.fromarray(render_overlay(label_slice))
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def load_mask(path):
    return decode_ground_truth(np.array(Image.open(path).convert("RGB")))


def save_label_volume(out_dir, label_slices):
    os.makedirs(out_dir, exist_ok=True)
    for z, lab in enumerate(label_slices):
        save_mask(os.path.join(out_dir, f"z{z:03d}.png"), lab)


def load_label_volume(mask_dir, n_slices=None):
    names = sorted(n for n in os.listdir(mask_dir) if n.endswith(".png"))
    if n_slices is not None and len(names) != n_slices:
        raise ManifestError(
            f"{mask_dir}: expected {n_slices} masks, found {len(names)}"
        )
    return [load_mask(os.path.join(mask_dir, n)) for n in names]
