"""Command-line front end wiring the pipeline end to end.

Subcommands: atlas-build, register, extract, train, segment, evaluate,
compare, sweep, phantom. Every command validates its inputs, writes outputs
atomically (temp file + rename), and exits 0 only on full success.
"""

import json
import os
import sys

import click
import numpy as np

from . import atlas as atlas_mod
from . import classify, evaluation, features, phantom, registration, storage
from . import labels as L
from .imaging import window_to_fat_range


@click.group()
def main():
    """Automatic segmentation of epicardial and mediastinal cardiac fat."""


def _windowed_volume(manifest_path):
    vol = storage.load_patient_volume(manifest_path)
    return vol.patient_id, [window_to_fat_range(s) for s in vol.slices]


@main.command("atlas-build")
@click.option("--rois", "rois_path", required=True, type=click.Path(exists=True),
              help="JSON list of {manifest, z, x, y, w, h} ROI selections.")
@click.option("--out", "out_path", required=True, type=click.Path())
def atlas_build(rois_path, out_path):
    """Crop, binarize and average the selected retrosternal ROIs."""
    with open(rois_path) as f:
        entries = json.load(f)
    crops = []
    for e in entries:
        pid, slices = _windowed_volume(e["manifest"])
        roi = atlas_mod.RoiSelection(pid, e["z"], e["x"], e["y"], e["w"], e["h"])
        from .imaging import binarize

        crops.append(binarize(atlas_mod.crop_roi(slices[roi.z], roi)))
    built = atlas_mod.build_atlas(crops)
    _atomic_via(out_path, lambda p: atlas_mod.save_atlas(p, built))
    click.echo(f"atlas {built.w}x{built.h} from {built.n_sources} sources -> {out_path}")


def _atomic_via(path, writer):
    tmp = os.fspath(path) + ".tmp"
    writer(tmp)
    os.replace(tmp, path)


@main.command()
@click.option("--patient", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--atlas", "atlas_path", required=True, type=click.Path(exists=True))
@click.option("--slice", "z", type=int, default=None, help="Registration slice index.")
@click.option("--bins", default=registration.DEFAULT_N_BINS, show_default=True)
@click.option("--log-base", default=registration.DEFAULT_LOG_BASE, show_default=True)
@click.option("--reference", nargs=2, type=int, default=None,
              help="Common reference point (rx ry); default keeps the detected anchor.")
@click.option("--force", is_flag=True, help="Exit 0 even if unconfirmed.")
@click.option("--out", "out_path", type=click.Path(), default=None)
def register(manifest_path, atlas_path, z, bins, log_base, reference, force, out_path):
    """Locate the retrosternal area and emit the registration record."""
    pid, slices = _windowed_volume(manifest_path)
    atl = atlas_mod.load_atlas(atlas_path)
    z = registration.select_registration_slice(slices, z)
    result = registration.find_retrosternal(
        slices[z], atl, g=log_base, n_bins=bins, patient_id=pid,
        reference_point=tuple(reference) if reference else None,
    )
    record = result.to_record()
    if out_path:
        storage.atomic_write_text(out_path, record + "\n")
    click.echo(record)
    if not result.confirmed and not force:
        click.echo("registration unconfirmed (use --force to accept)", err=True)
        sys.exit(1)


@main.command()
@click.option("--patient", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--labels", "labels_dir", type=click.Path(exists=True), default=None,
              help="Directory of ground-truth color masks (z000.png ...).")
@click.option("--w", "neighborhood", default=5, show_default=True)
@click.option("--sample-rate", default=1.0, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def extract(manifest_path, labels_dir, neighborhood, sample_rate, seed, out_path):
    """Extract the per-pixel feature dataset (labeled when masks are given)."""
    pid, slices = _windowed_volume(manifest_path)
    schema = features.FeatureSchema(neighborhood=neighborhood)
    if labels_dir:
        truth = storage.load_label_volume(labels_dir, n_slices=len(slices))
        ds = features.build_dataset(
            [(pid, slices)], [truth], schema, sample_rate=sample_rate, seed=seed
        )
    else:
        fg = [np.where(np.asarray(s) > 0, L.EPICARDIAL, L.BACKGROUND) for s in slices]
        ds = features.build_dataset(
            [(pid, slices)], [fg], schema, sample_rate=sample_rate, seed=seed
        )
        ds.y[:] = -1  # unlabeled
    _atomic_via(out_path, lambda p: features.save_dataset(p, ds))
    click.echo(f"{len(ds)} rows -> {out_path}")


@main.command()
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--learner", required=True,
              type=click.Choice(classify.LEARNER_KINDS))
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
def train(data_path, learner, seed, out_dir):
    """Train the three one-vs-rest models and write them to a directory."""
    ds = features.load_dataset(data_path)
    model = classify.train_segmenter(ds, learner, seed=seed)
    os.makedirs(out_dir, exist_ok=True)
    for name, m in zip(("epicardial", "mediastinal", "pericardium"), model.binaries()):
        _atomic_via(os.path.join(out_dir, f"{name}.model"),
                    lambda p, m=m: classify.save_model(p, m))
    meta = {"learner": learner, "schema_hash": model.schema_hash,
            "schema": {"w": ds.schema.neighborhood,
                       "glcm_levels": ds.schema.glcm_levels,
                       "glrlm_levels": ds.schema.glrlm_levels,
                       "sigma": ds.schema.gaussian_sigma}}
    storage.atomic_write_text(os.path.join(out_dir, "model.json"),
                              json.dumps(meta, indent=2) + "\n")
    click.echo(f"trained {learner} models -> {out_dir}")


def _load_segmenter(model_dir):
    with open(os.path.join(model_dir, "model.json")) as f:
        meta = json.load(f)
    parts = [classify.load_model(os.path.join(model_dir, f"{n}.model"))
             for n in ("epicardial", "mediastinal", "pericardium")]
    hashes = {m.schema_hash for m in parts}
    if hashes != {meta["schema_hash"]}:
        raise classify.SchemaMismatchError("model files disagree on schema hash")
    s = meta["schema"]
    schema = features.FeatureSchema(
        neighborhood=s["w"], glcm_levels=s["glcm_levels"],
        glrlm_levels=s["glrlm_levels"], gaussian_sigma=s["sigma"],
    )
    if schema.schema_hash != meta["schema_hash"]:
        raise classify.SchemaMismatchError("model schema hash mismatch")
    return classify.SegmenterModel(*parts, meta["learner"], meta["schema_hash"]), schema


@main.command()
@click.option("--patient", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--model", "model_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
def segment(manifest_path, model_dir, out_dir):
    """Segment a patient; writes one color mask per slice."""
    pid, slices = _windowed_volume(manifest_path)
    model, schema = _load_segmenter(model_dir)
    labels = classify.segment_volume(model, slices, schema)
    storage.save_label_volume(os.path.join(out_dir, pid), labels)
    click.echo(f"segmented {pid}: {len(labels)} slices -> {out_dir}/{pid}")


def _load_mask_tree(root):
    out = {}
    for pid in sorted(os.listdir(root)):
        sub = os.path.join(root, pid)
        if os.path.isdir(sub):
            out[pid] = storage.load_label_volume(sub)
    return out


@main.command()
@click.option("--pred", "pred_dir", required=True, type=click.Path(exists=True))
@click.option("--truth", "truth_dir", required=True, type=click.Path(exists=True))
@click.option("--strict-hybrid", is_flag=True,
              help="Count hybrid predictions as wrong for both fat classes.")
@click.option("--csv", "csv_path", type=click.Path(), default=None)
def evaluate(pred_dir, truth_dir, strict_hybrid, csv_path):
    """Per-patient Dice / TPR / accuracy report against ground truth."""
    preds = _load_mask_tree(pred_dir)
    truths = _load_mask_tree(truth_dir)
    rows = evaluation.per_patient_report(preds, truths,
                                         hybrid_positive=not strict_hybrid)
    click.echo(evaluation.format_report(rows))
    if csv_path:
        storage.atomic_write_text(csv_path, evaluation.report_csv(rows))


@main.command()
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--learners", default="tree,forest,gnb,hyperpipes", show_default=True)
@click.option("--train-fraction", default=0.66, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--csv", "csv_path", type=click.Path(), default=None)
def compare(data_path, learners, train_fraction, seed, csv_path):
    """Accuracy / time / Acc-per-time comparison of the learners."""
    ds = features.load_dataset(data_path)
    kinds = [k.strip() for k in learners.split(",") if k.strip()]
    for k in kinds:
        if k not in classify.LEARNER_KINDS:
            raise click.BadParameter(f"unknown learner {k!r}")
    spec = evaluation.SplitSpec(train_fraction, seed)
    rows = evaluation.compare_classifiers(ds, kinds, spec, seed=seed)
    click.echo(evaluation.format_comparison(rows))
    if csv_path:
        lines = ["learner,accuracy,time_s,acc_per_time"]
        for r in rows:
            lines.append(f"{r.learner},{r.accuracy!r},{r.wall_time!r},"
                         f"{r.acc_per_time!r}" if not r.error
                         else f"{r.learner},error,{r.error},")
        storage.atomic_write_text(csv_path, "\n".join(lines) + "\n")


@main.command()
@click.option("--patients", "list_path", required=True, type=click.Path(exists=True),
              help="Text file: one `manifest_path truth_mask_dir` pair per line.")
@click.option("--sizes", default="3,5,7,9,11,13,15", show_default=True)
@click.option("--learner", default="forest", show_default=True,
              type=click.Choice(classify.LEARNER_KINDS))
@click.option("--sample-rate", default=1.0, show_default=True)
@click.option("--train-fraction", default=0.66, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path(),
              help="Two-column plot data file (size, accuracy).")
def sweep(list_path, sizes, learner, sample_rate, train_fraction, seed, out_path):
    """Accuracy versus neighborhood size."""
    volumes, truths = [], []
    with open(list_path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            manifest_path, truth_dir = line.split()
            pid, slices = _windowed_volume(manifest_path)
            volumes.append((pid, slices))
            truths.append(storage.load_label_volume(truth_dir, n_slices=len(slices)))
    size_list = [int(s) for s in sizes.split(",")]
    spec = evaluation.SplitSpec(train_fraction, seed)
    rows = evaluation.neighborhood_sweep(volumes, truths, size_list, learner, spec,
                                         sample_rate=sample_rate, seed=seed)
    text = "\n".join(f"{s} {a!r}" for s, a in rows) + "\n"
    storage.atomic_write_text(out_path, text)
    for s, a in rows:
        click.echo(f"w={s:<3d} accuracy={a:.4f}")


@main.command("phantom")
@click.option("--spec", "spec_path", type=click.Path(exists=True), default=None,
              help="JSON overriding PhantomSpec fields; `count` sets how many.")
@click.option("--count", default=1, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--noise", default=0.0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
def phantom_cmd(spec_path, count, seed, noise, out_dir):
    """Generate synthetic phantom patients with ground truth."""
    overrides = {}
    if spec_path:
        with open(spec_path) as f:
            overrides = json.load(f)
        count = overrides.pop("count", count)
        seed = overrides.pop("seed", seed)
        noise = overrides.pop("noise_hu", noise)
        for key in ("center", "pattern_offset", "pattern_size"):
            if key in overrides:
                overrides[key] = tuple(overrides[key])
    os.makedirs(out_dir, exist_ok=True)
    positions = []
    for i in range(count):
        spec = phantom.PhantomSpec(seed=seed + i, noise_hu=noise, **overrides)
        vol, truth, pos = phantom.generate_phantom(spec)
        pdir = os.path.join(out_dir, vol.patient_id)
        storage.save_patient_volume(pdir, vol)
        storage.save_label_volume(os.path.join(pdir, "truth"), truth)
        positions.append(f"{vol.patient_id} {pos[0]} {pos[1]}")
        click.echo(f"{vol.patient_id}: {len(vol)} slices -> {pdir}")
    storage.atomic_write_text(os.path.join(out_dir, "planted_positions.txt"),
                              "\n".join(positions) + "\n")


if __name__ == "__main__":
    main()
