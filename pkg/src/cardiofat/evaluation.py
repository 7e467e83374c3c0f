"""Metrics (accuracy, true-positive rate, Dice), the random-split protocol,
the classifier comparison harness, the neighborhood-size sweep, and
per-patient segmentation reports.

Hybrid predictions count as positive for both fat classes by default; a
strict mode treats them as positive for neither.
"""

import time
from dataclasses import dataclass, replace

import numpy as np

from . import labels as L
from .classify import LEARNER_TRAINERS, predict_batch, train_segmenter
from .features import Dataset, FeatureSchema, build_dataset


class UndefinedMetricError(ValueError):
    pass


class ShapeError(ValueError):
    pass


class MissingDataError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other):
        return ConfusionCounts(
            self.tp + other.tp,
            self.fp + other.fp,
            self.fn + other.fn,
            self.tn + other.tn,
        )

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.66
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")


def accuracy(c):
    if c.total == 0:
        raise UndefinedMetricError("no counted pixels")
    return (c.tp + c.tn) / c.total


def tpr(c):
    if c.tp + c.fn == 0:
        raise UndefinedMetricError("no positive truth pixels")
    return c.tp / (c.tp + c.fn)


def dice(c):
    if 2 * c.tp + c.fp + c.fn == 0:
        raise UndefinedMetricError("both masks empty")
    return 2 * c.tp / (2 * c.tp + c.fp + c.fn)


def _positive_mask(lab, target, hybrid_positive):
    pos = lab == target
    if hybrid_positive and target in (L.EPICARDIAL, L.MEDIASTINAL):
        pos |= lab == L.HYBRID
    return pos


def confusion_from_masks(pred_slices, truth_slices, target, hybrid_positive=True):
    """Pixel tally over foreground (truth != background) pixels.

    Hybrid counts as positive for both fat classes unless hybrid_positive is
    off (strict mode).
    """
    if len(pred_slices) != len(truth_slices):
        raise ShapeError("slice count mismatch")
    tp = fp = fn = tn = 0
    for pred, truth in zip(pred_slices, truth_slices):
        pred = np.asarray(pred)
        truth = np.asarray(truth)
        if pred.shape != truth.shape:
            raise ShapeError(f"mask shape {pred.shape} vs {truth.shape}")
        fg = truth != L.BACKGROUND
        p = _positive_mask(pred, target, hybrid_positive)[fg]
        t = _positive_mask(truth, target, hybrid_positive)[fg]
        tp += int((p & t).sum())
        fp += int((p & ~t).sum())
        fn += int((~p & t).sum())
        tn += int((~p & ~t).sum())
    return ConfusionCounts(tp, fp, fn, tn)


def split(dataset, spec):
    """Seeded uniform shuffle; the first ceil(n * fraction) rows train."""
    n = len(dataset)
    if n == 0:
        raise MissingDataError("empty dataset")
    perm = np.random.default_rng(spec.seed).permutation(n)
    n_train = int(np.ceil(n * spec.train_fraction))
    tr, te = perm[:n_train], perm[n_train:]

    def take(idx):
        return Dataset(
            dataset.schema,
            dataset.X[idx],
            dataset.y[idx],
            dataset.patient_ids,
            dataset.patient_idx[idx],
            dataset.zxy[idx],
        )

    return take(tr), take(te)


@dataclass
class ComparisonRow:
    learner: str
    accuracy: float
    wall_time: float
    error: str = ""

    @property
    def acc_per_time(self):
        return 100.0 * self.accuracy / self.wall_time


def mean_binary_accuracy(train, test, learner_kind, seed=0):
    """Mean accuracy over the three one-vs-rest problems."""
    trainer = LEARNER_TRAINERS[learner_kind]
    accs = []
    for target in L.TISSUE_CLASSES:
        model = trainer(train.X, train.y == target, seed, train.schema.schema_hash)
        decisions, _ = predict_batch(model, test.X)
        accs.append(float((decisions == (test.y == target)).mean()))
    return float(np.mean(accs))


def compare_classifiers(dataset, learner_kinds, spec, seed=0):
    """One row per learner: mean one-vs-rest accuracy on the held-out split
    and the train+evaluate wall time; sorted by accuracy descending.
    Failures become error rows instead of aborting the table."""
    train, test = split(dataset, spec)
    rows = []
    for kind in learner_kinds:
        t0 = time.perf_counter()
        try:
            acc = mean_binary_accuracy(train, test, kind, seed=seed)
        except Exception as exc:  # noqa: BLE001 - per-row error reporting
            rows.append(ComparisonRow(kind, float("nan"), 0.0, error=str(exc)))
            continue
        rows.append(ComparisonRow(kind, acc, time.perf_counter() - t0))
    rows.sort(key=lambda r: (-(r.accuracy if r.accuracy == r.accuracy else -1.0)))
    return rows


def format_comparison(rows):
    """Four-column report: Algorithm, Accuracy, Time (s), Acc/Time."""
    lines = [f"{'Algorithm':<12} {'Accuracy':>9} {'Time (s)':>9} {'Acc/Time':>9}"]
    for r in rows:
        if r.error:
            lines.append(f"{r.learner:<12} failed: {r.error}")
            continue
        lines.append(
            f"{r.learner:<12} {100 * r.accuracy:>8.1f}% {r.wall_time:>9.2f} "
            f"{r.acc_per_time:>9.2f}"
        )
    return "\n".join(lines)


def acc_per_time(accuracy_percent, seconds):
    """Accuracy in percent divided by wall time in seconds."""
    return accuracy_percent / seconds


def neighborhood_sweep(
    volumes,
    label_volumes,
    sizes,
    learner_kind,
    spec,
    sample_rate=1.0,
    seed=0,
):
    """Re-extract features at each neighborhood size, train, evaluate.

    Returns [(size, accuracy)] suitable for plotting.
    """
    rows = []
    for size in sizes:
        if size % 2 == 0 or size < 3:
            raise ValueError(f"neighborhood size {size} must be odd and >= 3")
        schema = FeatureSchema(neighborhood=size)
        ds = build_dataset(volumes, label_volumes, schema, sample_rate=sample_rate, seed=seed)
        train, test = split(ds, spec)
        acc = mean_binary_accuracy(train, test, learner_kind, seed=seed)
        rows.append((size, acc))
    return rows


@dataclass
class PatientReportRow:
    patient_id: str
    target: int
    dice: float
    tpr: float
    accuracy: float
    unclassified_rate: float


def per_patient_report(pred_volumes, truth_volumes, hybrid_positive=True):
    """Per patient and class: Dice, TPR, accuracy, unclassified rate, plus
    macro means across patients.

    Both arguments map patient_id -> list of label slices.
    """
    missing = set(truth_volumes) - set(pred_volumes)
    if missing:
        raise MissingDataError(f"missing predictions for {sorted(missing)}")
    rows = []
    for pid in sorted(truth_volumes):
        pred = pred_volumes[pid]
        truth = truth_volumes[pid]
        fg = sum(int((np.asarray(t) != L.BACKGROUND).sum()) for t in truth)
        uncls = sum(
            int(((np.asarray(p) == L.UNCLASSIFIED) & (np.asarray(t) != L.BACKGROUND)).sum())
            for p, t in zip(pred, truth)
        )
        u_rate = uncls / fg if fg else 0.0
        for target in L.TISSUE_CLASSES:
            c = confusion_from_masks(pred, truth, target, hybrid_positive)
            try:
                d = dice(c)
            except UndefinedMetricError:
                continue
            rows.append(
                PatientReportRow(pid, target, d, tpr(c), accuracy(c), u_rate)
            )
    macro = []
    for target in L.TISSUE_CLASSES:
        sub = [r for r in rows if r.target == target]
        if not sub:
            continue
        macro.append(
            PatientReportRow(
                "MACRO_MEAN",
                target,
                float(np.mean([r.dice for r in sub])),
                float(np.mean([r.tpr for r in sub])),
                float(np.mean([r.accuracy for r in sub])),
                float(np.mean([r.unclassified_rate for r in sub])),
            )
        )
    return rows + macro


def format_report(rows):
    lines = [
        f"{'Patient':<14} {'Class':<12} {'Dice':>7} {'T.P.':>7} {'Acc':>7} {'Uncls':>7}"
    ]
    for r in rows:
        lines.append(
            f"{r.patient_id:<14} {L.LABEL_NAMES[r.target]:<12} "
            f"{100 * r.dice:>6.1f}% {100 * r.tpr:>6.1f}% "
            f"{100 * r.accuracy:>6.1f}% {100 * r.unclassified_rate:>6.1f}%"
        )
    return "\n".join(lines)


def report_csv(rows):
    out = ["patient,class,dice,tpr,accuracy,unclassified_rate"]
    for r in rows:
        out.append(
            f"{r.patient_id},{L.LABEL_NAMES[r.target]},{r.dice!r},{r.tpr!r},"
            f"{r.accuracy!r},{r.unclassified_rate!r}"
        )
    return "\n".join(out) + "\n"
