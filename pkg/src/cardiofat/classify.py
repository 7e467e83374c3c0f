"""One-vs-rest learners for the three tissue classes, label fusion, and
volume segmentation.

Four learner families are provided: a CART-style decision tree with
optional reduced-error pruning, a bootstrapped random forest, Gaussian
naive Bayes, and a HyperPipes-style interval baseline. Each tissue class
gets its own binary model; the fusion rule combines the three decisions
into the final label.

Split selection maximizes score = (pL^2 + nL^2)/tL + (pR^2 + nR^2)/tR,
which is equivalent to minimizing weighted Gini impurity. Near-ties are
re-compared with exact integer arithmetic so the chosen split is the exact
rational optimum with ties broken by lowest feature index, then lowest
threshold.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import labels as L
from .features import FeatureSchema, extract_slice

LEARNER_KINDS = ("tree", "forest", "gnb", "hyperpipes")

MODEL_MAGIC = "cardiofat-model v1"


class EmptyDataError(ValueError):
    pass


class MissingClassError(ValueError):
    pass


class SchemaMismatchError(ValueError):
    pass


# ---------------------------------------------------------------------------
# decision tree


class TreeNode:
    """Split node or leaf; every node keeps its training class counts."""

    __slots__ = ("feature", "threshold", "left", "right", "pos", "neg")

    def __init__(self, pos, neg):
        self.feature = -1
        self.threshold = 0.0
        self.left = None
        self.right = None
        self.pos = int(pos)
        self.neg = int(neg)

    @property
    def is_leaf(self):
        return self.feature < 0


def _exact_score_gt(a, b):
    """Compare split scores (aL/tL + aR/tR) exactly as rationals."""
    aL1, tL1, aR1, tR1 = (int(v) for v in a)
    aL2, tL2, aR2, tR2 = (int(v) for v in b)
    lhs = (aL1 * tR1 + aR1 * tL1) * (tL2 * tR2)
    rhs = (aL2 * tR2 + aR2 * tL2) * (tL1 * tR1)
    return lhs > rhs


def best_split(X, y, feature_indices, min_leaf=1):
    """Exact Gini-optimal (feature, threshold) over midpoint candidates.

    Candidate thresholds are midpoints of consecutive distinct sorted values
    with both sides >= min_leaf; the partition rule is value <= threshold.
    Returns None when no candidate exists.
    """
    n = len(y)
    pos_total = int(y.sum())
    per_feature = []
    best_float = -math.inf
    for f in feature_indices:
        order = np.argsort(X[:, f], kind="stable")
        v = X[order, f]
        pos_cum = np.cumsum(y[order].astype(np.int64))
        cut = np.flatnonzero(v[1:] > v[:-1])
        if cut.size == 0:
            per_feature.append(None)
            continue
        thr = (v[cut] + v[cut + 1]) / 2.0
        ok = (thr > v[cut]) & (thr < v[cut + 1])
        tL = cut + 1
        ok &= (tL >= min_leaf) & (n - tL >= min_leaf)
        if not ok.any():
            per_feature.append(None)
            continue
        cut, thr, tL = cut[ok], thr[ok], tL[ok]
        pL = pos_cum[cut]
        nL = tL - pL
        tR = n - tL
        pR = pos_total - pL
        nR = tR - pR
        aL = pL * pL + nL * nL
        aR = pR * pR + nR * nR
        score = aL / tL + aR / tR
        per_feature.append((thr, score, aL, tL, aR, tR))
        m = float(score.max())
        if m > best_float:
            best_float = m
    if best_float == -math.inf:
        return None
    cutoff = best_float - 1e-12 * max(1.0, abs(best_float))
    best = None  # (key, f, thr)
    for f, entry in zip(feature_indices, per_feature):
        if entry is None:
            continue
        thr, score, aL, tL, aR, tR = entry
        for i in np.flatnonzero(score >= cutoff):
            key = (aL[i], tL[i], aR[i], tR[i])
            if best is None or _exact_score_gt(key, best[0]):
                best = (key, int(f), float(thr[i]))
    return best[1], best[2]


def _grow(X, y, depth, max_depth, min_leaf, rng, mtry):
    pos = int(y.sum())
    node = TreeNode(pos, len(y) - pos)
    if pos == 0 or pos == len(y):
        return node
    if max_depth is not None and depth >= max_depth:
        return node
    if len(y) < 2 * min_leaf:
        return node
    d = X.shape[1]
    if mtry is not None and mtry < d:
        feats = np.sort(rng.choice(d, size=mtry, replace=False))
    else:
        feats = np.arange(d)
    split = best_split(X, y, feats, min_leaf=min_leaf)
    if split is None:
        return node
    node.feature, node.threshold = split
    mask = X[:, node.feature] <= node.threshold
    node.left = _grow(X[mask], y[mask], depth + 1, max_depth, min_leaf, rng, mtry)
    node.right = _grow(X[~mask], y[~mask], depth + 1, max_depth, min_leaf, rng, mtry)
    return node


def _tree_errors_as_leaf(node, yh):
    pred = node.pos > node.neg
    return int((yh != pred).sum())


def _reduced_error_prune(node, Xh, yh):
    """Bottom-up collapse of subtrees that do not help holdout accuracy.

    Returns the holdout error count of the (possibly pruned) subtree; never
    worse than keeping the subtree, by construction.
    """
    leaf_err = _tree_errors_as_leaf(node, yh)
    if node.is_leaf:
        return leaf_err
    mask = Xh[:, node.feature] <= node.threshold
    sub_err = _reduced_error_prune(node.left, Xh[mask], yh[mask])
    sub_err += _reduced_error_prune(node.right, Xh[~mask], yh[~mask])
    if leaf_err <= sub_err:
        node.feature = -1
        node.left = None
        node.right = None
        return leaf_err
    return sub_err


@dataclass
class TreeModel:
    root: TreeNode
    schema_hash: str = ""


@dataclass
class ForestModel:
    trees: list
    n_trees: int
    mtry: int
    seed: int
    schema_hash: str = ""


@dataclass
class GaussianNBModel:
    # index 0 = positive class, 1 = negative
    means: np.ndarray  # (2, d)
    variances: np.ndarray  # (2, d), floored
    log_priors: np.ndarray  # (2,)
    schema_hash: str = ""


@dataclass
class HyperPipesModel:
    # declaration order: positive first, then negative; ties go to positive
    mins: np.ndarray  # (2, d)
    maxs: np.ndarray  # (2, d)
    schema_hash: str = ""


def train_tree(
    X,
    y,
    max_depth=None,
    min_leaf=1,
    prune=None,
    prune_holdout=0.1,
    prune_seed=0,
    schema_hash="",
):
    """CART-style greedy binary tree.

    prune: None or "reduced_error"; pruning grows the tree on a seeded
    (1 - prune_holdout) subset and collapses subtrees that do not hurt
    holdout accuracy.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=bool)
    if len(y) == 0:
        raise EmptyDataError("cannot train on an empty dataset")
    rng = np.random.default_rng(0)
    if prune == "reduced_error" and len(y) >= 10:
        perm = np.random.default_rng(prune_seed).permutation(len(y))
        n_hold = max(1, int(round(len(y) * prune_holdout)))
        hold, grow = perm[:n_hold], perm[n_hold:]
        root = _grow(X[grow], y[grow], 0, max_depth, min_leaf, rng, None)
        before = _subtree_errors(root, X[hold], y[hold])
        after = _reduced_error_prune(root, X[hold], y[hold])
        assert after <= before
    else:
        root = _grow(X, y, 0, max_depth, min_leaf, rng, None)
    return TreeModel(root, schema_hash)


def _subtree_errors(node, Xh, yh):
    if node.is_leaf:
        return _tree_errors_as_leaf(node, yh)
    mask = Xh[:, node.feature] <= node.threshold
    return _subtree_errors(node.left, Xh[mask], yh[mask]) + _subtree_errors(
        node.right, Xh[~mask], yh[~mask]
    )


def default_mtry(d):
    return int(math.floor(math.log2(d))) + 1


def train_forest(
    X, y, n_trees=10, mtry=None, seed=0, max_depth=None, min_leaf=1,
    bootstrap=True, schema_hash="",
):
    """Bootstrapped forest of unpruned trees; each tree draws its bootstrap
    sample and per-split feature subsets from its own generator seeded by
    (seed, tree_index), so results are order-independent."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=bool)
    if len(y) == 0:
        raise EmptyDataError("cannot train on an empty dataset")
    d = X.shape[1]
    if mtry is None:
        mtry = default_mtry(d)
    trees = []
    for t in range(n_trees):
        rng = np.random.default_rng([seed, t])
        if bootstrap:
            idx = rng.integers(0, len(y), size=len(y))
            Xb, yb = X[idx], y[idx]
        else:
            Xb, yb = X, y
        trees.append(_grow(Xb, yb, 0, max_depth, min_leaf, rng, mtry))
    return ForestModel(trees, n_trees, mtry, seed, schema_hash)


VAR_FLOOR = 1e-9


def train_gnb(X, y, schema_hash=""):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=bool)
    if len(y) == 0:
        raise EmptyDataError("cannot train on an empty dataset")
    if y.all() or not y.any():
        raise MissingClassError("naive Bayes needs both classes present")
    means = np.empty((2, X.shape[1]))
    variances = np.empty((2, X.shape[1]))
    log_priors = np.empty(2)
    for k, mask in enumerate((y, ~y)):
        rows = X[mask]
        means[k] = rows.mean(axis=0)
        variances[k] = np.maximum(rows.var(axis=0), VAR_FLOOR)
        log_priors[k] = math.log(mask.sum() / len(y))
    return GaussianNBModel(means, variances, log_priors, schema_hash)


def train_hyperpipes(X, y, schema_hash=""):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=bool)
    if len(y) == 0:
        raise EmptyDataError("cannot train on an empty dataset")
    if y.all() or not y.any():
        raise MissingClassError("hyperpipes needs both classes present")
    mins = np.empty((2, X.shape[1]))
    maxs = np.empty((2, X.shape[1]))
    for k, mask in enumerate((y, ~y)):
        rows = X[mask]
        mins[k] = rows.min(axis=0)
        maxs[k] = rows.max(axis=0)
    return HyperPipesModel(mins, maxs, schema_hash)


# ---------------------------------------------------------------------------
# prediction


def _tree_leaf(root, v):
    node = root
    while not node.is_leaf:
        node = node.left if v[node.feature] <= node.threshold else node.right
    return node


def _flatten_tree(root, feature, threshold, left, right, pos, neg):
    idx = len(feature)
    feature.append(root.feature)
    threshold.append(root.threshold)
    left.append(-1)
    right.append(-1)
    pos.append(root.pos)
    neg.append(root.neg)
    if not root.is_leaf:
        left[idx] = _flatten_tree(root.left, feature, threshold, left, right, pos, neg)
        right[idx] = _flatten_tree(root.right, feature, threshold, left, right, pos, neg)
    return idx


def _flatten_forest(trees):
    feature, threshold, left, right, pos, neg, roots = [], [], [], [], [], [], []
    for t in trees:
        roots.append(_flatten_tree(t, feature, threshold, left, right, pos, neg))
    return (
        np.array(feature, dtype=np.int32),
        np.array(threshold, dtype=np.float64),
        np.array(left, dtype=np.int32),
        np.array(right, dtype=np.int32),
        np.array(pos, dtype=np.int64),
        np.array(neg, dtype=np.int64),
        np.array(roots, dtype=np.int32),
    )


@njit(cache=True)
def _forest_votes_kernel(X, feature, threshold, left, right, pos, neg, roots, votes):
    for r in range(X.shape[0]):
        v = 0
        for t in range(roots.size):
            node = roots[t]
            while feature[node] >= 0:
                if X[r, feature[node]] <= threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            if pos[node] > neg[node]:
                v += 1
        votes[r] = v


def predict_batch(model, X):
    """(decisions, scores) for a batch of feature rows; scores lie in [0, 1]."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    if isinstance(model, TreeModel):
        decisions = np.empty(X.shape[0], dtype=bool)
        scores = np.empty(X.shape[0])
        for r in range(X.shape[0]):
            leaf = _tree_leaf(model.root, X[r])
            total = leaf.pos + leaf.neg
            decisions[r] = leaf.pos > leaf.neg
            scores[r] = leaf.pos / total if total else 0.0
        return decisions, scores
    if isinstance(model, ForestModel):
        votes = np.empty(X.shape[0], dtype=np.int64)
        flat = _flatten_forest(model.trees)
        _forest_votes_kernel(X, *flat, votes)
        scores = votes / model.n_trees
        return scores > 0.5, scores
    if isinstance(model, GaussianNBModel):
        ll = np.empty((2, X.shape[0]))
        for k in range(2):
            ll[k] = model.log_priors[k] - 0.5 * (
                ((X - model.means[k]) ** 2 / model.variances[k]).sum(axis=1)
                + np.log(2.0 * np.pi * model.variances[k]).sum()
            )
        # sigmoid of the log-likelihood gap; clip keeps exp() from overflowing
        scores = 1.0 / (1.0 + np.exp(np.clip(ll[1] - ll[0], -700.0, 700.0)))
        return ll[0] > ll[1], scores
    if isinstance(model, HyperPipesModel):
        d = X.shape[1]
        in_pos = ((X >= model.mins[0]) & (X <= model.maxs[0])).sum(axis=1)
        in_neg = ((X >= model.mins[1]) & (X <= model.maxs[1])).sum(axis=1)
        scores = in_pos / d
        # tie goes to the first-declared class, which is the positive one
        return in_pos >= in_neg, scores
    raise TypeError(f"unknown model type {type(model)!r}")


def predict_binary(model, v):
    """(decision, score) for one feature vector."""
    decisions, scores = predict_batch(model, np.asarray(v, dtype=np.float64)[None, :])
    return bool(decisions[0]), float(scores[0])


# ---------------------------------------------------------------------------
# fusion and segmentation


def fuse_labels(epi, medi, peri):
    """Combine the three binary decisions into the final pixel label.

    Both fat classes claiming a pixel, or the pericardium claiming an
    otherwise unlabeled pixel, yield the hybrid class.
    """
    if epi and medi:
        return L.HYBRID
    if epi:
        return L.EPICARDIAL
    if medi:
        return L.MEDIASTINAL
    if peri:
        return L.HYBRID
    return L.UNCLASSIFIED


# index = epi*4 + medi*2 + peri
FUSE_LUT = np.array(
    [
        fuse_labels(bool(code & 4), bool(code & 2), bool(code & 1))
        for code in range(8)
    ],
    dtype=np.uint8,
)


@dataclass
class SegmenterModel:
    """Three one-vs-rest binary models plus the fusion rule."""

    epi: object
    medi: object
    peri: object
    learner_kind: str
    schema_hash: str

    def binaries(self):
        return (self.epi, self.medi, self.peri)


LEARNER_TRAINERS = {
    "tree": lambda X, y, seed, h: train_tree(
        X, y, prune="reduced_error", prune_seed=seed, schema_hash=h
    ),
    "forest": lambda X, y, seed, h: train_forest(X, y, seed=seed, schema_hash=h),
    "gnb": lambda X, y, seed, h: train_gnb(X, y, schema_hash=h),
    "hyperpipes": lambda X, y, seed, h: train_hyperpipes(X, y, schema_hash=h),
}


def train_segmenter(dataset, learner_kind, seed=0):
    """Train the three one-vs-rest binary models on a labeled dataset."""
    if learner_kind not in LEARNER_TRAINERS:
        raise ValueError(f"unknown learner {learner_kind!r}")
    trainer = LEARNER_TRAINERS[learner_kind]
    h = dataset.schema.schema_hash
    models = {}
    for name, target in (
        ("epi", L.EPICARDIAL),
        ("medi", L.MEDIASTINAL),
        ("peri", L.PERICARDIUM),
    ):
        y = dataset.y == target
        models[name] = trainer(dataset.X, y, seed, h)
    return SegmenterModel(
        models["epi"], models["medi"], models["peri"], learner_kind, h
    )


def segment_slice(model, windowed, z, schema):
    """Label grid for one aligned fat-windowed slice."""
    if model.schema_hash != schema.schema_hash:
        raise SchemaMismatchError("model and schema hashes differ")
    windowed = np.asarray(windowed)
    out = np.zeros(windowed.shape, dtype=np.uint8)
    if not windowed.any():
        return out
    coords, X = extract_slice(windowed, z, schema)
    code = np.zeros(X.shape[0], dtype=np.uint8)
    for bit, m in zip((4, 2, 1), model.binaries()):
        decisions, _ = predict_batch(m, X)
        code |= decisions.astype(np.uint8) * bit
    out[coords[:, 1], coords[:, 0]] = FUSE_LUT[code]
    return out


def segment_volume(model, windowed_slices, schema):
    return [segment_slice(model, s, z, schema) for z, s in enumerate(windowed_slices)]


# ---------------------------------------------------------------------------
# model files


def _write_array(f, name, arr):
    flat = np.asarray(arr).ravel()
    f.write(name + " " + " ".join(repr(float(v)) for v in flat) + "\n")


def save_model(path, model):
    """Versioned text serialization; deterministic for identical models."""
    with open(path, "w") as f:
        f.write(MODEL_MAGIC + "\n")
        if isinstance(model, TreeModel):
            f.write("learner tree\n")
            f.write(f"schema {model.schema_hash}\n")
            _write_tree_block(f, model.root)
        elif isinstance(model, ForestModel):
            f.write("learner forest\n")
            f.write(f"schema {model.schema_hash}\n")
            f.write(f"params n_trees={model.n_trees} mtry={model.mtry} seed={model.seed}\n")
            for t in model.trees:
                _write_tree_block(f, t)
        elif isinstance(model, GaussianNBModel):
            f.write("learner gnb\n")
            f.write(f"schema {model.schema_hash}\n")
            _write_array(f, "means", model.means)
            _write_array(f, "variances", model.variances)
            _write_array(f, "log_priors", model.log_priors)
            f.write(f"d {model.means.shape[1]}\n")
        elif isinstance(model, HyperPipesModel):
            f.write("learner hyperpipes\n")
            f.write(f"schema {model.schema_hash}\n")
            _write_array(f, "mins", model.mins)
            _write_array(f, "maxs", model.maxs)
            f.write(f"d {model.mins.shape[1]}\n")
        else:
            raise TypeError(f"cannot serialize {type(model)!r}")


def _write_tree_block(f, root):
    feature, threshold, left, right, pos, neg, _ = _flatten_forest([root])
    f.write(f"tree {feature.size}\n")
    for i in range(feature.size):
        f.write(
            f"{feature[i]} {float(threshold[i])!r} {left[i]} {right[i]} {pos[i]} {neg[i]}\n"
        )


def _read_tree_block(lines, i):
    head = lines[i].split()
    assert head[0] == "tree"
    n = int(head[1])
    nodes = [None] * n
    for k in range(n):
        fz, thr, lt, rt, pos, neg = lines[i + 1 + k].split()
        node = TreeNode(int(pos), int(neg))
        node.feature = int(fz)
        node.threshold = float(thr)
        nodes[k] = (node, int(lt), int(rt))
    for node, lt, rt in nodes:
        if node.feature >= 0:
            node.left = nodes[lt][0]
            node.right = nodes[rt][0]
    return nodes[0][0], i + 1 + n


def load_model(path):
    with open(path) as f:
        lines = f.read().splitlines()
    if lines[0] != MODEL_MAGIC:
        raise ValueError(f"{path}: not a cardiofat model file")
    kind = lines[1].split()[1]
    schema_hash = lines[2].split()[1]
    if kind == "tree":
        root, _ = _read_tree_block(lines, 3)
        return TreeModel(root, schema_hash)
    if kind == "forest":
        kv = dict(tok.split("=") for tok in lines[3].split()[1:])
        trees = []
        i = 4
        for _ in range(int(kv["n_trees"])):
            root, i = _read_tree_block(lines, i)
            trees.append(root)
        return ForestModel(
            trees, int(kv["n_trees"]), int(kv["mtry"]), int(kv["seed"]), schema_hash
        )
    if kind == "gnb":
        d = int(lines[6].split()[1])
        means = np.array([float(v) for v in lines[3].split()[1:]]).reshape(2, d)
        variances = np.array([float(v) for v in lines[4].split()[1:]]).reshape(2, d)
        log_priors = np.array([float(v) for v in lines[5].split()[1:]])
        return GaussianNBModel(means, variances, log_priors, schema_hash)
    if kind == "hyperpipes":
        d = int(lines[5].split()[1])
        mins = np.array([float(v) for v in lines[3].split()[1:]]).reshape(2, d)
        maxs = np.array([float(v) for v in lines[4].split()[1:]]).reshape(2, d)
        return HyperPipesModel(mins, maxs, schema_hash)
    raise ValueError(f"unknown learner kind {kind!r}")
