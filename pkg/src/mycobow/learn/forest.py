"""Random forest with Gini-impurity splits on random feature subsets.

Per-node randomness is derived from the (seed, tree, root-to-node path)
triple, so a depth-capped tree is an exact truncation of its deeper
counterpart and forests are reproducible bit-for-bit per seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..binio import Reader, Writer
from ..errors import DimensionMismatch, FormatError, SingleClassError

FOREST_MAGIC = b"PVMD"
FOREST_VERSION = 1


@dataclass(frozen=True)
class RfConfig:
    n_trees: int = 100
    max_depth: int | None = None
    max_features: str | int = "sqrt"  # "sqrt", "all", or explicit count
    min_leaf: int = 1
    seed: int = 0


@dataclass
class TreeNode:
    counts: np.ndarray          # class counts of the node's samples
    feature: int = -1           # -1 marks a leaf
    threshold: float = 0.0
    left: "TreeNode" = None
    right: "TreeNode" = None

    @property
    def is_leaf(self) -> bool:
        return self.feature < 0


@dataclass
class RfModel:
    classes: list
    trees: list
    config: RfConfig
    n_features: int

    def summary(self) -> str:
        depths = [_tree_depth(t) for t in self.trees]
        return (f"trees\t{len(self.trees)}\n"
                f"classes\t{len(self.classes)}\n"
                f"max_tree_depth\t{max(depths)}\n")


def _tree_depth(node, depth=0):
    if node.is_leaf:
        return depth
    return max(_tree_depth(node.left, depth + 1),
               _tree_depth(node.right, depth + 1))


def bootstrap_indices(seed: int, tree_idx: int, n: int) -> np.ndarray:
    """In-bag sample indices for one tree; shared with the test suite."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, tree_idx]))
    return rng.integers(0, n, size=n)


def _node_rng(seed, tree_idx, path_code):
    return np.random.default_rng(
        np.random.SeedSequence([seed, tree_idx, path_code])
    )


def _gini_split(X, y_idx, n_classes, feature_ids):
    """Best (impurity, feature, threshold) over candidate features.

    Ties break toward the lower feature index, then lower threshold.
    """
    n = len(y_idx)
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y_idx] = 1.0

    best = (np.inf, -1, 0.0)
    for f in feature_ids:
        values = X[:, f]
        order = np.argsort(values, kind="stable")
        sv = values[order]
        cum = onehot[order].cumsum(axis=0)
        total = cum[-1]

        valid = np.flatnonzero(sv[:-1] < sv[1:])
        if valid.size == 0:
            continue
        left_n = (valid + 1).astype(np.float64)
        right_n = n - left_n
        left_counts = cum[valid]
        right_counts = total[None, :] - left_counts
        gini_left = 1.0 - ((left_counts / left_n[:, None]) ** 2).sum(axis=1)
        gini_right = 1.0 - ((right_counts / right_n[:, None]) ** 2).sum(axis=1)
        impurity = (left_n * gini_left + right_n * gini_right) / n

        pos = int(np.argmin(impurity))
        if impurity[pos] < best[0] - 1e-15:
            cut = valid[pos]
            best = (float(impurity[pos]), int(f),
                    float(0.5 * (sv[cut] + sv[cut + 1])))
    return best


def _grow(X, y_idx, sample_ids, n_classes, cfg, tree_idx, depth, path_code,
          n_subset):
    counts = np.bincount(y_idx[sample_ids], minlength=n_classes)
    node = TreeNode(counts=counts)
    if (cfg.max_depth is not None and depth >= cfg.max_depth) \
            or counts.max() == counts.sum() \
            or len(sample_ids) < 2 * cfg.min_leaf:
        return node

    rng = _node_rng(cfg.seed, tree_idx, path_code)
    feature_ids = np.sort(rng.choice(X.shape[1], size=n_subset, replace=False))
    impurity, feature, threshold = _gini_split(
        X[sample_ids], y_idx[sample_ids], n_classes, feature_ids
    )
    if feature < 0:
        return node

    mask = X[sample_ids, feature] < threshold
    left_ids = sample_ids[mask]
    right_ids = sample_ids[~mask]
    if len(left_ids) < cfg.min_leaf or len(right_ids) < cfg.min_leaf:
        return node

    node.feature = feature
    node.threshold = threshold
    node.left = _grow(X, y_idx, left_ids, n_classes, cfg, tree_idx,
                      depth + 1, path_code * 2, n_subset)
    node.right = _grow(X, y_idx, right_ids, n_classes, cfg, tree_idx,
                       depth + 1, path_code * 2 + 1, n_subset)
    return node


def rf_train(X, y, cfg: RfConfig = RfConfig()) -> RfModel:
    """Fit bootstrap-sampled Gini trees; deterministic per seed."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("X must be an MxL matrix with M >= 2")
    labels = list(y)
    classes = sorted(set(labels))
    if len(classes) < 2:
        raise SingleClassError(f"need two classes, got {classes}")
    index = {cls: i for i, cls in enumerate(classes)}
    y_idx = np.asarray([index[v] for v in labels])

    if cfg.max_features == "sqrt":
        n_subset = max(1, int(np.sqrt(X.shape[1])))
    elif cfg.max_features == "all":
        n_subset = X.shape[1]
    else:
        n_subset = min(int(cfg.max_features), X.shape[1])

    trees = []
    for t in range(cfg.n_trees):
        in_bag = bootstrap_indices(cfg.seed, t, X.shape[0])
        trees.append(_grow(X, y_idx, in_bag, len(classes), cfg, t,
                           depth=0, path_code=1, n_subset=n_subset))
    return RfModel(classes=classes, trees=trees, config=cfg,
                   n_features=X.shape[1])


def _tree_leaf(node, row):
    while not node.is_leaf:
        node = node.left if row[node.feature] < node.threshold else node.right
    return node


def tree_predict_idx(tree, X) -> np.ndarray:
    return np.asarray(
        [int(np.argmax(_tree_leaf(tree, row).counts)) for row in X]
    )


def rf_decision_values(model: RfModel, X) -> np.ndarray:
    """Per-class tree-vote fractions (rows sum to 1)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != model.n_features:
        raise DimensionMismatch(
            f"features {X.shape[1]} vs model {model.n_features}"
        )
    votes = np.zeros((X.shape[0], len(model.classes)))
    for tree in model.trees:
        pred = tree_predict_idx(tree, X)
        votes[np.arange(X.shape[0]), pred] += 1.0
    return votes / len(model.trees)


def rf_predict(model: RfModel, X) -> list:
    """Majority vote over trees; ties to the lowest class index."""
    votes = rf_decision_values(model, X)
    return [model.classes[i] for i in votes.argmax(axis=1)]


def _write_tree(w: Writer, node):
    if node.is_leaf:
        w.u8(0)
        w.i64_array(node.counts)
    else:
        w.u8(1)
        w.i64_array(node.counts)
        w.u32(node.feature)
        w.f64(node.threshold)
        _write_tree(w, node.left)
        _write_tree(w, node.right)


def _read_tree(r: Reader, n_classes):
    tag = r.u8()
    counts = r.i64_array(n_classes)
    if tag == 0:
        return TreeNode(counts=counts)
    feature = r.u32()
    threshold = r.f64()
    left = _read_tree(r, n_classes)
    right = _read_tree(r, n_classes)
    return TreeNode(counts=counts, feature=feature, threshold=threshold,
                    left=left, right=right)


def save_forest(model: RfModel, path) -> None:
    w = Writer()
    w.raw(FOREST_MAGIC)
    w.u32(FOREST_VERSION)
    w.text("forest")
    cfg = model.config
    w.u32(cfg.n_trees)
    w.i64_array(np.asarray([-1 if cfg.max_depth is None else cfg.max_depth]))
    w.text(str(cfg.max_features))
    w.u32(cfg.min_leaf)
    w.u32(cfg.seed)
    w.u32(model.n_features)
    kinds = {str: 0, int: 1}
    w.u8(kinds.get(type(model.classes[0]), 0))
    w.u32(len(model.classes))
    for cls in model.classes:
        w.text(str(cls))
    for tree in model.trees:
        _write_tree(w, tree)
    w.save(path)


def load_forest(path) -> RfModel:
    with open(path, "rb") as fh:
        r = Reader(fh.read(), name=str(path))
    if r.take(4) != FOREST_MAGIC or r.u32() != FOREST_VERSION:
        raise FormatError(f"{path}: bad magic or version")
    if r.text() != "forest":
        raise FormatError(f"{path}: not a forest model file")
    n_trees = r.u32()
    depth = int(r.i64_array(1)[0])
    raw_features = r.text()
    max_features = raw_features if raw_features in ("sqrt", "all") \
        else int(raw_features)
    cfg = RfConfig(
        n_trees=n_trees,
        max_depth=None if depth < 0 else depth,
        max_features=max_features,
        min_leaf=r.u32(),
        seed=r.u32(),
    )
    n_features = r.u32()
    kind = r.u8()
    count = r.u32()
    cast = (str, int)[kind]
    classes = [cast(r.text()) for _ in range(count)]
    trees = [_read_tree(r, len(classes)) for _ in range(n_trees)]
    r.done()
    return RfModel(classes=classes, trees=trees, config=cfg,
                   n_features=n_features)
