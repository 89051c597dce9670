"""Experimental protocol: preparation-wise outer folds, inner grid search,
patch- and scan-level accuracy reports, and the explanatory analyses.

The one rule enforced everywhere: a scan's patches never appear on both
sides of any split, outer or inner.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import BG_LABEL, SPECIES
from .descriptors import DescriptorSet
from .encode import (ENCODING_BOW, ENCODING_FV, EncodedVector, encode_bow,
                     encode_fv)
from .errors import (EmptyGrid, LengthMismatch, MissingSpecies,
                     MixedEncodingKinds, MycobowError, NoForegroundPatches)
from .vocab import gmm_fit, kmeans_fit, subsample_descriptors

DEFAULT_BOW_K = (5, 10, 20, 50, 100, 200, 500)
DEFAULT_FV_K = (5, 10, 20, 50)
DEFAULT_KERNELS = ("linear", "rbf")
DEFAULT_C = (1.0, 10.0, 100.0, 1000.0)
DEFAULT_GAMMA = (0.001, 0.0001)


@dataclass(frozen=True)
class FoldPlan:
    """Outer split: preparation 1 scans vs preparation 2 scans."""

    fold_1: tuple
    fold_2: tuple

    def folds(self):
        return (self.fold_1, self.fold_2)


@dataclass(frozen=True)
class ParamGrid:
    bow_k: tuple = DEFAULT_BOW_K
    fv_k: tuple = DEFAULT_FV_K
    svm_kernel: tuple = DEFAULT_KERNELS
    svm_C: tuple = DEFAULT_C
    svm_gamma: tuple = DEFAULT_GAMMA


@dataclass(frozen=True)
class GridPoint:
    """One candidate: vocabulary size plus classifier hyperparameters."""

    k: int
    kernel: str = None   # None for random forest
    C: float = None
    gamma: float = None  # None for the linear kernel

    def describe(self) -> str:
        parts = [f"k={self.k}"]
        if self.kernel is not None:
            parts.append(f"kernel={self.kernel}")
            parts.append(f"C={self.C:g}")
            if self.gamma is not None:
                parts.append(f"gamma={self.gamma:g}")
        return " ".join(parts)


@dataclass
class PatchTable:
    """Per-patch rows of one dataset slice: ids, labels, descriptors.

    Augmented rows are training-time extras; validation and test slices
    must drop them via ``without_augmented``.
    """

    patch_ids: list
    scan_ids: list
    species: list
    preparations: list
    gates: list  # "fg" | "bg"
    dsets: list  # DescriptorSet per patch
    augmented: list = None

    def __post_init__(self):
        if self.augmented is None:
            self.augmented = [False] * len(self.patch_ids)

    def __len__(self):
        return len(self.patch_ids)

    def subset(self, indices) -> "PatchTable":
        return PatchTable(
            patch_ids=[self.patch_ids[i] for i in indices],
            scan_ids=[self.scan_ids[i] for i in indices],
            species=[self.species[i] for i in indices],
            preparations=[self.preparations[i] for i in indices],
            gates=[self.gates[i] for i in indices],
            dsets=[self.dsets[i] for i in indices],
            augmented=[self.augmented[i] for i in indices],
        )

    def for_scans(self, scan_ids) -> "PatchTable":
        wanted = set(scan_ids)
        return self.subset(
            [i for i, s in enumerate(self.scan_ids) if s in wanted]
        )

    def without_augmented(self) -> "PatchTable":
        return self.subset(
            [i for i, a in enumerate(self.augmented) if not a]
        )

    def labels(self) -> list:
        return [sp if g == "fg" else BG_LABEL
                for sp, g in zip(self.species, self.gates)]

    def descriptor_matrix(self) -> np.ndarray:
        return np.vstack([d.data for d in self.dsets])

    def species_by_scan(self) -> dict:
        return dict(zip(self.scan_ids, self.species))


def class_order(present_species) -> list:
    """Canonical column order: the nine strain codes, then BG."""
    present = set(present_species)
    return [s for s in SPECIES if s in present] + [BG_LABEL]


def split_by_preparation(records) -> FoldPlan:
    """Partition a manifest into the two preparation folds.

    Every species present anywhere in the manifest must appear in both
    folds, otherwise that species could never be both trained and tested.
    """
    fold_1 = tuple(sorted(r.scan_id for r in records if r.preparation_id == 1))
    fold_2 = tuple(sorted(r.scan_id for r in records if r.preparation_id == 2))
    all_species = {r.species for r in records}
    for name, fold in (("fold 1", fold_1), ("fold 2", fold_2)):
        ids = set(fold)
        got = {r.species for r in records if r.scan_id in ids}
        lacking = sorted(all_species - got)
        if lacking:
            raise MissingSpecies(f"{name} lacks species {lacking}")
    return FoldPlan(fold_1=fold_1, fold_2=fold_2)


def stratified_scan_folds(scan_ids, species_by_scan, n_folds: int,
                          seed: int = 0) -> list:
    """Split scans into species-stratified folds; patches never straddle."""
    by_species = {}
    for sid in sorted(scan_ids):
        by_species.setdefault(species_by_scan[sid], []).append(sid)
    rng = np.random.default_rng(seed)
    folds = [[] for _ in range(n_folds)]
    for sp in sorted(by_species):
        scans = by_species[sp]
        if len(scans) < n_folds:
            raise ValueError(
                f"species {sp} has {len(scans)} scans, need >= {n_folds}"
            )
        order = rng.permutation(len(scans))
        for pos, idx in enumerate(order):
            folds[pos % n_folds].append(scans[idx])
    return [sorted(f) for f in folds]


def check_disjoint(train_ids, test_ids, context: str) -> None:
    overlap = set(train_ids) & set(test_ids)
    if overlap:
        raise MycobowError(
            f"{context}: scans on both sides of the split: {sorted(overlap)}"
        )


def iter_grid(grid: ParamGrid, encoding: str, classifier: str) -> list:
    """Deterministic grid enumeration: k, then kernel (linear first),
    then C ascending, then gamma ascending."""
    ks = grid.bow_k if encoding == ENCODING_BOW else grid.fv_k
    points = []
    for k in sorted(ks):
        if classifier == "rf":
            points.append(GridPoint(k=k))
            continue
        for kernel in ("linear", "rbf"):
            if kernel not in grid.svm_kernel:
                continue
            for c in sorted(grid.svm_C):
                if kernel == "rbf":
                    for gamma in sorted(grid.svm_gamma):
                        points.append(GridPoint(k=k, kernel=kernel, C=c,
                                                gamma=gamma))
                else:
                    points.append(GridPoint(k=k, kernel=kernel, C=c))
    if not points:
        raise EmptyGrid("hyperparameter grid has no points")
    return points


def fit_vocabulary(matrix, encoding: str, k: int, seed: int = 0,
                   sample_limit: int = 100_000, max_iter: int = 100,
                   tol: float = 1e-6):
    """Fit the pooling vocabulary on a (subsampled) descriptor matrix."""
    sample = subsample_descriptors(matrix, limit=sample_limit, seed=seed)
    if encoding == ENCODING_BOW:
        return kmeans_fit(sample, k, seed=seed, max_iter=max_iter, tol=tol)
    return gmm_fit(sample, k, seed=seed, max_iter=max_iter, tol=tol)


def encode_table(table: PatchTable, model, encoding: str,
                 power_norm: bool = True, l2_norm: bool = True,
                 raw_counts: bool = False) -> np.ndarray:
    """Encode every patch of a table into one design-matrix row."""
    rows = []
    for dset in table.dsets:
        if encoding == ENCODING_BOW:
            vec = encode_bow(dset, model, raw_counts=raw_counts)
        else:
            vec = encode_fv(dset, model, power_norm=power_norm,
                            l2_norm=l2_norm)
        rows.append(vec.values)
    return np.asarray(rows, dtype=np.float64)


@dataclass
class GridSearchResult:
    best: GridPoint
    scores: list  # (GridPoint, mean inner accuracy)
    fold_scan_ids: list


def grid_search(train: PatchTable, grid: ParamGrid, *, encoding: str,
                classifier: str, train_classifier, inner_folds: int = 5,
                seed: int = 0, vocab_opts: dict = None,
                encode_opts: dict = None) -> GridSearchResult:
    """Exhaustive inner cross-validated search over the parameter grid.

    ``train_classifier(X, y, point)`` must return a fitted model exposing
    prediction through ``predict_fn(model, X)`` conventions of learn;
    vocabularies are refit per inner fold and per k on the inner-train
    side only.
    """
    vocab_opts = vocab_opts or {}
    encode_opts = encode_opts or {}
    points = iter_grid(grid, encoding, classifier)
    folds = stratified_scan_folds(
        sorted(set(train.scan_ids)), train.species_by_scan(),
        inner_folds, seed=seed,
    )

    totals = {point: 0.0 for point in points}
    ks = sorted({p.k for p in points})
    for f, val_ids in enumerate(folds):
        train_ids = sorted(
            set(train.scan_ids) - set(val_ids)
        )
        check_disjoint(train_ids, val_ids, f"inner fold {f + 1}")
        inner_train = train.for_scans(train_ids)
        inner_val = train.for_scans(val_ids).without_augmented()
        y_train = inner_train.labels()
        y_val = inner_val.labels()
        desc = inner_train.descriptor_matrix()

        for k in ks:
            model = fit_vocabulary(desc, encoding, k, seed=seed,
                                   **vocab_opts)
            x_train = encode_table(inner_train, model, encoding,
                                   **encode_opts)
            x_val = encode_table(inner_val, model, encoding, **encode_opts)
            for point in points:
                if point.k != k:
                    continue
                clf, predict_fn, _ = train_classifier(x_train, y_train, point)
                pred = predict_fn(clf, x_val)
                acc = float(np.mean(
                    [p == t for p, t in zip(pred, y_val)]
                ))
                totals[point] += acc

    scores = [(point, totals[point] / len(folds)) for point in points]
    best = points[0]
    best_score = scores[0][1]
    for point, score in scores[1:]:
        if score > best_score:
            best, best_score = point, score
    return GridSearchResult(best=best, scores=scores, fold_scan_ids=folds)


@dataclass
class FoldEval:
    """Patch-level evaluation of one outer fold."""

    class_labels: list
    confusion_counts: np.ndarray
    confusion: np.ndarray        # row-normalized
    per_class: dict              # label -> accuracy percent (nan if absent)
    total: float                 # percent


def evaluate_patches(predictions, truth, class_labels) -> FoldEval:
    """Confusion matrix, per-class accuracy, and total accuracy in percent."""
    if len(predictions) != len(truth):
        raise LengthMismatch(
            f"{len(predictions)} predictions vs {len(truth)} truths"
        )
    index = {label: i for i, label in enumerate(class_labels)}
    counts = np.zeros((len(class_labels), len(class_labels)), dtype=np.int64)
    for p, t in zip(predictions, truth):
        counts[index[t], index[p]] += 1
    row_sums = counts.sum(axis=1)
    normalized = np.zeros_like(counts, dtype=np.float64)
    nonempty = row_sums > 0
    normalized[nonempty] = counts[nonempty] / row_sums[nonempty, None]
    per_class = {}
    for i, label in enumerate(class_labels):
        per_class[label] = 100.0 * normalized[i, i] if nonempty[i] else float("nan")
    total = 100.0 * counts.trace() / max(counts.sum(), 1)
    return FoldEval(class_labels=list(class_labels),
                    confusion_counts=counts, confusion=normalized,
                    per_class=per_class, total=total)


def mean_and_spread(values) -> tuple:
    """Mean with half-range spread across outer folds."""
    arr = np.asarray(values, dtype=np.float64)
    if np.isnan(arr).any():
        return float("nan"), float("nan")
    return float(arr.mean()), float((arr.max() - arr.min()) / 2.0)


@dataclass
class ScanPrediction:
    scan_id: str
    votes: dict
    winner: str


def aggregate_scan(scan_id: str, patch_labels, decision_values=None,
                   class_labels=None) -> ScanPrediction:
    """Majority vote over one scan's foreground-patch predictions.

    BG votes are discarded unless every patch voted BG. Vote ties go to
    the species with the larger summed decision value, then to the lower
    canonical label index.
    """
    patch_labels = list(patch_labels)
    if not patch_labels:
        raise NoForegroundPatches(f"scan {scan_id} has no foreground patches")
    votes = {}
    for label in patch_labels:
        votes[label] = votes.get(label, 0) + 1

    candidates = {lab: n for lab, n in votes.items() if lab != BG_LABEL}
    if not candidates:
        return ScanPrediction(scan_id=scan_id, votes=votes, winner=BG_LABEL)

    top = max(candidates.values())
    tied = sorted(lab for lab, n in candidates.items() if n == top)
    if len(tied) > 1 and decision_values is not None and class_labels:
        col = {label: i for i, label in enumerate(class_labels)}
        sums = {
            lab: float(np.asarray(decision_values)[:, col[lab]].sum())
            for lab in tied if lab in col
        }
        best_sum = max(sums.values())
        tied = [lab for lab in tied if sums.get(lab) == best_sum]
    order = {label: i for i, label in enumerate(class_order(tied))}
    winner = min(tied, key=lambda lab: order.get(lab, len(order)))
    return ScanPrediction(scan_id=scan_id, votes=votes, winner=winner)


def mean_bow_report(encodings_by_species: dict) -> dict:
    """Per-species mean and variance of BoW histograms, per cluster."""
    stats = {}
    k = None
    for sp in sorted(encodings_by_species):
        vectors = encodings_by_species[sp]
        for vec in vectors:
            if isinstance(vec, EncodedVector):
                if vec.encoding != ENCODING_BOW:
                    raise MixedEncodingKinds(
                        f"species {sp} holds a {vec.encoding} vector"
                    )
                values = vec.values
            else:
                values = np.asarray(vec)
            if k is None:
                k = len(values)
            elif len(values) != k:
                raise MixedEncodingKinds(
                    f"histogram length {len(values)} != {k}"
                )
        matrix = np.asarray([
            v.values if isinstance(v, EncodedVector) else np.asarray(v)
            for v in vectors
        ])
        stats[sp] = (matrix.mean(axis=0), matrix.var(axis=0))
    return stats


def nearest_patches_report(codebook, dsets, n: int = 10) -> list:
    """For each centroid, the n patches whose mean descriptor is nearest.

    Returns one ascending-distance list of (patch_id, distance) per
    centroid; exact ties order by patch id.
    """
    if not dsets:
        raise ValueError("descriptor pool is empty")
    ids = [d.patch_id for d in dsets]
    means = np.asarray([d.data.mean(axis=0) for d in dsets], dtype=np.float64)
    out = []
    for centroid in codebook.centroids:
        dist = np.sqrt(((means - centroid[None, :]) ** 2).sum(axis=1))
        ranked = sorted(zip(ids, dist), key=lambda t: (t[1], t[0]))
        out.append([(pid, float(d)) for pid, d in ranked[:n]])
    return out


def certainty_ranking(patch_ids, predicted_labels, decision_values,
                      class_labels) -> dict:
    """Patches grouped by predicted species, ordered by that species'
    decision value, most certain first. Equal values keep input order."""
    decision_values = np.asarray(decision_values)
    col = {label: i for i, label in enumerate(class_labels)}
    groups = {}
    for row, (pid, label) in enumerate(zip(patch_ids, predicted_labels)):
        value = float(decision_values[row, col[label]])
        groups.setdefault(label, []).append((pid, value))
    for label in groups:
        groups[label].sort(key=lambda t: -t[1])
    return groups


@dataclass
class EvaluationReport:
    """Everything the patch- and scan-level tables are rendered from."""

    method: str
    class_labels: list
    fold_evals: list                  # FoldEval per outer fold
    per_class: dict                   # label -> (mean, spread)
    total: tuple                      # (mean, spread)
    scan_per_class: dict = None       # species -> (mean, spread)
    scan_total: tuple = None
    chosen: list = field(default_factory=list)   # GridPoint per fold
    wall_seconds: float = 0.0


def build_report(method: str, fold_evals, scan_accuracy_by_fold=None,
                 chosen=None, wall_seconds: float = 0.0) -> EvaluationReport:
    """Fuse outer-fold results into mean +- half-range summaries."""
    class_labels = fold_evals[0].class_labels
    per_class = {
        label: mean_and_spread([fe.per_class[label] for fe in fold_evals])
        for label in class_labels
    }
    total = mean_and_spread([fe.total for fe in fold_evals])

    scan_per_class = None
    scan_total = None
    if scan_accuracy_by_fold is not None:
        species = [s for s in class_labels if s != BG_LABEL]
        scan_per_class = {
            sp: mean_and_spread(
                [fold.get(sp, float("nan")) for fold in scan_accuracy_by_fold]
            )
            for sp in species
        }
        scan_total = mean_and_spread(
            [fold["__total__"] for fold in scan_accuracy_by_fold]
        )
    return EvaluationReport(
        method=method, class_labels=list(class_labels),
        fold_evals=list(fold_evals), per_class=per_class, total=total,
        scan_per_class=scan_per_class, scan_total=scan_total,
        chosen=list(chosen or []), wall_seconds=wall_seconds,
    )


def _cell(mean_spread) -> str:
    mean, spread = mean_spread
    if np.isnan(mean):
        return "n/a"
    return f"{mean:.1f} ± {spread:.1f}"


def render_patch_table(report: EvaluationReport) -> str:
    """Patch-level table: species columns, BG, Total, training time."""
    header = ["Method"] + report.class_labels + ["Total", "Training time (s)"]
    row = [report.method]
    row += [_cell(report.per_class[label]) for label in report.class_labels]
    row.append(_cell(report.total))
    row.append(str(int(round(report.wall_seconds))))
    return "\t".join(header) + "\n" + "\t".join(row) + "\n"


def render_scan_table(report: EvaluationReport) -> str:
    """Scan-level table: species columns and Total, no BG, no time."""
    species = [s for s in report.class_labels if s != BG_LABEL]
    header = ["Method"] + species + ["Total"]
    row = [report.method]
    row += [_cell(report.scan_per_class[sp]) for sp in species]
    row.append(_cell(report.scan_total))
    return "\t".join(header) + "\n" + "\t".join(row) + "\n"


def render_confusion(fold_eval: FoldEval) -> str:
    lines = ["\t".join(["truth\\pred"] + fold_eval.class_labels)]
    for i, label in enumerate(fold_eval.class_labels):
        cells = [f"{v:.6f}" for v in fold_eval.confusion[i]]
        lines.append("\t".join([label] + cells))
    return "\n".join(lines) + "\n"
