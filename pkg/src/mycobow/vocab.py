"""Pooling vocabularies: k-Means codebooks and diagonal-covariance
Gaussian mixtures fitted with EM.

Distance and density kernels are computed with chunked elementwise numpy
(no BLAS matmul) so results are bit-identical regardless of thread count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .binio import Reader, Writer
from .errors import DimensionMismatch, FormatError, TooFewPoints

MODEL_MAGIC = b"PVMD"
MODEL_VERSION = 1

DEFAULT_VOCAB_SAMPLE = 100_000
VAR_FLOOR_SCALE = 1e-6
VAR_FLOOR_ABS = 1e-10

_CHUNK_TARGET = 4_000_000  # elements per (block x k x D) distance slab


@dataclass
class Codebook:
    """k-Means centroids plus the final inertia."""

    centroids: np.ndarray  # kxD float64
    k: int
    inertia: float
    inertia_history: tuple = field(default_factory=tuple)

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


@dataclass
class GmmModel:
    """Diagonal-covariance Gaussian mixture."""

    weights: np.ndarray    # k
    means: np.ndarray      # kxD
    variances: np.ndarray  # kxD, floored at var_floor
    k: int
    var_floor: np.ndarray = None
    log_likelihood_history: tuple = field(default_factory=tuple)

    @property
    def dim(self) -> int:
        return self.means.shape[1]


def _squared_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Chunked ||x - c||^2 for every point/center pair."""
    n, d = points.shape
    k = centers.shape[0]
    out = np.empty((n, k), dtype=np.float64)
    block = max(1, _CHUNK_TARGET // max(1, k * d))
    for start in range(0, n, block):
        stop = min(start + block, n)
        diff = points[start:stop, None, :] - centers[None, :, :]
        out[start:stop] = np.einsum("bkd,bkd->bk", diff, diff)
    return out


def _kmeans_pp_init(points, k, rng):
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]), dtype=np.float64)
    centers[0] = points[rng.integers(n)]
    d2 = _squared_distances(points, centers[:1]).ravel()
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers[j] = points[idx]
        d2 = np.minimum(d2, _squared_distances(points, centers[j:j + 1]).ravel())
    return centers


def kmeans_fit(points, k: int, seed: int = 0, max_iter: int = 100,
               tol: float = 1e-6) -> Codebook:
    """Lloyd's algorithm from a seeded k-means++ start.

    Empty clusters are reseeded to the point farthest from its assigned
    centroid. The recorded inertia sequence is non-increasing.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise DimensionMismatch("points must be an NxD matrix")
    n = points.shape[0]
    if n < k:
        raise TooFewPoints(f"{n} points cannot support k={k}")
    if not np.all(np.isfinite(points)):
        raise ValueError("points must be finite")

    rng = np.random.default_rng(seed)
    centers = _kmeans_pp_init(points, k, rng)

    d2 = _squared_distances(points, centers)
    assign = d2.argmin(axis=1)
    mind2 = d2[np.arange(n), assign]
    history = [float(mind2.sum())]

    for _ in range(max_iter):
        new_centers = centers.copy()
        counts = np.bincount(assign, minlength=k)
        for j in range(k):
            if counts[j] > 0:
                new_centers[j] = points[assign == j].mean(axis=0)

        empties = np.flatnonzero(counts == 0)
        if empties.size:
            # farthest points from their own centroid take over empty slots
            order = np.argsort(-mind2, kind="stable")
            for j, idx in zip(empties, order[:empties.size]):
                new_centers[j] = points[idx]

        shift = np.sqrt(((new_centers - centers) ** 2).sum(axis=1)).max()
        centers = new_centers

        d2 = _squared_distances(points, centers)
        assign = d2.argmin(axis=1)
        mind2 = d2[np.arange(n), assign]
        history.append(float(mind2.sum()))

        if shift < tol:
            break

    return Codebook(centroids=centers, k=k, inertia=history[-1],
                    inertia_history=tuple(history))


def kmeans_assign(points, codebook: Codebook) -> np.ndarray:
    """Nearest-centroid index per point; ties go to the lowest index."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != codebook.dim:
        raise DimensionMismatch(
            f"points of dim {points.shape[-1]} vs codebook dim {codebook.dim}"
        )
    return _squared_distances(points, codebook.centroids).argmin(axis=1)


def _var_floor(points):
    global_var = points.var(axis=0)
    return np.maximum(VAR_FLOOR_SCALE * global_var, VAR_FLOOR_ABS)


def _log_gaussians(points, means, variances):
    """log N(x; mu_j, diag sigma_j^2) for every point/component pair."""
    n, d = points.shape
    k = means.shape[0]
    log_norm = -0.5 * (d * np.log(2.0 * np.pi) + np.log(variances).sum(axis=1))
    out = np.empty((n, k), dtype=np.float64)
    block = max(1, _CHUNK_TARGET // max(1, k * d))
    inv_var = 1.0 / variances
    for start in range(0, n, block):
        stop = min(start + block, n)
        diff = points[start:stop, None, :] - means[None, :, :]
        out[start:stop] = np.einsum("bkd,bkd,kd->bk", diff, diff, inv_var)
    return log_norm[None, :] - 0.5 * out


def _logsumexp_rows(a):
    m = a.max(axis=1, keepdims=True)
    return m[:, 0] + np.log(np.exp(a - m).sum(axis=1))


def gmm_fit(points, k: int, seed: int = 0, max_iter: int = 100,
            tol: float = 1e-6, var_floor: np.ndarray = None) -> GmmModel:
    """EM for a diagonal GMM, initialized from a k-Means codebook.

    The mean per-point log-likelihood is tracked per iteration and is
    non-decreasing (within 1e-9); iteration stops once its gain drops
    below ``tol``.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n < k:
        raise TooFewPoints(f"{n} points cannot support k={k}")

    floor = _var_floor(points) if var_floor is None else np.asarray(var_floor)

    book = kmeans_fit(points, k, seed=seed)
    assign = kmeans_assign(points, book)
    counts = np.bincount(assign, minlength=k).astype(np.float64)
    weights = np.maximum(counts, 1e-12)
    weights /= weights.sum()
    means = book.centroids.copy()
    variances = np.empty_like(means)
    global_var = points.var(axis=0)
    for j in range(k):
        members = points[assign == j]
        variances[j] = members.var(axis=0) if len(members) > 1 else global_var
    variances = np.maximum(variances, floor)

    history = []
    prev_mean_ll = -np.inf
    for _ in range(max_iter):
        # E step
        log_joint = _log_gaussians(points, means, variances) \
            + np.log(np.maximum(weights, 1e-300))[None, :]
        log_norm = _logsumexp_rows(log_joint)
        resp = np.exp(log_joint - log_norm[:, None])
        mean_ll = float(log_norm.mean())
        history.append(mean_ll)

        if mean_ll - prev_mean_ll < tol and len(history) > 1:
            break
        prev_mean_ll = mean_ll

        # M step
        nk = resp.sum(axis=0)
        safe_nk = np.maximum(nk, 1e-300)
        weights = nk / n
        new_means = (resp.T @ points) / safe_nk[:, None]
        sq = (resp.T @ (points ** 2)) / safe_nk[:, None]
        variances = np.maximum(sq - new_means ** 2, floor)
        means = new_means

    return GmmModel(weights=weights, means=means, variances=variances, k=k,
                    var_floor=floor,
                    log_likelihood_history=tuple(history))


def gmm_posteriors(points, gmm: GmmModel) -> np.ndarray:
    """Responsibilities gamma(n, j); rows sum to 1."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != gmm.dim:
        raise DimensionMismatch(
            f"points of dim {points.shape[-1]} vs GMM dim {gmm.dim}"
        )
    log_joint = _log_gaussians(points, gmm.means, gmm.variances) \
        + np.log(np.maximum(gmm.weights, 1e-300))[None, :]
    log_norm = _logsumexp_rows(log_joint)
    return np.exp(log_joint - log_norm[:, None])


def mean_log_likelihood(points, gmm: GmmModel) -> float:
    """Average per-point log density under the mixture."""
    points = np.asarray(points, dtype=np.float64)
    log_joint = _log_gaussians(points, gmm.means, gmm.variances) \
        + np.log(np.maximum(gmm.weights, 1e-300))[None, :]
    return float(_logsumexp_rows(log_joint).mean())


def subsample_descriptors(matrix, limit: int = DEFAULT_VOCAB_SAMPLE,
                          seed: int = 0) -> np.ndarray:
    """Uniform seeded sample of at most ``limit`` rows, original order kept."""
    matrix = np.asarray(matrix)
    if matrix.shape[0] <= limit:
        return matrix
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(matrix.shape[0], size=limit, replace=False))
    return matrix[idx]


def save_model(model, path) -> None:
    """Versioned binary serialization for Codebook and GmmModel."""
    w = Writer()
    w.raw(MODEL_MAGIC)
    w.u32(MODEL_VERSION)
    if isinstance(model, Codebook):
        w.text("codebook")
        w.u32(model.k)
        w.u32(model.dim)
        w.f64(model.inertia)
        w.f64_array(model.centroids)
    elif isinstance(model, GmmModel):
        w.text("gmm")
        w.u32(model.k)
        w.u32(model.dim)
        w.f64_array(model.weights)
        w.f64_array(model.means)
        w.f64_array(model.variances)
        w.f64_array(model.var_floor)
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    w.save(path)


def load_model(path):
    with open(path, "rb") as fh:
        r = Reader(fh.read(), name=str(path))
    if r.take(4) != MODEL_MAGIC:
        raise FormatError(f"{path}: bad magic")
    if r.u32() != MODEL_VERSION:
        raise FormatError(f"{path}: unsupported version")
    kind = r.text()
    if kind == "codebook":
        k, dim = r.u32(), r.u32()
        inertia = r.f64()
        centroids = r.f64_array(k, dim)
        r.done()
        return Codebook(centroids=centroids, k=k, inertia=inertia)
    if kind == "gmm":
        k, dim = r.u32(), r.u32()
        weights = r.f64_array(k)
        means = r.f64_array(k, dim)
        variances = r.f64_array(k, dim)
        floor = r.f64_array(dim)
        r.done()
        return GmmModel(weights=weights, means=means, variances=variances,
                        k=k, var_floor=floor)
    raise FormatError(f"{path}: unknown model kind {kind!r}")


def write_model_summary(model, path) -> None:
    """Human-readable companion file for a fitted vocabulary."""
    lines = []
    if isinstance(model, Codebook):
        lines.append("kind\tcodebook")
        lines.append(f"k\t{model.k}")
        lines.append(f"dim\t{model.dim}")
        lines.append(f"inertia\t{model.inertia:.6g}")
        norms = np.sqrt((model.centroids ** 2).sum(axis=1))
        for j, norm in enumerate(norms):
            lines.append(f"centroid_norm_{j}\t{norm:.6g}")
    else:
        lines.append("kind\tgmm")
        lines.append(f"k\t{model.k}")
        lines.append(f"dim\t{model.dim}")
        norms = np.sqrt((model.means ** 2).sum(axis=1))
        for j in range(model.k):
            lines.append(
                f"component_{j}\tweight={model.weights[j]:.6g}"
                f"\tmean_norm={norms[j]:.6g}"
            )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
