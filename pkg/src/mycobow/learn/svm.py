"""One-vs-rest soft-margin SVM trained with sequential minimal optimization.

The working-set solver picks the maximal violating pair each step and
stops once the KKT violation gap falls below the tolerance, so each
binary machine satisfies the usual box-constraint optimality conditions
to within ``tol``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..binio import Reader, Writer
from ..errors import (DimensionMismatch, FormatError, NonFiniteFeature,
                      SingleClassError)

SVM_MAGIC = b"PVMD"
SVM_VERSION = 1

GRAM_CACHE_LIMIT = 20_000  # rows; larger problems recompute kernel rows


@dataclass(frozen=True)
class SvmConfig:
    kernel: str = "rbf"  # "linear" | "rbf"
    C: float = 1.0
    gamma: float = 0.001  # RBF only
    tol: float = 1e-3
    max_passes: int = 0  # 0 means automatic cap
    seed: int = 0
    standardize: bool = True

    def __post_init__(self):
        if self.kernel not in ("linear", "rbf"):
            raise ValueError(f"unknown kernel {self.kernel!r}")
        if self.C <= 0:
            raise ValueError("C must be positive")
        if self.kernel == "rbf" and self.gamma <= 0:
            raise ValueError("gamma must be positive")


@dataclass
class BinaryMachine:
    """One class-vs-rest machine: its support set and bias."""

    alphas: np.ndarray   # positive Lagrange multipliers, one per SV
    sv_y: np.ndarray     # +-1 labels of the SVs
    sv_x: np.ndarray     # SV rows in standardized feature space
    bias: float
    dual_objective: float
    iterations: int


@dataclass
class SvmModel:
    classes: list
    machines: list
    config: SvmConfig
    scale_mean: np.ndarray
    scale_std: np.ndarray
    n_features: int

    def summary(self) -> str:
        lines = [f"kernel\t{self.config.kernel}", f"C\t{self.config.C:g}"]
        if self.config.kernel == "rbf":
            lines.append(f"gamma\t{self.config.gamma:g}")
        for cls, machine in zip(self.classes, self.machines):
            lines.append(f"class_{cls}\tsupport_vectors={len(machine.alphas)}")
        return "\n".join(lines) + "\n"


def _kernel_matrix(a, b, cfg: SvmConfig):
    # einsum keeps the reduction order fixed (no BLAS dispatch)
    if cfg.kernel == "linear":
        return np.einsum("nd,md->nm", a, b)
    aa = np.einsum("nd,nd->n", a, a)
    bb = np.einsum("md,md->m", b, b)
    sq = aa[:, None] + bb[None, :] - 2.0 * np.einsum("nd,md->nm", a, b)
    np.maximum(sq, 0.0, out=sq)
    return np.exp(-cfg.gamma * sq)


class _KernelColumns:
    """Kernel column access; caches the full Gram only for small problems."""

    def __init__(self, Xs, cfg: SvmConfig):
        self.Xs = Xs
        self.cfg = cfg
        n = Xs.shape[0]
        self.full = _kernel_matrix(Xs, Xs, cfg) if n <= GRAM_CACHE_LIMIT else None
        if self.full is not None:
            self.diag = self.full.diagonal().copy()
        elif cfg.kernel == "rbf":
            self.diag = np.ones(n)
        else:
            self.diag = np.einsum("nd,nd->n", Xs, Xs)

    def col(self, i: int) -> np.ndarray:
        if self.full is not None:
            return self.full[:, i]
        return _kernel_matrix(self.Xs, self.Xs[i:i + 1], self.cfg)[:, 0]


def _smo_solve(kernel: _KernelColumns, y, C, tol, max_iter):
    """Maximal-violating-pair SMO on one binary problem.

    Returns (alphas, bias, dual objective, iterations used). The dual
    objective reported is max form: 1'a - 0.5 a'Qa.
    """
    n = len(y)
    alphas = np.zeros(n)
    grad = -np.ones(n)  # gradient of the dual objective 0.5 a'Qa - 1'a

    def finish(m, mm, iters):
        bias = 0.5 * (m + mm)
        # grad = Qa - 1, so a'Qa = a'(grad + 1)
        obj = alphas.sum() - 0.5 * float(alphas @ (grad + 1.0))
        return alphas, float(bias), obj, iters

    for it in range(max_iter):
        # F_i = y_i - f_nb(x_i); optimal bias lies between max/min over sets
        fvals = -y * grad
        up = ((y > 0) & (alphas < C)) | ((y < 0) & (alphas > 0))
        low = ((y < 0) & (alphas < C)) | ((y > 0) & (alphas > 0))
        f_up = np.where(up, fvals, -np.inf)
        f_low = np.where(low, fvals, np.inf)
        i = int(np.argmax(f_up))
        j = int(np.argmin(f_low))
        m, mm = f_up[i], f_low[j]
        if m - mm <= tol:
            return finish(m, mm, it)

        col_i = kernel.col(i)
        col_j = kernel.col(j)
        s = y[i] * y[j]
        eta = max(kernel.diag[i] + kernel.diag[j] - 2.0 * col_i[j], 1e-12)
        e_i = y[i] * grad[i]  # f_nb(x_i) - y_i
        e_j = y[j] * grad[j]

        if s > 0:
            lo = max(0.0, alphas[i] + alphas[j] - C)
            hi = min(C, alphas[i] + alphas[j])
        else:
            lo = max(0.0, alphas[j] - alphas[i])
            hi = min(C, C + alphas[j] - alphas[i])

        aj_new = float(np.clip(alphas[j] + y[j] * (e_i - e_j) / eta, lo, hi))
        ai_new = alphas[i] + s * (alphas[j] - aj_new)
        # snap to the box so clipped updates leave no 1e-17 residue that
        # would keep a bound variable inside the working sets
        snap = 1e-12 * max(C, 1.0)
        if aj_new < snap:
            aj_new = 0.0
        elif aj_new > C - snap:
            aj_new = C
        if ai_new < snap:
            ai_new = 0.0
        elif ai_new > C - snap:
            ai_new = C
        d_i = ai_new - alphas[i]
        d_j = aj_new - alphas[j]
        if abs(d_i) < 1e-15 and abs(d_j) < 1e-15:
            return finish(m, mm, it)

        alphas[i] = ai_new
        alphas[j] = aj_new
        grad += (y * y[i] * col_i) * d_i + (y * y[j] * col_j) * d_j

    fvals = -y * grad
    up = ((y > 0) & (alphas < C)) | ((y < 0) & (alphas > 0))
    low = ((y < 0) & (alphas < C)) | ((y > 0) & (alphas > 0))
    m = np.where(up, fvals, -np.inf).max()
    mm = np.where(low, fvals, np.inf).min()
    return finish(m, mm, max_iter)


def svm_train(X, y, cfg: SvmConfig = SvmConfig()) -> SvmModel:
    """Train one binary machine per class label (one-vs-rest)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("X must be an MxL matrix with M >= 2")
    if not np.all(np.isfinite(X)):
        raise NonFiniteFeature("training matrix contains NaN or inf")
    labels = list(y)
    if len(labels) != X.shape[0]:
        raise ValueError("X and y length mismatch")
    classes = sorted(set(labels))
    if len(classes) < 2:
        raise SingleClassError(f"need two classes, got {classes}")

    if cfg.standardize:
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        std = np.where(std > 0, std, 1.0)
    else:
        mean = np.zeros(X.shape[1])
        std = np.ones(X.shape[1])
    Xs = (X - mean) / std

    n = X.shape[0]
    max_iter = cfg.max_passes if cfg.max_passes > 0 else max(20_000, 200 * n)
    kernel = _KernelColumns(Xs, cfg)

    label_arr = np.asarray(labels, dtype=object)
    machines = []
    for cls in classes:
        yb = np.where(label_arr == cls, 1.0, -1.0)
        alphas, bias, objective, iters = _smo_solve(
            kernel, yb, cfg.C, cfg.tol, max_iter
        )
        sv = alphas > 0.0
        machines.append(BinaryMachine(
            alphas=alphas[sv].copy(),
            sv_y=yb[sv].copy(),
            sv_x=Xs[sv].copy(),
            bias=bias,
            dual_objective=objective,
            iterations=iters,
        ))
    return SvmModel(classes=classes, machines=machines, config=cfg,
                    scale_mean=mean, scale_std=std, n_features=X.shape[1])


def svm_decision_values(model: SvmModel, X) -> np.ndarray:
    """Raw per-class decision values f_c(x), one column per class."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != model.n_features:
        raise DimensionMismatch(
            f"features {X.shape[1]} vs model {model.n_features}"
        )
    Xs = (X - model.scale_mean) / model.scale_std
    out = np.empty((X.shape[0], len(model.classes)))
    for c, machine in enumerate(model.machines):
        if machine.sv_x.shape[0] == 0:
            out[:, c] = machine.bias
            continue
        K = _kernel_matrix(Xs, machine.sv_x, model.config)
        out[:, c] = K @ (machine.alphas * machine.sv_y) + machine.bias
    return out


def svm_predict(model: SvmModel, X) -> list:
    """Argmax over one-vs-rest decision values; ties to the lowest class index."""
    values = svm_decision_values(model, X)
    return [model.classes[i] for i in values.argmax(axis=1)]


def _write_labels(w: Writer, classes):
    kinds = {str: 0, int: 1, float: 2}
    kind = kinds.get(type(classes[0]), 0)
    w.u8(kind)
    w.u32(len(classes))
    for cls in classes:
        w.text(str(cls))


def _read_labels(r: Reader):
    kind = r.u8()
    count = r.u32()
    cast = (str, int, float)[kind]
    return [cast(r.text()) for _ in range(count)]


def save_svm(model: SvmModel, path) -> None:
    w = Writer()
    w.raw(SVM_MAGIC)
    w.u32(SVM_VERSION)
    w.text("svm")
    cfg = model.config
    w.text(cfg.kernel)
    w.f64(cfg.C)
    w.f64(cfg.gamma)
    w.f64(cfg.tol)
    w.u32(max(cfg.max_passes, 0))
    w.u32(cfg.seed)
    w.u8(1 if cfg.standardize else 0)
    w.u32(model.n_features)
    w.f64_array(model.scale_mean)
    w.f64_array(model.scale_std)
    _write_labels(w, model.classes)
    for machine in model.machines:
        w.u32(len(machine.alphas))
        w.f64_array(machine.alphas)
        w.f64_array(machine.sv_y)
        w.f64_array(machine.sv_x)
        w.f64(machine.bias)
        w.f64(machine.dual_objective)
        w.u32(machine.iterations)
    w.save(path)


def load_svm(path) -> SvmModel:
    with open(path, "rb") as fh:
        r = Reader(fh.read(), name=str(path))
    if r.take(4) != SVM_MAGIC or r.u32() != SVM_VERSION:
        raise FormatError(f"{path}: bad magic or version")
    if r.text() != "svm":
        raise FormatError(f"{path}: not an SVM model file")
    cfg = SvmConfig(
        kernel=r.text(), C=r.f64(), gamma=r.f64(), tol=r.f64(),
        max_passes=r.u32(), seed=r.u32(), standardize=bool(r.u8()),
    )
    n_features = r.u32()
    mean = r.f64_array(n_features)
    std = r.f64_array(n_features)
    classes = _read_labels(r)
    machines = []
    for _ in classes:
        n_sv = r.u32()
        machines.append(BinaryMachine(
            alphas=r.f64_array(n_sv),
            sv_y=r.f64_array(n_sv),
            sv_x=r.f64_array(n_sv, n_features),
            bias=r.f64(),
            dual_objective=r.f64(),
            iterations=r.u32(),
        ))
    r.done()
    return SvmModel(classes=classes, machines=machines, config=cfg,
                    scale_mean=mean, scale_std=std, n_features=n_features)
