"""Run configuration: one structured file drives every pipeline command.

Every field carries an explicit value once resolved; each command writes
the fully resolved config beside its outputs so reruns are reproducible
byte for byte.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .evaluate import ParamGrid

ENV_OUTPUT_DIR = "MYCOBOW_OUT"
ENV_WORKERS = "MYCOBOW_WORKERS"


@dataclass
class RunConfig:
    # inputs and outputs
    manifest: str = ""
    output_dir: str = "out"

    # descriptor source
    descriptor_source: str = "toy"  # "toy" | "file"
    descriptor_dir: str = ""        # PVDF files for the "file" source
    descriptor_dim: int = 16
    toy_grid_rows: int = 4
    toy_grid_cols: int = 4
    l2_normalize_descriptors: bool = False

    # preprocessing
    low_percentile: float = 1.0
    high_percentile: float = 99.0
    blur_sigma: float = 5.0
    threshold: float = 0.5
    scale: float = 0.5
    patch_size: int = 500
    stride: int = 250
    fg_min_ratio: float = 2.0
    bg_max_ratio: float = 0.01
    augment_training: bool = False  # training patches only

    # encoding
    encoding: str = "fv"  # "bow" | "fv"
    vocab_k: int = 10
    power_norm: bool = True
    l2_norm: bool = True
    bow_raw_counts: bool = False
    vocab_sample_limit: int = 100000
    vocab_max_iter: int = 100
    vocab_tol: float = 1e-6

    # classifier
    classifier: str = "svm"  # "svm" | "rf"
    svm_tol: float = 1e-3
    svm_max_passes: int = 0
    rf_trees: int = 100
    rf_max_depth: int = -1  # -1 means unlimited
    rf_max_features: str = "sqrt"

    # hyperparameter grid (paper defaults unless overridden)
    grid_bow_k: list = field(default_factory=lambda: [5, 10, 20, 50, 100, 200, 500])
    grid_fv_k: list = field(default_factory=lambda: [5, 10, 20, 50])
    grid_svm_kernel: list = field(default_factory=lambda: ["linear", "rbf"])
    grid_svm_C: list = field(default_factory=lambda: [1.0, 10.0, 100.0, 1000.0])
    grid_svm_gamma: list = field(default_factory=lambda: [0.001, 0.0001])
    inner_folds: int = 5

    # reporting analyses
    report_bow_k: int = 10
    report_neighbors: int = 10

    seed: int = 0
    workers: int = 0  # 0 means use all available cores

    def grid(self) -> ParamGrid:
        return ParamGrid(
            bow_k=tuple(self.grid_bow_k),
            fv_k=tuple(self.grid_fv_k),
            svm_kernel=tuple(self.grid_svm_kernel),
            svm_C=tuple(self.grid_svm_C),
            svm_gamma=tuple(self.grid_svm_gamma),
        )

    def effective_workers(self) -> int:
        if self.workers > 0:
            return self.workers
        return os.cpu_count() or 1

    def method_name(self) -> str:
        enc = "BoW" if self.encoding == "bow" else "FV"
        clf = "SVM" if self.classifier == "svm" else "RF"
        return f"{enc} {clf}"


def _known_fields():
    return {f.name for f in dataclasses.fields(RunConfig)}


def load_config(path) -> RunConfig:
    with open(path) as fh:
        raw = json.load(fh)
    unknown = set(raw) - _known_fields()
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(**raw)


def apply_env_overrides(cfg: RunConfig) -> RunConfig:
    out = os.environ.get(ENV_OUTPUT_DIR)
    if out:
        cfg.output_dir = out
    workers = os.environ.get(ENV_WORKERS)
    if workers:
        cfg.workers = int(workers)
    return cfg


def save_config(cfg: RunConfig, path) -> None:
    """Persist the fully resolved config (every field, no silent defaults)."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(dataclasses.asdict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
