import dataclasses
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mycobow.config import RunConfig
from mycobow.synthetic import generate_corpus
from mycobow import pipeline


def small_run_config(manifest, output_dir, **overrides) -> RunConfig:
    """Desk-scale settings shared by the CLI and acceptance fixtures."""
    base = dict(
        manifest=str(manifest),
        output_dir=str(output_dir),
        patch_size=32,
        stride=32,
        blur_sigma=5.0,
        scale=0.5,
        descriptor_dim=16,
        toy_grid_rows=4,
        toy_grid_cols=4,
        encoding="fv",
        vocab_k=5,
        classifier="svm",
        grid_fv_k=[5],
        grid_svm_kernel=["linear", "rbf"],
        grid_svm_C=[1.0, 10.0],
        grid_svm_gamma=[0.0001],
        report_bow_k=4,
        report_neighbors=5,
        workers=1,
        seed=0,
    )
    base.update(overrides)
    return RunConfig(**base)


@pytest.fixture(scope="session")
def synth_run(tmp_path_factory):
    """One small corpus driven through preprocess/encode/evaluate/report."""
    root = tmp_path_factory.mktemp("synth")
    manifest = generate_corpus(root / "data", n_scans_per_prep=5, seed=0)
    cfg = small_run_config(manifest, root / "out",
                           grid_svm_C=[10.0],
                           grid_svm_kernel=["linear"])
    pipeline.cmd_preprocess(cfg)
    pipeline.cmd_encode(cfg)
    report = pipeline.cmd_evaluate(cfg)
    pipeline.cmd_report(cfg)
    return {
        "root": root,
        "manifest": manifest,
        "cfg": cfg,
        "out": Path(cfg.output_dir),
        "report": report,
    }


def clone_config(cfg: RunConfig, **overrides) -> RunConfig:
    data = dataclasses.asdict(cfg)
    data.update(overrides)
    return RunConfig(**data)
