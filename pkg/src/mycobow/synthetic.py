"""Procedural desk-scale corpus: dark textured blobs on bright backgrounds.

Per-image contrast stretching erases absolute brightness differences, so
the synthetic species differ by texture shape instead: smooth, fine
speckle, one-directional stripes, and two-directional blotches. The blob
sits centrally with clean background margins, so every scan yields both
foreground and background patches under the default gates. Preparations
differ by background level and grain. Scans are written as 16-bit PNGs
next to a standard manifest.
"""

from __future__ import annotations

import sys
from pathlib import Path

import cv2
import numpy as np

from .dataset import ScanRecord, write_manifest

SYNTH_SPECIES = ("CA", "CG", "CL", "CN")

# texture recipe per species: base level and noise sigma in 16-bit counts,
# plus a patterned component that survives per-image normalization
_RECIPES = {
    "CA": {"base": 9000.0, "noise": 500.0, "pattern": None},
    "CG": {"base": 14000.0, "noise": 6500.0, "pattern": None},
    "CL": {"base": 15000.0, "noise": 500.0, "pattern": "stripes",
           "amp": 9000.0, "period": 8},
    "CN": {"base": 15000.0, "noise": 500.0, "pattern": "blotch",
           "amp": 9000.0, "period": 32},
}

_BG_LEVEL = {1: 60000.0, 2: 56000.0}
_BG_NOISE = {1: 700.0, 2: 1000.0}

BLOB_RADIUS_FACTOR = 0.25
BLOB_CENTER_WOBBLE = 0.025
BLOB_EDGE_WOBBLE = 0.06


def _blob_mask(size: int, rng) -> np.ndarray:
    """Irregular centered blob, kept clear of the image borders."""
    yy, xx = np.mgrid[0:size, 0:size]
    margin = size * BLOB_CENTER_WOBBLE
    cy = size / 2 + rng.uniform(-margin, margin)
    cx = size / 2 + rng.uniform(-margin, margin)
    angle = np.arctan2(yy - cy, xx - cx)
    wobble = sum(
        rng.uniform(0.0, BLOB_EDGE_WOBBLE / 3)
        * np.cos(h * angle + rng.uniform(0, 2 * np.pi))
        for h in range(2, 5)
    )
    radius = size * BLOB_RADIUS_FACTOR * (1.0 + wobble)
    dist = np.hypot(yy - cy, xx - cx)
    return dist <= radius


def _texture(recipe, size, rng):
    texture = np.full((size, size), recipe["base"])
    texture += rng.normal(0.0, recipe["noise"], size=(size, size))
    if recipe["pattern"] == "stripes":
        rows = np.arange(size)[:, None]
        phase = rng.uniform(0, 2 * np.pi)
        texture += recipe["amp"] * np.sin(
            2 * np.pi * rows / recipe["period"] + phase
        )
    elif recipe["pattern"] == "blotch":
        rows = np.arange(size)[:, None]
        cols = np.arange(size)[None, :]
        pr = rng.uniform(0, 2 * np.pi)
        pc = rng.uniform(0, 2 * np.pi)
        texture += recipe["amp"] \
            * np.sin(2 * np.pi * rows / recipe["period"] + pr) \
            * np.sin(2 * np.pi * cols / recipe["period"] + pc)
    return texture


def synth_scan_pixels(species: str, preparation_id: int, scan_index: int,
                      size: int = 384, seed: int = 0) -> np.ndarray:
    """Render one deterministic 16-bit scan."""
    sp_idx = SYNTH_SPECIES.index(species)
    rng = np.random.default_rng(
        np.random.SeedSequence([seed, sp_idx, preparation_id, scan_index])
    )
    img = np.full((size, size), _BG_LEVEL[preparation_id], dtype=np.float64)
    img += rng.normal(0.0, _BG_NOISE[preparation_id], size=img.shape)

    blob = _blob_mask(size, rng)
    texture = _texture(_RECIPES[species], size, rng)
    img[blob] = texture[blob]
    return np.clip(img, 0, 65535).astype(np.uint16)


def generate_corpus(out_dir, n_scans_per_prep: int = 10, size: int = 384,
                    seed: int = 0, species=SYNTH_SPECIES) -> Path:
    """Write scans plus manifest.tsv; returns the manifest path."""
    out_dir = Path(out_dir)
    scans_dir = out_dir / "scans"
    scans_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for sp in species:
        for prep in (1, 2):
            for idx in range(n_scans_per_prep):
                scan_id = f"{sp}_p{prep}_{idx:02d}"
                pixels = synth_scan_pixels(sp, prep, idx, size=size, seed=seed)
                rel = f"scans/{scan_id}.png"
                cv2.imwrite(str(out_dir / rel), pixels)
                records.append(ScanRecord(
                    scan_id=scan_id, path=rel, species=sp,
                    preparation_id=prep,
                ))
    manifest = out_dir / "manifest.tsv"
    write_manifest(manifest, records)
    return manifest


def main(argv=None) -> int:
    args = list(sys.argv[1:] if argv is None else argv)
    if not args or args[0] in ("-h", "--help"):
        print("usage: python -m mycobow.synthetic OUT_DIR "
              "[N_SCANS_PER_PREP] [SIZE] [SEED]")
        return 0 if args else 1
    out = args[0]
    n = int(args[1]) if len(args) > 1 else 10
    size = int(args[2]) if len(args) > 2 else 384
    seed = int(args[3]) if len(args) > 3 else 0
    manifest = generate_corpus(out, n_scans_per_prep=n, size=size, seed=seed)
    print(f"wrote {manifest}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
