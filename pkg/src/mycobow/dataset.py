"""Dataset manifest parsing and raw scan loading.

A manifest is a delimited text file (tab or comma) with the columns
``scan_id``, ``path``, ``species``, ``preparation_id``. Raw scans are
16-bit grayscale or RGB image files readable by OpenCV.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .errors import ManifestEmpty, MycobowError

SPECIES = ("CA", "CG", "CL", "CN", "CP", "CT", "MF", "SB", "SC")
BG_LABEL = "BG"

MANIFEST_COLUMNS = ("scan_id", "path", "species", "preparation_id")


@dataclass(frozen=True)
class ScanRecord:
    """One manifest row: where a scan lives and what it is."""

    scan_id: str
    path: str
    species: str
    preparation_id: int


@dataclass
class Scan:
    """A raw 16-bit scan with its label and preparation id."""

    pixels: np.ndarray  # HxW or HxWx3, integer intensities in [0, 65535]
    species: str
    preparation_id: int
    scan_id: str

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def read_manifest(path) -> list[ScanRecord]:
    """Parse a manifest file into scan records.

    Rows keep file order. Raises ManifestEmpty when no data rows exist and
    MycobowError on malformed rows.
    """
    path = Path(path)
    records = []
    with open(path, newline="") as fh:
        sample = fh.read(4096)
        fh.seek(0)
        delimiter = "\t" if "\t" in sample.split("\n", 1)[0] else ","
        reader = csv.DictReader(fh, delimiter=delimiter)
        if reader.fieldnames is None:
            raise ManifestEmpty(f"manifest {path} is empty")
        missing = [c for c in MANIFEST_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise MycobowError(f"manifest {path} lacks columns: {missing}")
        for row in reader:
            species = row["species"].strip()
            if species not in SPECIES:
                raise MycobowError(
                    f"unknown species {species!r} for scan {row['scan_id']!r}"
                )
            prep = int(row["preparation_id"])
            if prep not in (1, 2):
                raise MycobowError(
                    f"preparation_id must be 1 or 2, got {prep} "
                    f"for scan {row['scan_id']!r}"
                )
            records.append(
                ScanRecord(
                    scan_id=row["scan_id"].strip(),
                    path=row["path"].strip(),
                    species=species,
                    preparation_id=prep,
                )
            )
    if not records:
        raise ManifestEmpty(f"manifest {path} has no scans")
    seen = set()
    for rec in records:
        if rec.scan_id in seen:
            raise MycobowError(f"duplicate scan_id {rec.scan_id!r} in manifest")
        seen.add(rec.scan_id)
    return records


def write_manifest(path, records) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for rec in records:
            writer.writerow(
                [rec.scan_id, rec.path, rec.species, rec.preparation_id]
            )


def load_scan(record: ScanRecord, root=None) -> Scan:
    """Read the image file behind a manifest record.

    Relative paths resolve against ``root`` (defaults to the CWD).
    """
    path = Path(record.path)
    if root is not None and not path.is_absolute():
        path = Path(root) / path
    pixels = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if pixels is None:
        raise MycobowError(f"cannot read scan image {path}")
    if pixels.ndim == 3 and pixels.shape[2] == 4:
        pixels = pixels[:, :, :3]
    return Scan(
        pixels=pixels,
        species=record.species,
        preparation_id=record.preparation_id,
        scan_id=record.scan_id,
    )
