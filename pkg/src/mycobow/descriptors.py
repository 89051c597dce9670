"""Per-patch local descriptor sets.

Descriptors either arrive from files written by an external CNN feature
exporter (PVDF format below) or come from a built-in deterministic
local-statistics descriptor good enough for desk-scale runs.

PVDF format, little-endian throughout:

    magic   4 bytes  b"PVDF"
    version u32      (currently 1)
    D       u32      descriptor dimension
    count   u32      number of patches
    per patch:
        id_len  u16
        id      id_len bytes, UTF-8
        N       u32
        values  N*D float32, row-major
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, FormatError, NonFiniteValue

PVDF_MAGIC = b"PVDF"
PVDF_VERSION = 1

TOY_BASE_FEATURES = 10  # mean, variance, 8 gradient-magnitude bins
DEFAULT_TOY_DIM = 16


@dataclass
class DescriptorSet:
    """N local descriptors of dimension D for one patch."""

    data: np.ndarray  # NxD float32
    patch_id: str
    grid_shape: tuple | None = None  # (rows, cols), rows*cols == N

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 2 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise DimensionMismatch(
                f"descriptor set must be NxD with N,D >= 1, got {self.data.shape}"
            )
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteValue(f"descriptor set {self.patch_id} is not finite")
        if self.grid_shape is not None:
            rows, cols = self.grid_shape
            if rows * cols != self.data.shape[0]:
                raise DimensionMismatch(
                    f"grid {rows}x{cols} does not cover N={self.data.shape[0]}"
                )

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class DescriptorSource:
    """Where patch descriptors come from: file ingest or the toy generator."""

    kind: str  # "file" | "toy"
    dimension: int
    params: dict


def write_pvdf(sets, path) -> None:
    """Serialize descriptor sets; all sets must share one dimension."""
    sets = list(sets)
    if not sets:
        raise ValueError("no descriptor sets to write")
    dim = sets[0].dim
    for s in sets:
        if s.dim != dim:
            raise DimensionMismatch(
                f"set {s.patch_id} has D={s.dim}, expected {dim}"
            )
    with open(path, "wb") as fh:
        fh.write(PVDF_MAGIC)
        fh.write(struct.pack("<III", PVDF_VERSION, dim, len(sets)))
        for s in sets:
            ident = s.patch_id.encode("utf-8")
            fh.write(struct.pack("<H", len(ident)))
            fh.write(ident)
            fh.write(struct.pack("<I", s.n))
            fh.write(np.ascontiguousarray(s.data, dtype="<f4").tobytes())


def read_pvdf(path) -> list[DescriptorSet]:
    """Parse a PVDF file back into descriptor sets.

    Raises FormatError on bad magic/version or truncation, NonFiniteValue
    when stored values are not finite.
    """
    with open(path, "rb") as fh:
        blob = fh.read()

    def take(offset, count):
        if offset + count > len(blob):
            raise FormatError(f"{path}: truncated at byte {offset}")
        return blob[offset:offset + count], offset + count

    raw, pos = take(0, 4)
    if raw != PVDF_MAGIC:
        raise FormatError(f"{path}: bad magic {raw!r}")
    raw, pos = take(pos, 12)
    version, dim, count = struct.unpack("<III", raw)
    if version != PVDF_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if dim < 1:
        raise DimensionMismatch(f"{path}: dimension {dim} < 1")

    sets = []
    for _ in range(count):
        raw, pos = take(pos, 2)
        (id_len,) = struct.unpack("<H", raw)
        raw, pos = take(pos, id_len)
        patch_id = raw.decode("utf-8")
        raw, pos = take(pos, 4)
        (n,) = struct.unpack("<I", raw)
        if n < 1:
            raise FormatError(f"{path}: patch {patch_id!r} has zero rows")
        raw, pos = take(pos, 4 * n * dim)
        data = np.frombuffer(raw, dtype="<f4").reshape(n, dim)
        if not np.all(np.isfinite(data)):
            raise NonFiniteValue(f"{path}: patch {patch_id!r} is not finite")
        sets.append(DescriptorSet(data=data.copy(), patch_id=patch_id))
    if pos != len(blob):
        raise FormatError(f"{path}: {len(blob) - pos} trailing bytes")
    return sets


def toy_descriptor(patch_pixels: np.ndarray, grid_rows: int, grid_cols: int,
                   dim: int = DEFAULT_TOY_DIM, patch_id: str = "") -> DescriptorSet:
    """Deterministic local statistics over a grid of patch cells.

    Each cell yields [mean, variance, 8-bin gradient-magnitude histogram],
    tiled or truncated to ``dim``. Output depends only on pixel content,
    the grid, and the dimension. Patch sides that do not divide evenly
    are split like numpy's array_split (leading cells one pixel larger),
    so a 500x500 patch under a 13x13 grid still yields 169 descriptors.
    """
    pixels = np.asarray(patch_pixels, dtype=np.float64)
    if pixels.ndim == 3:
        pixels = pixels.mean(axis=2)
    h, w = pixels.shape
    if grid_rows > h or grid_cols > w:
        raise ValueError(
            f"patch {h}x{w} too small for a {grid_rows}x{grid_cols} grid"
        )
    row_edges = np.linspace(0, h, grid_rows + 1).astype(int)
    col_edges = np.linspace(0, w, grid_cols + 1).astype(int)

    rows = []
    reps = -(-dim // TOY_BASE_FEATURES)  # ceil division
    for gr in range(grid_rows):
        for gc in range(grid_cols):
            cell = pixels[row_edges[gr]:row_edges[gr + 1],
                          col_edges[gc]:col_edges[gc + 1]]
            if min(cell.shape) >= 2:
                gy, gx = np.gradient(cell)
                mag = np.minimum(np.hypot(gx, gy), 1.0)
            else:
                mag = np.zeros_like(cell)
            hist, _ = np.histogram(mag, bins=TOY_BASE_FEATURES - 2,
                                   range=(0.0, 1.0))
            base = np.concatenate((
                [cell.mean(), cell.var()],
                hist / cell.size,
            ))
            rows.append(np.tile(base, reps)[:dim])
    return DescriptorSet(
        data=np.asarray(rows, dtype=np.float32),
        patch_id=patch_id,
        grid_shape=(grid_rows, grid_cols),
    )


def flatten_descriptors(dset: DescriptorSet) -> np.ndarray:
    """Row-major concatenation into one length N*D vector."""
    return dset.data.reshape(-1).copy()
