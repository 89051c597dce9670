"""Pool a patch's descriptor set into one fixed-length vector.

Two encodings: the hard-assignment codeword histogram (BoW) and the
Fisher Vector built from the log-likelihood gradients of a diagonal GMM
with respect to its means and standard deviations. The weight-gradient
block is omitted, so an FV has length 2*k*D.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .binio import Reader, Writer
from .descriptors import DescriptorSet
from .errors import DimensionMismatch, FormatError, MixedEncodingKinds
from .vocab import Codebook, GmmModel, gmm_posteriors, kmeans_assign

ENCODING_BOW = "bow"
ENCODING_FV = "fv"

DATASET_MAGIC = b"PVEV"
DATASET_VERSION = 1

GATE_CODES = {"fg": 1, "bg": 0}
GATE_NAMES = {1: "fg", 0: "bg"}


@dataclass
class EncodedVector:
    """Fixed-length pooled representation of one patch."""

    values: np.ndarray
    encoding: str  # "bow" | "fv"
    vocab_k: int
    descriptor_dim: int


def encode_bow(dset: DescriptorSet, codebook: Codebook,
               raw_counts: bool = False) -> EncodedVector:
    """Histogram of nearest-codeword assignments, normalized to sum 1.

    ``raw_counts`` switches off the relative-frequency normalization.
    """
    if dset.dim != codebook.dim:
        raise DimensionMismatch(
            f"descriptors D={dset.dim} vs codebook D={codebook.dim}"
        )
    assign = kmeans_assign(dset.data, codebook)
    counts = np.bincount(assign, minlength=codebook.k).astype(np.float64)
    values = counts if raw_counts else counts / dset.n
    return EncodedVector(values=values, encoding=ENCODING_BOW,
                         vocab_k=codebook.k, descriptor_dim=dset.dim)


def encode_fv(dset: DescriptorSet, gmm: GmmModel, power_norm: bool = True,
              l2_norm: bool = True) -> EncodedVector:
    """Fisher Vector of a descriptor set under a diagonal GMM.

    Layout is [mean block, variance block], each component-major. With
    responsibilities gamma and u = (x - mu_j) / sigma_j:

        mean block      sum_n gamma(n,j) u      / (N sqrt(w_j))
        variance block  sum_n gamma(n,j)(u^2-1) / (N sqrt(2 w_j))

    Optional signed square root then L2 normalization.
    """
    if dset.dim != gmm.dim:
        raise DimensionMismatch(
            f"descriptors D={dset.dim} vs GMM D={gmm.dim}"
        )
    x = np.asarray(dset.data, dtype=np.float64)
    n = x.shape[0]
    gamma = gmm_posteriors(x, gmm)  # N x k
    sigma = np.sqrt(gmm.variances)  # k x D

    u = (x[:, None, :] - gmm.means[None, :, :]) / sigma[None, :, :]
    s_mean = np.einsum("nk,nkd->kd", gamma, u)
    s_var = np.einsum("nk,nkd->kd", gamma, u * u - 1.0)

    w = gmm.weights
    mean_block = s_mean / (n * np.sqrt(w)[:, None])
    var_block = s_var / (n * np.sqrt(2.0 * w)[:, None])

    # components whose responsibility mass underflowed contribute nothing
    dead = gamma.sum(axis=0) <= 0.0
    if dead.any():
        mean_block[dead] = 0.0
        var_block[dead] = 0.0

    values = np.concatenate([mean_block.ravel(), var_block.ravel()])
    if power_norm:
        values = np.sign(values) * np.sqrt(np.abs(values))
    if l2_norm:
        norm = np.sqrt((values ** 2).sum())
        if norm > 0:
            values = values / norm
    return EncodedVector(values=values, encoding=ENCODING_FV,
                         vocab_k=gmm.k, descriptor_dim=dset.dim)


def encoded_length(encoding: str, k: int, dim: int) -> int:
    return k if encoding == ENCODING_BOW else 2 * k * dim


@dataclass
class EncodedDataset:
    """Encoded patches of one fold plus the labels needed downstream."""

    encoding: str
    vocab_k: int
    descriptor_dim: int
    power_norm: bool
    l2_norm: bool
    patch_ids: list
    scan_ids: list
    species: list   # species of the parent scan
    preparations: list
    gates: list     # "fg" | "bg"
    matrix: np.ndarray  # count x L float32

    def __post_init__(self):
        want = encoded_length(self.encoding, self.vocab_k,
                              self.descriptor_dim)
        if self.matrix.ndim != 2 or self.matrix.shape[1] != want:
            raise MixedEncodingKinds(
                f"matrix width {self.matrix.shape} != expected {want}"
            )

    def training_labels(self, bg_label: str = "BG") -> list:
        """Per-patch class: the scan species, or BG for background gates."""
        return [sp if g == "fg" else bg_label
                for sp, g in zip(self.species, self.gates)]

    def __len__(self):
        return self.matrix.shape[0]


def save_encoded_dataset(ds: EncodedDataset, path) -> None:
    w = Writer()
    w.raw(DATASET_MAGIC)
    w.u32(DATASET_VERSION)
    w.text(ds.encoding)
    w.u32(ds.vocab_k)
    w.u32(ds.descriptor_dim)
    w.u8(1 if ds.power_norm else 0)
    w.u8(1 if ds.l2_norm else 0)
    w.u32(ds.matrix.shape[1])
    w.u32(ds.matrix.shape[0])
    for i in range(ds.matrix.shape[0]):
        w.text(ds.patch_ids[i])
        w.text(ds.scan_ids[i])
        w.text(ds.species[i])
        w.u8(ds.preparations[i])
        w.u8(GATE_CODES[ds.gates[i]])
        w.f32_array(ds.matrix[i])
    w.save(path)


def load_encoded_dataset(path) -> EncodedDataset:
    with open(path, "rb") as fh:
        r = Reader(fh.read(), name=str(path))
    if r.take(4) != DATASET_MAGIC:
        raise FormatError(f"{path}: bad magic")
    if r.u32() != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported version")
    encoding = r.text()
    vocab_k = r.u32()
    dim = r.u32()
    power = bool(r.u8())
    l2 = bool(r.u8())
    width = r.u32()
    count = r.u32()
    patch_ids, scan_ids, species, preps, gates = [], [], [], [], []
    matrix = np.empty((count, width), dtype=np.float32)
    for i in range(count):
        patch_ids.append(r.text())
        scan_ids.append(r.text())
        species.append(r.text())
        preps.append(r.u8())
        gates.append(GATE_NAMES[r.u8()])
        matrix[i] = r.f32_array(width)
    r.done()
    return EncodedDataset(
        encoding=encoding, vocab_k=vocab_k, descriptor_dim=dim,
        power_norm=power, l2_norm=l2, patch_ids=patch_ids,
        scan_ids=scan_ids, species=species, preparations=preps,
        gates=gates, matrix=matrix,
    )
