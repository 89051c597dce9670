import numpy as np
import pytest

from mycobow.descriptors import (DescriptorSet, flatten_descriptors,
                                 read_pvdf, toy_descriptor, write_pvdf)
from mycobow.errors import DimensionMismatch, FormatError, NonFiniteValue


def random_sets(rng, count=3, dim=8):
    sets = []
    for i in range(count):
        n = int(rng.integers(1, 20))
        sets.append(DescriptorSet(
            data=rng.normal(size=(n, dim)).astype(np.float32),
            patch_id=f"scan:{i}:0",
        ))
    return sets


class TestPvdfRoundTrip:
    def test_roundtrip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(0)
        sets = random_sets(rng)
        path = tmp_path / "d.pvdf"
        write_pvdf(sets, path)
        loaded = read_pvdf(path)
        assert len(loaded) == len(sets)
        for orig, back in zip(sets, loaded):
            assert back.patch_id == orig.patch_id
            assert np.array_equal(back.data, orig.data)

    def test_paper_scale_set(self, tmp_path):
        rng = np.random.default_rng(1)
        dset = DescriptorSet(
            data=rng.normal(size=(169, 256)).astype(np.float32),
            patch_id="scan:0:0",
        )
        path = tmp_path / "d.pvdf"
        write_pvdf([dset], path)
        (loaded,) = read_pvdf(path)
        assert loaded.n == 169
        assert loaded.dim == 256

    def test_empty_file_is_format_error(self, tmp_path):
        path = tmp_path / "empty.pvdf"
        path.write_bytes(b"")
        with pytest.raises(FormatError):
            read_pvdf(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.pvdf"
        path.write_bytes(b"XXXX" + b"\x00" * 12)
        with pytest.raises(FormatError):
            read_pvdf(path)

    def test_truncated_body(self, tmp_path):
        rng = np.random.default_rng(2)
        path = tmp_path / "t.pvdf"
        write_pvdf(random_sets(rng, count=1), path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-5])
        with pytest.raises(FormatError):
            read_pvdf(path)

    def test_nonfinite_rejected_on_read(self, tmp_path):
        data = np.array([[1.0, np.inf]], dtype=np.float32)
        path = tmp_path / "nf.pvdf"
        with pytest.raises(NonFiniteValue):
            write_pvdf([DescriptorSet(data=data, patch_id="x")], path)

    def test_mixed_dimensions_rejected_on_write(self, tmp_path):
        a = DescriptorSet(np.zeros((2, 4), dtype=np.float32), "a")
        b = DescriptorSet(np.zeros((2, 5), dtype=np.float32), "b")
        with pytest.raises(DimensionMismatch):
            write_pvdf([a, b], tmp_path / "m.pvdf")

    def test_trailing_bytes_rejected(self, tmp_path):
        rng = np.random.default_rng(3)
        path = tmp_path / "tr.pvdf"
        write_pvdf(random_sets(rng, count=1), path)
        path.write_bytes(path.read_bytes() + b"junk")
        with pytest.raises(FormatError):
            read_pvdf(path)


class TestToyDescriptor:
    def test_constant_patch_identical_rows(self):
        patch = np.full((32, 32), 0.25)
        dset = toy_descriptor(patch, 4, 4, dim=16)
        assert dset.n == 16
        assert np.all(dset.data == dset.data[0])

    def test_grid_13x13_gives_169_points(self):
        patch = np.zeros((52, 52))
        dset = toy_descriptor(patch, 13, 13, dim=16)
        assert dset.n == 169
        assert dset.grid_shape == (13, 13)

    def test_deterministic(self):
        rng = np.random.default_rng(4)
        patch = rng.random((40, 40))
        a = toy_descriptor(patch, 4, 4, dim=16)
        b = toy_descriptor(patch, 4, 4, dim=16)
        assert np.array_equal(a.data, b.data)

    def test_depends_only_on_content(self):
        rng = np.random.default_rng(5)
        patch = rng.random((24, 24))
        a = toy_descriptor(patch, 2, 2, dim=10, patch_id="one")
        b = toy_descriptor(patch.copy(), 2, 2, dim=10, patch_id="two")
        assert np.array_equal(a.data, b.data)

    def test_indivisible_grid_rejected(self):
        with pytest.raises(ValueError):
            toy_descriptor(np.zeros((30, 30)), 4, 4, dim=8)

    def test_dim_tiling_and_truncation(self):
        patch = np.random.default_rng(6).random((16, 16))
        short = toy_descriptor(patch, 2, 2, dim=7)
        long = toy_descriptor(patch, 2, 2, dim=23)
        assert short.data.shape == (4, 7)
        assert long.data.shape == (4, 23)
        # tiled tail repeats the base features
        assert np.allclose(long.data[:, 10:20], long.data[:, 0:10])


class TestFlatten:
    def test_row_major_order(self):
        dset = DescriptorSet(np.array([[1, 2, 3], [4, 5, 6]],
                                      dtype=np.float32), "p")
        assert flatten_descriptors(dset).tolist() == [1, 2, 3, 4, 5, 6]

    def test_paper_length(self):
        dset = DescriptorSet(np.zeros((169, 256), dtype=np.float32), "p")
        assert flatten_descriptors(dset).shape == (43264,)

    def test_single_row_unchanged(self):
        dset = DescriptorSet(np.array([[9.0, 8.0]], dtype=np.float32), "p")
        assert np.array_equal(flatten_descriptors(dset),
                              np.array([9.0, 8.0], dtype=np.float32))

    def test_length_invariant(self):
        rng = np.random.default_rng(8)
        for _ in range(10):
            n = int(rng.integers(1, 30))
            d = int(rng.integers(1, 20))
            dset = DescriptorSet(
                rng.normal(size=(n, d)).astype(np.float32), "p"
            )
            assert flatten_descriptors(dset).shape == (n * d,)
