from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from icicle import data as D
from icicle import numerics as nx


@pytest.fixture(scope="module")
def default_dataset():
    return D.generate_synthetic(D.SyntheticSpec(), 1)


def small_spec(**kw) -> D.SyntheticSpec:
    base = dict(num_classes=3, image_size=(13, 13, 3), common_parts=1, distinctive_parts=1, samples_per_class=4)
    base.update(kw)
    return D.SyntheticSpec(**base)


@pytest.fixture(scope="module")
def ds():
    return D.generate_synthetic(small_spec(num_classes=10, samples_per_class=10, image_size=(32, 32, 3)), 0)


class TestGlyphs:
    def test_library(self):
        lib = D.glyph_library()
        assert len(lib) == len(D.COLORS) * len(D._shapes())
        assert all(t.shape == (D.GLYPH, D.GLYPH, 3) for t in lib)
        flat = {t.tobytes() for t in lib}
        assert len(flat) == len(lib)

    def test_default_spec_fits(self):
        D.SyntheticSpec().validate()


class TestSpecValidation:
    @pytest.mark.parametrize("bad", [
        dict(num_classes=0),
        dict(distinctive_parts=0),
        dict(noise=-0.1),
        dict(samples_per_class=0),
        dict(image_size=(13, 13, 1)),
        dict(common_parts=3, distinctive_parts=2),  # 4 cells on a 13x13 image
        dict(library_size=5, num_classes=5),
        dict(library_size=10**6),
    ])
    def test_invalid(self, bad):
        with pytest.raises(D.DataError):
            small_spec(**bad).validate()


class TestGenerate:
    def test_deterministic_without_noise(self):
        spec = small_spec(noise=0.0)
        a, b = D.generate_synthetic(spec, 5), D.generate_synthetic(spec, 5)
        assert a.images.tobytes() == b.images.tobytes()
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_deterministic_with_noise(self):
        a, b = D.generate_synthetic(small_spec(), 5), D.generate_synthetic(small_spec(), 5)
        assert a.images.tobytes() == b.images.tobytes()

    def test_seed_matters(self):
        assert not np.array_equal(D.generate_synthetic(small_spec(), 1).images, D.generate_synthetic(small_spec(), 2).images)

    def test_shape_range_balance(self, default_dataset):
        ds = default_dataset
        assert ds.images.shape == (2400, 32, 32, 3) and ds.images.dtype == np.float32
        assert ds.images.min() >= 0 and ds.images.max() <= 1
        np.testing.assert_array_equal(np.bincount(ds.labels), np.full(20, 120))

    def test_glyphs_distinct_between_classes(self, default_dataset):
        used = list(default_dataset.common_glyphs)
        for glyphs in default_dataset.class_glyphs.values():
            used += glyphs
        assert len(used) == len(set(used))

    def test_single_class_same_glyph_multiset(self):
        ds = D.generate_synthetic(small_spec(num_classes=1, noise=0.0, samples_per_class=6), 3)
        lib = D.glyph_library()
        glyphs = ds.common_glyphs + ds.class_glyphs[0]
        for img in ds.images:
            found = sorted(
                g for g in glyphs for y, x in itertools.product(range(1, 13, D.CELL), repeat=2)
                if y + D.GLYPH <= 13 and x + D.GLYPH <= 13
                and np.allclose(img[y:y + D.GLYPH, x:x + D.GLYPH], lib[g], atol=1e-6)
            )
            assert found == sorted(glyphs)

    def test_nearest_glyph_classifier(self, default_dataset):
        """1-NN over distinctive glyph templates at every grid cell separates the classes."""
        ds = default_dataset
        lib = D.glyph_library()
        h = ds.images.shape[1]
        cells = [(1 + D.CELL * i, 1 + D.CELL * j) for i in range((h - 1) // D.CELL) for j in range((h - 1) // D.CELL)]
        patches = np.stack([ds.images[:, y:y + D.GLYPH, x:x + D.GLYPH].reshape(len(ds), -1) for y, x in cells], 1)
        owners, templates = [], []
        for c, glyphs in ds.class_glyphs.items():
            for g in glyphs:
                owners.append(c)
                templates.append(lib[g].ravel())
        templates = np.array(templates)
        d = ((patches[:, :, None, :] - templates[None, None]) ** 2).sum(-1)  # (N, cells, templates)
        pred = np.array(owners)[d.min(axis=1).argmin(axis=1)]
        assert np.mean(pred == ds.labels) > 0.9


class TestSplit:
    @pytest.mark.parametrize("tasks, sizes", [(3, [4, 3, 3]), (10, [1] * 10), (1, [10]), (4, [3, 3, 2, 2])])
    def test_sizes(self, ds, tasks, sizes):
        stream = D.split_tasks(ds, tasks, 0)
        assert [len(t.classes) for t in stream] == sizes

    def test_even(self, default_dataset):
        stream = D.split_tasks(default_dataset, 4, 1)
        assert [len(t.classes) for t in stream] == [5, 5, 5, 5]

    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("tasks", [1, 2, 3, 5, 10])
    def test_disjoint_coverage_and_stratified(self, ds, seed, tasks):
        stream = D.split_tasks(ds, tasks, seed)
        all_classes = [c for t in stream for c in t.classes]
        assert sorted(all_classes) == list(range(10))
        for t in stream:
            assert [t.task_id for t in stream] == list(range(1, tasks + 1))
            for split, n in ((t.train, 7), (t.val, 2), (t.test, 1)):
                assert len(split) == n * len(t.classes)
                assert set(split.labels) == set(t.classes)
                np.testing.assert_array_equal(np.bincount(split.labels, minlength=10)[t.classes], n)

    def test_no_sample_shared_between_splits(self, ds):
        t = D.split_tasks(ds, 1, 0)[0]
        rows = [set(map(bytes, s.images.reshape(len(s), -1).view(np.uint8).reshape(len(s), -1))) for s in (t.train, t.val, t.test)]
        assert not (rows[0] & rows[1] or rows[0] & rows[2] or rows[1] & rows[2])

    def test_deterministic(self, ds):
        a, b = D.split_tasks(ds, 3, 4), D.split_tasks(ds, 3, 4)
        assert a.manifest() == b.manifest()
        np.testing.assert_array_equal(a[0].train.images, b[0].train.images)

    def test_too_many_tasks(self, ds):
        with pytest.raises(D.DataError):
            D.split_tasks(ds, 11, 0)

    def test_too_few_samples(self):
        ds = D.generate_synthetic(small_spec(samples_per_class=2), 0)
        with pytest.raises(D.DataError):
            D.split_tasks(ds, 1, 0)

    def test_manifest(self, ds):
        stream = D.split_tasks(ds, 2, 0)
        lines = stream.manifest().splitlines()
        assert lines[0].startswith("#")
        assert lines[1] == "task 1: " + " ".join(map(str, stream[0].classes))


class TestDatasetFormat:
    def test_round_trip(self, tmp_path):
        ds = D.generate_synthetic(small_spec(), 0)
        D.save_dataset(ds, tmp_path / "d.icds")
        back = D.load_dataset(tmp_path / "d.icds")
        assert back.images.tobytes() == ds.images.tobytes()
        np.testing.assert_array_equal(back.labels, ds.labels)
        assert back.num_classes == ds.num_classes
        assert D.dataset_bytes(back) == D.dataset_bytes(ds)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 6), st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.integers(0, 2**31))
    def test_round_trip_property(self, n, h, w, c, seed):
        rng = nx.make_rng(seed)
        ds = D.Dataset(rng.uniform(size=(n, h, w, c)).astype(np.float32), rng.integers(0, 9, n), 9)
        back = D.parse_dataset(D.dataset_bytes(ds))
        assert back.images.tobytes() == ds.images.tobytes()
        np.testing.assert_array_equal(back.labels, ds.labels)

    def test_layout(self):
        ds = D.Dataset(np.array([[[[0.5]]]], dtype=np.float32), np.array([7]), 8)
        raw = D.dataset_bytes(ds)
        assert raw[:4] == b"ICDS"
        assert raw[4:6] == (1).to_bytes(2, "little")
        assert raw[6:26] == b"".join(v.to_bytes(4, "little") for v in (8, 1, 1, 1, 1))
        assert raw[26:30] == (7).to_bytes(4, "little")
        assert raw[30:34] == np.float32(0.5).tobytes()
        assert len(raw) == 38

    @pytest.mark.parametrize("corrupt, message", [
        (lambda r: b"XCDS" + r[4:], "magic"),
        (lambda r: r[:4] + b"\x09\x00" + r[6:], "version"),
        (lambda r: r[:-10], "truncated"),
        (lambda r: r[:10], "truncated"),
        (lambda r: r[:40] + bytes([r[40] ^ 1]) + r[41:], "checksum"),
    ])
    def test_corruption(self, corrupt, message):
        raw = D.dataset_bytes(D.generate_synthetic(small_spec(), 0))
        with pytest.raises(D.DataError, match=message):
            D.parse_dataset(corrupt(raw))


class TestNetpbm:
    def test_ppm_bytes_by_hand(self):
        img = np.array([[[255, 0, 0], [0, 255, 0]], [[0, 0, 255], [10, 20, 30]]], dtype=np.uint8)
        expected = b"P6\n2 2\n255\n" + bytes([255, 0, 0, 0, 255, 0, 0, 0, 255, 10, 20, 30])
        assert D.ppm_bytes(img) == expected

    def test_pgm_with_comment(self):
        raw = D.pgm_bytes(np.array([[0, 128]], dtype=np.uint8), comment="a\nb")
        assert raw == b"P5\n# a\n# b\n2 1\n255\n\x00\x80"
        arr, comments = D.parse_pnm(raw)
        np.testing.assert_array_equal(arr, [[0, 128]])
        assert comments == ["a", "b"]

    def test_float_conversion(self):
        np.testing.assert_array_equal(D.to_bytes(np.array([0.0, 0.5, 1.0, 2.0, -1.0, 1 / 510])), [0, 128, 255, 255, 0, 1])

    @settings(max_examples=50)
    @given(st.integers(1, 6), st.integers(1, 6), st.booleans(), st.integers(0, 2**31))
    def test_round_trip(self, h, w, colour, seed):
        rng = nx.make_rng(seed)
        shape = (h, w, 3) if colour else (h, w)
        img = rng.integers(0, 256, size=shape, dtype=np.uint8)
        raw = D.ppm_bytes(img) if colour else D.pgm_bytes(img)
        np.testing.assert_array_equal(D.parse_pnm(raw)[0], img)

    def test_files(self, tmp_path):
        img = nx.make_rng(0).uniform(size=(3, 4, 3))
        D.save_image(tmp_path / "x.ppm", img)
        np.testing.assert_array_equal(D.load_image(tmp_path / "x.ppm"), D.to_bytes(img))

    @pytest.mark.parametrize("raw", [b"P3\n1 1\n255\n000", b"P6\n1 1\n65535\n" + bytes(6), b"P6\n2 2\n255\n" + bytes(5),
                                     b"P6\n2"])
    def test_rejects(self, raw):
        with pytest.raises(D.DataError):
            D.parse_pnm(raw)

    def test_wrong_shapes(self):
        with pytest.raises(D.DataError):
            D.ppm_bytes(np.zeros((2, 2)))
        with pytest.raises(D.DataError):
            D.pgm_bytes(np.zeros((2, 2, 3)))
