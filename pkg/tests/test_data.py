import numpy as np
import pytest

from unetlab.data import (
    N_BUCKETS, Dataset, GenerationError, Sample, SynthConfig, area_buckets, assign_splits, extract_patches,
    gen_synthetic, load_dataset, load_pgm_float, read_pgm, save_dataset, tile_origins, write_pgm,
)
from unetlab.tensor import FormatError, ShapeError

TINY = SynthConfig(count=12, size=(16, 16), radius=(2.0, 5.0))


class TestSynthetic:
    def test_deterministic(self):
        a, b = gen_synthetic(TINY), gen_synthetic(TINY)
        for s, t in zip(a, b):
            assert s.image.tobytes() == t.image.tobytes()
            assert s.mask.tobytes() == t.mask.tobytes()
            assert (s.id, s.split, s.size_bucket) == (t.id, t.split, t.size_bucket)

    def test_seed_changes_data(self):
        from dataclasses import replace
        a, b = gen_synthetic(TINY), gen_synthetic(replace(TINY, seed=8))
        assert any(s.image.tobytes() != t.image.tobytes() for s, t in zip(a, b))

    def test_noiseless_single_blob(self):
        cfg = SynthConfig(count=5, size=(24, 24), blobs=(1, 1), radius=(3.0, 6.0), noise=0.0)
        for s in gen_synthetic(cfg):
            on = s.mask[0] > 0.5
            assert on.any()
            assert np.all(s.image[0][on] > cfg.background)
            np.testing.assert_array_equal(s.image[0][~on], cfg.background)

    def test_ranges(self):
        for s in gen_synthetic(TINY):
            assert s.image.shape == (1, 16, 16)
            assert 0.0 <= s.image.min() and s.image.max() <= 1.0
            assert set(np.unique(s.mask)) <= {0.0, 1.0}

    def test_every_split_present(self):
        ds = gen_synthetic(TINY)
        for split in ("train", "val", "test"):
            assert ds.split(split)

    def test_default_split_sizes(self):
        ds = gen_synthetic(SynthConfig())
        assert [len(ds.split(s)) for s in ("train", "val", "test")] == [120, 40, 40]

    def test_bucket_coverage_on_1000_masks(self):
        ds = gen_synthetic(SynthConfig(count=1000, size=(32, 32), radius=(2.0, 7.0)))
        counts = np.bincount([s.size_bucket for s in ds], minlength=N_BUCKETS)
        assert len(counts) == N_BUCKETS
        assert counts.min() >= 50

    def test_buckets_follow_area(self):
        ds = gen_synthetic(TINY)
        pairs = sorted((s.mask.sum(), s.size_bucket) for s in ds)
        buckets = [b for _, b in pairs]
        assert buckets == sorted(buckets)

    @pytest.mark.parametrize("kwargs", [
        {"count": 2},
        {"radius": (5.0, 9.0), "size": (16, 16)},
        {"deformation": 0.6},
        {"blobs": (3, 1)},
    ])
    def test_invalid_config(self, kwargs):
        from dataclasses import replace
        with pytest.raises(GenerationError):
            gen_synthetic(replace(TINY, **kwargs))

    def test_multiclass(self):
        from dataclasses import replace
        ds = gen_synthetic(replace(TINY, classes=2))
        assert ds.samples[0].mask.shape == (2, 16, 16)


class TestSplitsAndBuckets:
    def test_splits_stable_under_reordering(self):
        ids = [f"img{k:05d}" for k in range(30)]
        assert assign_splits(ids) == assign_splits(list(reversed(ids)))

    def test_area_buckets_equal_sizes(self):
        b = area_buckets(list(range(70)))
        assert np.bincount(b).tolist() == [10] * 7


class TestPGM:
    def test_handwritten_fixture(self, tmp_path):
        path = tmp_path / "f.pgm"
        path.write_bytes(b"P5\n2 2\n65535\n" + bytes([0, 0, 255, 255, 128, 0, 0, 0]))
        np.testing.assert_array_equal(load_pgm_float(path), [[0.0, 1.0], [32768 / 65535, 0.0]])
        assert load_pgm_float(path)[1, 0] == pytest.approx(0.500007629, abs=1e-9)

    def test_comment_and_8bit(self, tmp_path):
        path = tmp_path / "c.pgm"
        path.write_bytes(b"P5\n# made by hand\n3 1\n255\n" + bytes([0, 51, 255]))
        raster, maxval = read_pgm(path)
        assert maxval == 255
        np.testing.assert_array_equal(raster, [[0, 51, 255]])

    def test_roundtrip(self, tmp_path):
        a = np.arange(12, dtype=np.uint16).reshape(3, 4) * 5000
        write_pgm(tmp_path / "r.pgm", a)
        raster, maxval = read_pgm(tmp_path / "r.pgm")
        np.testing.assert_array_equal(raster, a)
        assert maxval == 65535

    @pytest.mark.parametrize("payload,match", [
        (b"P2\n1 1\n255\n0", "P5"),
        (b"P5\n2 2\n65535\n\x00\x00", "raster"),
        (b"P5\n2 x\n255\n", "bad header"),
        (b"P5\n1 1\n10\n\x0b", "maxval"),
    ])
    def test_malformed(self, tmp_path, payload, match):
        path = tmp_path / "bad.pgm"
        path.write_bytes(payload)
        with pytest.raises(FormatError, match=match):
            read_pgm(path)

    def test_error_mentions_byte_offset(self, tmp_path):
        path = tmp_path / "bad.pgm"
        path.write_bytes(b"P6\n1 1\n255\n\x00")
        with pytest.raises(FormatError, match="byte 0"):
            read_pgm(path)


class TestDatasetIO:
    def test_save_load(self, tmp_path):
        ds = gen_synthetic(TINY)
        back = load_dataset(save_dataset(ds, tmp_path / "ds"))
        assert len(back) == len(ds)
        for s, t in zip(ds, back):
            assert (s.id, s.split, s.size_bucket) == (t.id, t.split, t.size_bucket)
            assert s.mask.tobytes() == t.mask.tobytes()
            assert np.abs(s.image - t.image).max() <= 1 / 65535

    def test_manifest_header(self, tmp_path):
        save_dataset(gen_synthetic(TINY), tmp_path)
        assert (tmp_path / "manifest.tsv").read_text().splitlines()[0].split("\t") == [
            "id", "image_path", "mask_path", "split", "size_bucket"]

    def test_unknown_split(self, tmp_path):
        ds = gen_synthetic(TINY)
        save_dataset(ds, tmp_path)
        man = tmp_path / "manifest.tsv"
        lines = man.read_text().splitlines()
        cols = lines[3].split("\t")
        cols[3] = "holdout"
        lines[3] = "\t".join(cols)
        man.write_text("\n".join(lines) + "\n")
        with pytest.raises(FormatError, match=r"manifest.tsv:4"):
            load_dataset(tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FormatError):
            load_dataset(tmp_path)

    def test_duplicate_id(self, tmp_path):
        save_dataset(gen_synthetic(TINY), tmp_path)
        man = tmp_path / "manifest.tsv"
        lines = man.read_text().splitlines()
        man.write_text("\n".join(lines + [lines[1]]) + "\n")
        with pytest.raises(FormatError, match="duplicate"):
            load_dataset(tmp_path)


class TestPatches:
    def _ds(self, h, w):
        img = np.arange(h * w, dtype=float).reshape(1, h, w) / (h * w)
        return Dataset([Sample(img, (img > 0.5).astype(float), "a", "test")])

    def test_whole_image(self):
        assert len(extract_patches(self._ds(96, 96), (96, 96), (96, 96))) == 1

    def test_grid(self):
        out = extract_patches(self._ds(96, 96), (64, 64), (32, 32))
        assert len(out) == 4
        assert [s.offset for s in out] == [(0, 0), (0, 32), (32, 0), (32, 32)]
        assert out.samples[1].id == "a@0,32"
        assert out.samples[1].parent == "a"

    def test_border_clamped(self):
        assert tile_origins(10, 4, 4) == [0, 4, 6]

    def test_reassembly(self):
        ds = self._ds(12, 8)
        rebuilt = np.zeros((1, 12, 8))
        for p in extract_patches(ds, (4, 4), (4, 4)):
            y, x = p.offset
            rebuilt[:, y:y + 4, x:x + 4] = p.image
        np.testing.assert_array_equal(rebuilt, ds.samples[0].image)

    def test_patch_too_large(self):
        with pytest.raises(ShapeError):
            tile_origins(8, 9, 1)
