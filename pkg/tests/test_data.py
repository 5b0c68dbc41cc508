"""Annotation parsing, split arithmetic, the synthetic generator and image
format round-trips."""

import numpy as np
import pytest

from msdet.data import (
    SceneSpec,
    gen_synthetic,
    load_dataset,
    load_image,
    parse_dota,
    save_dataset,
    save_raw,
    split,
    toy_datasets,
)
from msdet.errors import ConfigurationError, FormatError, ValidationError


class TestParseDota:
    def test_documented_line(self):
        ann = parse_dota("2753 2408 2861 2385 2888 2468 2805 2502 plane 0")
        assert len(ann.objects) == 1
        box = ann.to_gt_boxes({"plane": 0})[0]
        assert box.box == (2753.0, 2385.0, 2888.0, 2502.0)
        assert box.class_id == 0
        assert not box.difficult

    def test_metadata_skipped(self):
        text = "imagesource:GoogleEarth\ngsd:0.146343590398\n1 1 2 1 2 2 1 2 ship 1\n"
        ann = parse_dota(text)
        assert len(ann.objects) == 1
        assert ann.warnings == 0
        assert ann.to_gt_boxes({"ship": 3})[0].difficult

    def test_degenerate_quad_rejected(self):
        ann = parse_dota("5 5 5 5 5 5 5 5 plane 0")
        assert ann.objects == []
        assert ann.warnings == 1

    def test_malformed_counted_not_fatal(self):
        text = "1 2 3 plane\nnot a line\n0 0 4 0 4 4 0 4 ship 0\n"
        ann = parse_dota(text)
        assert len(ann.objects) == 1
        assert ann.warnings == 2

    def test_metadata_only_file(self):
        ann = parse_dota("imagesource:GF-2\ngsd:0.5\n")
        assert ann.objects == [] and ann.warnings == 0


class TestSplit:
    def test_documented_sizes_2806(self):
        tr, va, te = split([f"im{i}" for i in range(2806)], seed=1)
        assert (len(tr), len(va), len(te)) == (2244, 280, 282)

    def test_ten(self):
        tr, va, te = split(list(range(10)), seed=0)
        assert (len(tr), len(va), len(te)) == (8, 1, 1)

    def test_deterministic_and_disjoint(self):
        ids = [f"x{i}" for i in range(101)]
        a = split(ids, seed=7)
        b = split(ids, seed=7)
        assert a == b
        everything = a[0] + a[1] + a[2]
        assert sorted(everything) == sorted(ids)

    def test_duplicates_rejected(self):
        with pytest.raises(ValidationError):
            split(["a", "b", "a"], seed=0)


class TestSynthetic:
    def test_zero_objects(self):
        spec = SceneSpec(objects_per_image=(0, 0), seed=3)
        ds = gen_synthetic(spec, 4)
        assert all(g == [] for g in ds.gts)

    def test_boxes_in_bounds_and_scale_ranges(self):
        spec = SceneSpec(seed=4)
        ds = gen_synthetic(spec, 20)
        for boxes in ds.gts:
            for b in boxes:
                x0, y0, x1, y1 = b.box
                assert 0 <= x0 < x1 <= spec.image_size
                assert 0 <= y0 < y1 <= spec.image_size
                side = max(x1 - x0, y1 - y0)
                lo, hi = (spec.small_scale, spec.large_scale)[b.class_id]
                assert lo <= side <= hi

    def test_bit_identical_under_seed(self):
        a = gen_synthetic(SceneSpec(seed=5), 6)
        b = gen_synthetic(SceneSpec(seed=5), 6)
        for ia, ib in zip(a.images, b.images):
            assert (ia == ib).all()
        assert a.gts == b.gts

    def test_pixel_range(self):
        ds = gen_synthetic(SceneSpec(seed=6), 3)
        for img in ds.images:
            assert img.min() >= 0.0 and img.max() <= 1.0
            assert img.shape == (3, 96, 96)

    def test_multiscale_invariant_enforced(self):
        with pytest.raises(ConfigurationError):
            SceneSpec(small_scale=(6, 50), large_scale=(40, 80))

    def test_toy_protocol_sizes(self):
        tr, va, te = toy_datasets(seed=0, n_total=250)
        assert (len(tr), len(va), len(te)) == (200, 25, 25)


class TestImages:
    def test_ppm_all_255(self, tmp_path):
        p = tmp_path / "white.ppm"
        p.write_bytes(b"P6\n2 2\n255\n" + b"\xff" * 12)
        t = load_image(str(p))
        assert t.shape == (1, 3, 2, 2)
        assert (t.data == 1.0).all()

    def test_raw_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(7)
        img = rng.uniform(0, 1, (3, 5, 4)).astype(np.float32)
        path = str(tmp_path / "img.msdt")
        save_raw(path, img)
        back = load_image(path)
        assert back.shape == (1, 3, 5, 4)
        assert (back.data[0].astype(np.float32) == img).all()

    def test_truncated_raw(self, tmp_path):
        path = str(tmp_path / "img.msdt")
        save_raw(path, np.zeros((3, 4, 4), dtype=np.float32))
        data = open(path, "rb").read()
        with open(path, "wb") as f:
            f.write(data[:-8])
        with pytest.raises(FormatError, match="expected"):
            load_image(path)

    def test_unknown_magic(self, tmp_path):
        p = tmp_path / "bad.bin"
        p.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(FormatError, match="byte offset 0"):
            load_image(str(p))


class TestDatasetDir:
    def test_roundtrip(self, tmp_path):
        ds = gen_synthetic(SceneSpec(seed=8), 5)
        out = str(tmp_path / "ds")
        save_dataset(ds, out)
        back = load_dataset(out)
        assert back.ids == ds.ids
        assert back.class_names == ds.class_names
        for ia, ib in zip(ds.images, back.images):
            assert (ia == ib).all()
        for ga, gb in zip(ds.gts, back.gts):
            assert len(ga) == len(gb)
            for a, b in zip(ga, gb):
                assert a.class_id == b.class_id
                assert np.allclose(a.box, b.box, atol=0.01)  # 2-decimal text
