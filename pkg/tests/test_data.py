import struct

import numpy as np
import pytest

from protoformer.data import (
    Manifest,
    Record,
    SyntheticSpec,
    decode_tensor,
    encode_tensor,
    gen_synthetic_dataset,
    jitter_colours,
    read_array,
    read_manifest,
    render_sample,
    sample_episode,
    shape_mask,
    split_folds,
    write_manifest,
    write_tensor,
)
from protoformer.exceptions import ConfigError, ContractError, DatasetError, TensorFormatError
from protoformer.rng import SplitMix64


class TestTensorFormat:
    def test_round_trip_bitwise(self, tmp_path):
        a = SplitMix64(0).normal((3, 5, 2)).astype(np.float32)
        a[0, 0, 0] = np.float32(-0.0)
        write_tensor(tmp_path / "a.ptns", a)
        b = read_array(tmp_path / "a.ptns")
        assert b.dtype == np.float32 and b.shape == a.shape
        assert a.tobytes() == b.tobytes()

    def test_header_size(self):
        buf = encode_tensor(np.zeros((3, 64, 64), np.float32))
        # magic + version + dtype + rank + three extents
        assert len(buf) - 3 * 64 * 64 * 4 == 4 + 1 + 1 + 4 + 3 * 4 == 22

    def test_layout(self):
        buf = encode_tensor(np.array([[1.5, -2.0]], np.float32))
        assert buf[:4] == b"PTNS" and buf[4] == 1 and buf[5] == 1
        assert struct.unpack("<III", buf[6:18]) == (2, 1, 2)
        assert struct.unpack("<2f", buf[18:]) == (1.5, -2.0)

    def test_scalar(self):
        buf = encode_tensor(np.float32(3.25))
        assert len(buf) == 10 + 4
        out = decode_tensor(buf)
        assert out.shape == () and out == np.float32(3.25)

    @pytest.mark.parametrize(
        "mutate, offset",
        [
            (lambda b: b"XTNS" + b[4:], 0),
            (lambda b: b[:4] + b"\x02" + b[5:], 4),
            (lambda b: b[:5] + b"\x07" + b[6:], 5),
            (lambda b: b[:-1], 21),
            (lambda b: b[:12], 12),
            (lambda b: b + b"\x00", 22),
        ],
    )
    def test_errors_report_offset(self, mutate, offset):
        good = encode_tensor(np.ones(2, np.float32))
        with pytest.raises(TensorFormatError) as err:
            decode_tensor(mutate(good))
        assert err.value.offset == offset
        assert f"offset {offset}" in str(err.value)

    def test_file_error_names_path(self, tmp_path):
        (tmp_path / "bad.ptns").write_bytes(b"nope")
        with pytest.raises(TensorFormatError, match="bad.ptns"):
            read_array(tmp_path / "bad.ptns")
        with pytest.raises(OSError, match="missing.ptns"):
            read_array(tmp_path / "missing.ptns")


class TestFolds:
    def test_pascal_style(self):
        s = split_folds(20, 4, 0)
        assert s.test_classes == set(range(5)) and s.train_classes == set(range(5, 20))

    def test_coco_style(self):
        for f in range(4):
            assert len(split_folds(80, 4, f).test_classes) == 20

    def test_singleton(self):
        assert split_folds(4, 4, 2).test_classes == {2}

    def test_uneven_sizes_differ_by_at_most_one(self):
        sizes = [len(split_folds(10, 4, f).test_classes) for f in range(4)]
        assert sum(sizes) == 10 and max(sizes) - min(sizes) <= 1
        union = set().union(*(split_folds(10, 4, f).test_classes for f in range(4)))
        assert union == set(range(10))

    @pytest.mark.parametrize("args", [(4, 4, 4), (4, 4, -1), (3, 4, 0), (4, 0, 0)])
    def test_invalid(self, args):
        with pytest.raises(ContractError):
            split_folds(*args)

    def test_overlap_rejected(self):
        from protoformer.data import DatasetSplit

        with pytest.raises(ContractError):
            DatasetSplit(frozenset({1, 2}), frozenset({2}), 0)


class TestManifest:
    def test_round_trip_and_comments(self, tmp_path):
        recs = [Record("a.ptns", "am.ptns", (0, 2)), Record("b.ptns", "bm.ptns", (1,))]
        write_manifest(tmp_path / "m.txt", recs)
        text = (tmp_path / "m.txt").read_text()
        assert text.startswith("#") and "a.ptns\tam.ptns\t0,2" in text
        m = read_manifest(tmp_path / "m.txt", check_files=False)
        assert m.records == recs and m.num_classes == 3

    def test_missing_file_detected(self, tmp_path):
        write_manifest(tmp_path / "m.txt", [Record("a.ptns", "am.ptns", (0,))])
        with pytest.raises((OSError, DatasetError)):
            read_manifest(tmp_path / "m.txt")


class TestEpisodes:
    def test_one_shot_two_distinct_images(self, small_dataset):
        split = split_folds(small_dataset.num_classes, 4, 0)
        ep = sample_episode(split, small_dataset, 1, SplitMix64(0))
        assert ep.shots == 1 and len(set(ep.indices)) == 2

    def test_contract(self, small_dataset):
        split = split_folds(small_dataset.num_classes, 4, 1)
        rng = SplitMix64(3)
        for train in (True, False):
            for _ in range(30):
                ep = sample_episode(split, small_dataset, 3, rng, train=train)
                pool = split.train_classes if train else split.test_classes
                assert ep.class_id in pool
                assert len(set(ep.indices)) == 4
                for i in ep.indices:
                    assert ep.class_id in small_dataset.records[i].class_ids
                    if train:
                        assert not split.test_classes & set(small_dataset.records[i].class_ids)
                for _, m in ep.supports + [(None, ep.query_mask)]:
                    assert set(np.unique(m)) <= {0.0, 1.0} and m.sum() > 0

    def test_deterministic(self, small_dataset):
        split = split_folds(small_dataset.num_classes, 4, 0)
        a, b = SplitMix64(8), SplitMix64(8)
        for _ in range(10):
            assert sample_episode(split, small_dataset, 2, a).indices == sample_episode(split, small_dataset, 2, b).indices

    def test_class_uniformity_10k(self, small_dataset):
        split = split_folds(small_dataset.num_classes, 4, 0)
        rng = SplitMix64(21)
        counts = {c: 0 for c in split.train_classes}
        for _ in range(10000):
            counts[sample_episode(split, small_dataset, 1, rng).class_id] += 1
        freqs = np.array(list(counts.values())) / 10000
        assert len(freqs) == 3 and np.all(np.abs(freqs - 1 / 3) < 0.05)
        # chi-square with 2 dof, 0.999 quantile
        chi2 = sum((n - 10000 / 3) ** 2 / (10000 / 3) for n in counts.values())
        assert chi2 < 13.82

    def test_exhausted_pool(self, small_dataset):
        split = split_folds(small_dataset.num_classes, 4, 0)
        with pytest.raises(DatasetError):
            sample_episode(split, small_dataset, 200, SplitMix64(0))


class TestSynthetic:
    def test_count(self, tmp_path):
        m = gen_synthetic_dataset(SyntheticSpec(images_per_class=50, image_size=16, area_min=0.1), tmp_path)
        assert len(m) == 200
        assert len(read_manifest(tmp_path / "manifest.txt")) == 200
        assert (tmp_path / "classes.txt").read_text().split() == ["disk", "square", "triangle", "ring"]

    def test_noise_free_masks_match_shape(self):
        spec = SyntheticSpec(classes=("disk",), noise=0.0, image_size=32)
        rng = SplitMix64(4)
        for _ in range(20):
            image, labels, present = render_sample(spec, 0, rng)
            assert present == (0,)
            fg = labels[0] == 1
            # every foreground pixel carries the class colour, every other pixel the background
            colours = image[:, fg]
            assert np.allclose(colours / colours[:, :1], 1.0, atol=1e-5)
            bg = image[:, ~fg]
            assert np.allclose(bg, bg[:, :1])

    def test_shape_support_is_what_gets_labelled(self):
        spec = SyntheticSpec(classes=("square",), noise=0.0, image_size=32, distractors=0)
        rng = SplitMix64(1)
        image, labels, _ = render_sample(spec, 0, rng)
        # re-derive the placed shape from its colour and compare with the label
        background = image[0, 0, 0]
        painted = np.any(image != background, axis=0)
        np.testing.assert_array_equal(painted, labels[0] == 1)
        assert shape_mask("square", 8, 4, 4, 2).sum() > 0

    def test_area_fraction_in_bounds(self):
        spec = SyntheticSpec(image_size=32)
        rng = SplitMix64(6)
        areas = []
        for i in range(1000):
            target = i % len(spec.classes)
            _, labels, _ = render_sample(spec, target, rng)
            areas.append((labels[0] == target + 1).mean())
        areas = np.array(areas)
        assert spec.area_min <= areas.min() and areas.max() <= spec.area_max
        assert spec.area_min <= areas.mean() <= spec.area_max

    def test_spec_parsing(self):
        spec = SyntheticSpec.from_text("classes = disk, cross\nimages_per_class = 3\nnoise = 0\n")
        assert spec.classes == ("disk", "cross") and spec.images_per_class == 3 and spec.noise == 0.0
        with pytest.raises(ConfigError):
            SyntheticSpec.from_text("colour = red\n")
        with pytest.raises(ConfigError):
            SyntheticSpec(classes=("hexagon",))

    def test_unwritable_dir(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError, match="file"):
            gen_synthetic_dataset(SyntheticSpec(images_per_class=1, image_size=16), blocker / "sub")

    def test_deterministic(self, tmp_path):
        spec = SyntheticSpec(images_per_class=2, image_size=16, area_min=0.1)
        a = gen_synthetic_dataset(spec, tmp_path / "a")
        b = gen_synthetic_dataset(spec, tmp_path / "b")
        for i in range(len(a)):
            assert all(np.array_equal(x, y) for x, y in zip(a.load(i), b.load(i)))


class TestColourJitter:
    def test_same_transform_on_every_image(self, small_dataset):
        split = split_folds(small_dataset.num_classes, 4, 0)
        ep = sample_episode(split, small_dataset, 2, SplitMix64(3))
        out = jitter_colours(ep, SplitMix64(4))
        rng = SplitMix64(4)
        perm, scale = rng.choice(3, 3), rng.uniform(3, 0.6, 1.4)
        for before, after in zip([s[0] for s in ep.supports] + [ep.query_image], [s[0] for s in out.supports] + [out.query_image]):
            want = np.clip(before[perm] * scale[:, None, None], 0, 1)
            np.testing.assert_allclose(after, want, atol=1e-6)
        assert out.query_mask is ep.query_mask and out.class_id == ep.class_id
        assert all(a[1] is b[1] for a, b in zip(out.supports, ep.supports))

    def test_unit_gain_identity_permutation_is_noop(self, small_dataset):
        split = split_folds(small_dataset.num_classes, 4, 0)
        ep = sample_episode(split, small_dataset, 1, SplitMix64(5))

        class Fixed(SplitMix64):
            def choice(self, n, k):
                return [0, 1, 2]

        out = jitter_colours(ep, Fixed(0), gain=(1.0, 1.0))
        np.testing.assert_array_equal(out.query_image, ep.query_image)
