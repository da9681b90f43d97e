import numpy as np
import pytest

from weaktr.synthetic import (DataConfig, generate_sample, generate_split, load_dataset,
                              save_dataset, split_seed, stack_split)


@pytest.fixture(scope="module")
def thousand():
    return generate_split("property", 1000, 11, DataConfig())


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(num_classes=5), dict(shapes_per_image=(2, 1)),
                                    dict(num_classes=2, shapes_per_image=(1, 3)),
                                    dict(scale_range=(0.0, 0.3))])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            DataConfig(**kw)


class TestGenerateSample:
    def test_same_seed_bit_identical(self):
        cfg = DataConfig()
        a, b = generate_sample(1234, cfg), generate_sample(1234, cfg)
        assert a.image.tobytes() == b.image.tobytes()
        assert a.gt_mask.tobytes() == b.gt_mask.tobytes()
        assert a.label.tobytes() == b.label.tobytes()

    def test_different_seeds_differ(self):
        cfg = DataConfig()
        assert generate_sample(1, cfg).image.tobytes() != generate_sample(2, cfg).image.tobytes()

    def test_degenerate_config(self):
        s = generate_sample(5, DataConfig(shapes_per_image=(0, 0), noise_std=0.0))
        assert not s.label.any()
        assert not s.gt_mask.any()
        # a smooth ramp: no pixel-level noise, neighbouring pixels differ little
        assert np.abs(np.diff(s.image, axis=0)).max() < 0.02

    def test_ranges_and_types(self):
        s = generate_sample(7, DataConfig())
        assert s.image.shape == (64, 64, 3) and s.image.dtype == np.float32
        assert s.image.min() >= 0 and s.image.max() <= 1
        assert s.gt_mask.dtype == np.uint8 and s.gt_mask.max() <= 4


class TestProperties:
    def test_label_mask_consistency(self, thousand):
        for s in thousand:
            present = set(np.unique(s.gt_mask)) - {0}
            assert present == {c + 1 for c in np.flatnonzero(s.label)}

    def test_coverage_bounds(self, thousand):
        for s in thousand:
            for c in np.flatnonzero(s.label):
                frac = np.mean(s.gt_mask == c + 1)
                assert 0.01 <= frac <= 0.40

    def test_class_frequency_near_uniform(self, thousand):
        labels = np.stack([s.label for s in thousand])
        freq = labels.mean(axis=0)
        expected = freq.mean()
        assert np.all(np.abs(freq - expected) <= 0.2 * expected)

    def test_shape_count_range(self, thousand):
        counts = np.array([s.label.sum() for s in thousand])
        assert counts.min() >= 1 and counts.max() <= 3


class TestSplits:
    def test_empty(self):
        assert generate_split("train", 0, 0, DataConfig()) == []

    def test_deterministic(self):
        cfg = DataConfig()
        a = stack_split(generate_split("train", 5, 3, cfg))
        b = stack_split(generate_split("train", 5, 3, cfg))
        for x, y in zip(a, b):
            assert x.tobytes() == y.tobytes()

    def test_train_val_disjoint(self):
        cfg = DataConfig()
        train = {s.image.tobytes() for s in generate_split("train", 200, 0, cfg)}
        val = {s.image.tobytes() for s in generate_split("val", 100, 0, cfg)}
        assert not train & val

    def test_seed_depends_on_every_key(self):
        base = split_seed(0, "train", 0)
        assert len({base, split_seed(1, "train", 0), split_seed(0, "val", 0), split_seed(0, "train", 1)}) == 4

    def test_order_free(self):
        cfg = DataConfig()
        whole = generate_split("train", 4, 9, cfg)
        single = generate_sample(split_seed(9, "train", 3), cfg)
        assert whole[3].image.tobytes() == single.image.tobytes()


def test_dataset_round_trip(tmp_path):
    cfg = DataConfig(image_size=32, scale_range=(0.3, 0.5))
    samples = generate_split("train", 4, 1, cfg)
    save_dataset(tmp_path / "ds", samples, cfg)
    assert (tmp_path / "ds" / "images" / "0003.wtt").exists()
    back, cfg2 = load_dataset(tmp_path / "ds")
    assert cfg2 == cfg
    for a, b in zip(samples, back):
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.gt_mask, b.gt_mask)
        np.testing.assert_array_equal(a.label, b.label)
        assert a.seed == b.seed
