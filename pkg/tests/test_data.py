import numpy as np
import pytest
from scipy import ndimage

from dynunet.data import class_intensities, generate_synthetic_sample, make_dataset, stack_batch


class TestSynthetic:
    def test_deterministic(self):
        a, b = generate_synthetic_sample(7), generate_synthetic_sample(7)
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.labels, b.labels)
        assert a.meta == b.meta

    def test_seeds_differ(self):
        assert not np.array_equal(generate_synthetic_sample(1).labels, generate_synthetic_sample(2).labels)

    def test_ranges_and_shapes(self):
        s = generate_synthetic_sample(3, 32, 48, 4)
        assert s.image.shape == (1, 32, 48) and s.labels.shape == (32, 48)
        assert s.image.min() >= 0 and s.image.max() <= 1
        assert s.labels.min() >= 0 and s.labels.max() < 4

    def test_every_class_present(self):
        hits = sum(np.unique(generate_synthetic_sample(seed).labels).size == 6 for seed in range(1000))
        assert hits >= 990

    def test_binary_blob_connected(self):
        for seed in range(200):
            s = generate_synthetic_sample(seed, 64, 64, 2)
            _, count = ndimage.label(s.labels == 1)
            assert count == 1, seed

    def test_intensity_tracks_class(self):
        s = generate_synthetic_sample(0)
        means = [s.image[0][s.labels == k].mean() for k in range(6)]
        np.testing.assert_allclose(means, class_intensities(6), atol=0.03)

    @pytest.mark.parametrize("shape", [(8, 64), (64, 15)])
    def test_small_extents_rejected(self, shape):
        with pytest.raises(ValueError, match="extents"):
            generate_synthetic_sample(0, *shape)

    def test_class_count_rejected(self):
        with pytest.raises(ValueError):
            generate_synthetic_sample(0, num_classes=1)


class TestDataset:
    def test_make_dataset(self):
        a, b = make_dataset(2, 3, 32, 32, 3), make_dataset(2, 3, 32, 32, 3)
        assert len(a) == 3
        assert all(np.array_equal(x.labels, y.labels) for x, y in zip(a, b))

    def test_stack(self):
        images, labels = stack_batch(make_dataset(0, 2, 16, 16, 3))
        assert images.shape == (2, 1, 16, 16) and images.dtype == np.float32
        assert labels.shape == (2, 16, 16)
