import sys
import os

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))
import numpy as np
import pytest
from utils import data_processing
from utils.errors import ValidationError
from utils.image_processing import Image, save_image


def _image(array):
    return Image.from_array(np.asarray(array, dtype=np.uint8))


def _ramp(width=16, height=12, channels=1):
    columns = np.tile(np.arange(width) * 10, (height, 1))
    if channels == 3:
        columns = np.stack([columns, columns // 2, 255 - columns], axis=2)
    return _image(columns)


def test_pixel_pairs_from_constant_image():
    pairs = data_processing.sample_pixel_pairs([_image(np.full((8, 8), 128))], 100, seed=0)
    assert pairs.shape == (100, 2)
    assert np.all(pairs == np.float32(128 / 255))


def test_pixel_pairs_are_horizontal_neighbours():
    pairs = data_processing.sample_pixel_pairs([_ramp()], 500, seed=1)
    assert np.allclose(pairs[:, 1] - pairs[:, 0], 10 / 255, atol=1e-6)


def test_pixel_pairs_deterministic():
    images = [_ramp(), _ramp(width=9)]
    a = data_processing.sample_pixel_pairs(images, 200, seed=4)
    b = data_processing.sample_pixel_pairs(images, 200, seed=4)
    c = data_processing.sample_pixel_pairs(images, 200, seed=5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_pixel_pairs_validation():
    with pytest.raises(ValidationError):
        data_processing.sample_pixel_pairs([], 10, seed=0)
    with pytest.raises(ValidationError):
        data_processing.sample_pixel_pairs([_image(np.zeros((5, 1)))], 10, seed=0)


def test_sequential_minibatches_stay_within_one_image():
    cfg = data_processing.SamplerConfig(seed=3, batch_images=2, patches_per_image=3, minibatch_size=3,
                                        sequential_minibatches=True)
    batches = list(data_processing.sample_patches([_ramp(), _ramp(width=20)], cfg, patch_size=4, channels=1))
    assert len(batches) == 2
    for batch in batches:
        assert batch.values.shape == (3, 16)
        assert len(set(batch.descriptors[:, 0].tolist())) == 1


def test_partial_minibatch_dropped():
    cfg = data_processing.SamplerConfig(batch_images=2, patches_per_image=5, minibatch_size=4, batches=2)
    batches = list(data_processing.sample_patches([_ramp()], cfg, patch_size=3, channels=1))
    assert len(batches) == 4


def test_patches_deterministic():
    cfg = data_processing.SamplerConfig(seed=9, batch_images=3, patches_per_image=4, minibatch_size=6)
    a = [b.values for b in data_processing.sample_patches([_ramp(), _ramp(width=30)], cfg, 4, 1)]
    b = [b.values for b in data_processing.sample_patches([_ramp(), _ramp(width=30)], cfg, 4, 1)]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


@pytest.mark.parametrize("probability, flipped", [(0.0, 0), (1.0, 1)])
def test_flip_probability_extremes(probability, flipped):
    cfg = data_processing.SamplerConfig(batch_images=4, patches_per_image=2, minibatch_size=8,
                                        flip_probability=probability)
    batch = next(data_processing.sample_patches([_ramp()], cfg, patch_size=2, channels=1))
    assert np.all(batch.descriptors[:, 3] == flipped)
    # ramp increases to the right, so flipped patches decrease
    left, right = batch.values[:, 0], batch.values[:, 1]
    assert np.all((right < left) if flipped else (right > left))


def test_patch_values_match_source():
    image = _ramp(channels=3)
    batch = data_processing.random_patches([image], 50, seed=2, patch_size=3, channels=3)
    assert batch.values.shape == (50, 27)
    assert batch.values.min() >= 0.0 and batch.values.max() <= 1.0
    _, x, y, _ = batch.descriptors[7]
    expected = image.data[y:y + 3, x:x + 3].reshape(-1) / 255.0
    assert np.allclose(batch.values[7], expected)


def test_patch_bounds():
    batch = data_processing.random_patches([_ramp(width=6, height=5)], 400, seed=0, patch_size=4, channels=1)
    assert batch.descriptors[:, 1].max() <= 2
    assert batch.descriptors[:, 2].max() <= 1
    assert batch.descriptors[:, 1].min() >= 0


def test_patch_validation():
    with pytest.raises(ValidationError):
        data_processing.random_patches([_ramp(width=3, height=3)], 5, seed=0, patch_size=4, channels=1)
    with pytest.raises(ValidationError):
        data_processing.random_patches([_ramp()], 5, seed=0, patch_size=4, channels=3)
    with pytest.raises(ValidationError):
        data_processing.random_patches([], 5, seed=0, patch_size=4, channels=1)
    bad = data_processing.SamplerConfig(batch_images=1, patches_per_image=2, minibatch_size=3)
    assert data_processing.validate_sampler_config(bad) != []
    with pytest.raises(ValidationError):
        next(data_processing.sample_patches([_ramp()], bad, 4, 1))


def test_gaussian_moments():
    mean, cov = [0.5, -1.0], [[1.0, 0.6], [0.6, 2.0]]
    samples = data_processing.synth_gaussian_2d(1_000_000, mean, cov, seed=11)
    assert np.allclose(samples.mean(axis=0), mean, atol=0.005)
    assert np.allclose(np.cov(samples.T), cov, atol=0.01)


def test_gaussian_rejects_indefinite_covariance():
    with pytest.raises(ValidationError):
        data_processing.synth_gaussian_2d(10, [0, 0], [[1.0, 2.0], [2.0, 1.0]], seed=0)
    with pytest.raises(ValidationError):
        data_processing.synth_gaussian_2d(10, [0, 0], [[1.0, 0.1], [0.0, 1.0]], seed=0)


def test_synthetic_pairs_are_correlated_and_clamped():
    pairs = data_processing.synth_two_pixel_pairs(20_000, seed=1)
    assert pairs.min() >= 0.0 and pairs.max() <= 1.0
    assert np.corrcoef(pairs.T)[0, 1] > 0.5
    assert data_processing.natural_pixel_pairs(None, 10, seed=1).shape == (10, 2)


def test_load_corpus_directory_and_manifest(tmp_path):
    save_image(_ramp(), tmp_path / "b.pgm")
    save_image(_ramp(channels=3), tmp_path / "a.ppm")
    (tmp_path / "notes.txt").write_text("not an image")
    images = data_processing.load_corpus(tmp_path)
    assert [image.channels for image in images] == [3, 1]

    manifest = tmp_path / "list.txt"
    manifest.write_text("b.pgm\n\n")
    assert len(data_processing.load_corpus(manifest)) == 1


def test_load_corpus_empty(tmp_path):
    with pytest.raises(ValidationError):
        data_processing.load_corpus(tmp_path)
