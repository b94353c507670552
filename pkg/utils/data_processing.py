import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence

import numpy as np

from utils.errors import ValidationError, raise_if_problems
from utils.image_processing import Image, load_image, to_gray
from utils.mlp import make_rng

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".pgm", ".ppm")


@dataclass
class SamplerConfig:
    seed: int = 0
    batch_images: int = 1000
    patches_per_image: int = 1000
    minibatch_size: int = 500
    flip_probability: float = 0.0
    sequential_minibatches: bool = False
    batches: int = 1


@dataclass(eq=False)
class PatchBatch:
    values: np.ndarray       # S x (P*P*C), float32 in [0, 1]
    patch_size: int
    channels: int
    descriptors: np.ndarray  # S x 4 int64: image index, x, y, flipped


def load_corpus(path) -> List[Image]:
    """Load every image named by a manifest file, or every PGM/PPM in a directory"""
    path = Path(path)
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    else:
        lines = [line.strip() for line in path.read_text().splitlines()]
        files = [Path(line) if os.path.isabs(line) else path.parent / line for line in lines if line]
    if not files:
        raise ValidationError(f"corpus {path} names no images")
    images = [load_image(f) for f in files]
    logger.info("loaded %d images from %s", len(images), path)
    return images


def _gray_arrays(images: Sequence[Image]) -> List[np.ndarray]:
    return [to_gray(image).data[:, :, 0] for image in images]


def sample_pixel_pairs(images: Sequence[Image], count: int, seed: int) -> np.ndarray:
    """Horizontally neighbouring grayscale pixel pairs at uniform (image, x, y), scaled to [0, 1]"""
    if not images:
        raise ValidationError("pixel pair sampling needs a non-empty corpus")
    grays = _gray_arrays(images)
    if any(g.shape[1] < 2 for g in grays):
        raise ValidationError("every image needs width >= 2 for horizontal pixel pairs")
    which = make_rng(seed, "pixel_pairs").integers(len(grays), size=count)
    pairs = np.empty((count, 2), dtype=np.float32)
    for index, gray in enumerate(grays):
        rows = np.flatnonzero(which == index)
        if rows.size == 0:
            continue
        rng = make_rng(seed, "pixel_pairs", index)
        ys = rng.integers(gray.shape[0], size=rows.size)
        xs = rng.integers(gray.shape[1] - 1, size=rows.size)
        pairs[rows, 0] = gray[ys, xs] / 255.0
        pairs[rows, 1] = gray[ys, xs + 1] / 255.0
    return pairs


def validate_sampler_config(cfg: SamplerConfig) -> List[str]:
    problems = []
    for name in ("batch_images", "patches_per_image", "minibatch_size", "batches"):
        if getattr(cfg, name) < 1:
            problems.append(f"sampler {name} must be positive")
    if cfg.minibatch_size > cfg.batch_images * cfg.patches_per_image:
        problems.append("sampler minibatch_size exceeds batch_images * patches_per_image")
    if not 0.0 <= cfg.flip_probability <= 1.0:
        problems.append("sampler flip_probability must lie in [0, 1]")
    return problems


def _patch_arrays(images: Sequence[Image], patch_size: int, channels: int) -> List[np.ndarray]:
    if not images:
        raise ValidationError("patch sampling needs a non-empty corpus")
    if channels == 1:
        arrays = [to_gray(image).data for image in images]
    elif channels == 3:
        if any(image.channels != 3 for image in images):
            raise ValidationError("colour patches need RGB images")
        arrays = [image.data for image in images]
    else:
        raise ValidationError(f"channels must be 1 or 3, got {channels}")
    for index, array in enumerate(arrays):
        if array.shape[0] < patch_size or array.shape[1] < patch_size:
            raise ValidationError(f"image {index} is smaller than the {patch_size}x{patch_size} patch")
    return arrays


def extract_patches(array: np.ndarray, xs: np.ndarray, ys: np.ndarray, patch_size: int) -> np.ndarray:
    """Flattened P x P x C patches whose top-left corners are (xs, ys), scaled to [0, 1]"""
    offsets = np.arange(patch_size)
    rows = ys[:, None, None] + offsets[None, :, None]
    cols = xs[:, None, None] + offsets[None, None, :]
    return (array[rows, cols].reshape(len(xs), -1) / 255.0).astype(np.float32)


def sample_patches(images: Sequence[Image], cfg: SamplerConfig, patch_size: int, channels: int) -> Iterator[PatchBatch]:
    """
    Two-level patch stream.

    Each of `cfg.batches` batches draws `batch_images` images, flips each one
    horizontally with `flip_probability` and cuts `patches_per_image` random
    patches from it. The batch is then split into mini-batches, either in
    extraction order (sequential) or after a shuffle; a final partial
    mini-batch is dropped. Every image slot draws from its own RNG stream.
    """
    raise_if_problems(validate_sampler_config(cfg))
    arrays = _patch_arrays(images, patch_size, channels)
    for batch_index in range(cfg.batches):
        rng = make_rng(cfg.seed, "batch", batch_index)
        chosen = rng.choice(len(arrays), size=cfg.batch_images, replace=cfg.batch_images > len(arrays))
        values, descriptors = [], []
        for slot, image_index in enumerate(chosen):
            slot_rng = make_rng(cfg.seed, "batch", batch_index, "slot", slot)
            array = arrays[image_index]
            flipped = bool(slot_rng.random() < cfg.flip_probability)
            if flipped:
                array = array[:, ::-1]
            ys = slot_rng.integers(array.shape[0] - patch_size + 1, size=cfg.patches_per_image)
            xs = slot_rng.integers(array.shape[1] - patch_size + 1, size=cfg.patches_per_image)
            values.append(extract_patches(array, xs, ys, patch_size))
            descriptors.append(np.column_stack([
                np.full(cfg.patches_per_image, image_index), xs, ys,
                np.full(cfg.patches_per_image, int(flipped)),
            ]))
        values = np.concatenate(values)
        descriptors = np.concatenate(descriptors).astype(np.int64)

        order = np.arange(len(values)) if cfg.sequential_minibatches else rng.permutation(len(values))
        for start in range(0, len(order) - cfg.minibatch_size + 1, cfg.minibatch_size):
            picked = order[start:start + cfg.minibatch_size]
            yield PatchBatch(values[picked], patch_size, channels, descriptors[picked])


def random_patches(images: Sequence[Image], count: int, seed: int, patch_size: int, channels: int) -> PatchBatch:
    """Flat draw of `count` unflipped patches at uniform (image, x, y)"""
    arrays = _patch_arrays(images, patch_size, channels)
    which = make_rng(seed, "random_patches").integers(len(arrays), size=count)
    values = np.empty((count, patch_size * patch_size * channels), dtype=np.float32)
    descriptors = np.zeros((count, 4), dtype=np.int64)
    for index, array in enumerate(arrays):
        rows = np.flatnonzero(which == index)
        if rows.size == 0:
            continue
        rng = make_rng(seed, "random_patches", index)
        ys = rng.integers(array.shape[0] - patch_size + 1, size=rows.size)
        xs = rng.integers(array.shape[1] - patch_size + 1, size=rows.size)
        values[rows] = extract_patches(array, xs, ys, patch_size)
        descriptors[rows, 0], descriptors[rows, 1], descriptors[rows, 2] = index, xs, ys
    return PatchBatch(values, patch_size, channels, descriptors)


def synth_gaussian_2d(count: int, mean, cov, seed: int) -> np.ndarray:
    """Unclamped 2D normal samples via a Cholesky factor of `cov`"""
    cov = np.asarray(cov, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    if cov.shape != (2, 2) or mean.shape != (2,):
        raise ValidationError("synthetic Gaussian needs a 2-vector mean and a 2x2 covariance")
    if not np.allclose(cov, cov.T):
        raise ValidationError("covariance must be symmetric")
    try:
        factor = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ValidationError("covariance must be positive definite")
    normals = make_rng(seed, "gaussian_2d").standard_normal((count, 2))
    return normals @ factor.T + mean


def synth_two_pixel_pairs(count: int, seed: int, std: float = 0.2, correlation: float = 0.9) -> np.ndarray:
    """Correlated Gaussian pixel pairs around mid-gray, clamped to [0, 1]"""
    cov = std * std * np.array([[1.0, correlation], [correlation, 1.0]])
    pairs = synth_gaussian_2d(count, [0.5, 0.5], cov, seed)
    return np.clip(pairs, 0.0, 1.0).astype(np.float32)


def natural_pixel_pairs(images: Optional[Sequence[Image]], count: int, seed: int,
                        std: float = 0.2, correlation: float = 0.9) -> np.ndarray:
    """Natural pixel pairs when a corpus is given, synthetic correlated pairs otherwise"""
    if images:
        return sample_pixel_pairs(images, count, seed)
    return synth_two_pixel_pairs(count, seed, std, correlation)
