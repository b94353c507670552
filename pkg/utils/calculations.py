"""
Measurements on trained models: output statistics, partition label grids,
factorial-code diagnostics, binary codes and Hamming search, feature maps,
probe responses, code-space occupancy and patch decoding.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import comb
from sklearn.metrics import mutual_info_score

from utils.errors import ValidationError
from utils.image_processing import Image, to_gray
from utils.information import entropy, make_distribution
from utils.mlp import MlpModel, forward, make_rng

logger = logging.getLogger(__name__)

HISTOGRAM_BINS = 64
NEAR_BINARY = 0.05
EVAL_CHUNK = 65536
MAX_CODE_BITS = 128
PROBE_ACTIVE_FRACTION = 0.01
PROBE_SEGMENT_FRACTION = 0.02


@dataclass(eq=False)
class BinaryCodeSet:
    code_bits: int
    codes: np.ndarray   # distinct codes, n x ceil(D/8) uint8, first-appearance order
    counts: np.ndarray  # samples per code

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def as_dict(self) -> Dict[bytes, int]:
        return {code.tobytes(): int(count) for code, count in zip(self.codes, self.counts)}


@dataclass(eq=False)
class OutputStats:
    histogram_counts: np.ndarray
    histogram_edges: np.ndarray
    activation_prob: np.ndarray
    mean_active: float
    near_binary_fraction: float
    code_proportions: np.ndarray
    active_count_histogram: np.ndarray


@dataclass(eq=False)
class LabelGrid:
    resolution: int
    labels: np.ndarray  # R x R x D, indexed [y, x, dim]


@dataclass(frozen=True)
class IndependenceReport:
    tv_distance: float
    marginal_dev: float
    mutual_information: float


@dataclass(eq=False)
class StateReport:
    q: np.ndarray
    entropy: float
    min_mass: float
    max_mass: float


@dataclass(eq=False)
class FeatureMapSet:
    maps: np.ndarray  # nodes x (H-P+1) x (W-P+1), raw outputs
    patch_size: int


@dataclass(eq=False)
class ProbeResponse:
    intervals: List[List[Tuple[int, int]]]
    activated: np.ndarray
    single_segment: np.ndarray
    multi_segment: np.ndarray
    single_inhibited: np.ndarray
    columns: int

    def summary(self) -> Dict[str, float]:
        return {
            "activated_fraction": float(self.activated.mean()),
            "single_segment_fraction": float(self.single_segment.mean()),
            "multi_segment_fraction": float(self.multi_segment.mean()),
            "single_inhibited_fraction": float(self.single_inhibited.mean()),
        }


@dataclass(eq=False)
class OccupancyCurves:
    anchors: np.ndarray     # indices into the distinct codes
    counts: np.ndarray      # anchors x (D+1), samples at exactly distance d
    cumulative: np.ndarray  # anchors x (D+1), samples within distance d
    rates: np.ndarray       # counts / C(D, d)


def model_outputs(models: Sequence[MlpModel], inputs: np.ndarray, max_workers: Optional[int] = None) -> np.ndarray:
    """Concatenated outputs of every model on `inputs`, evaluated in row chunks"""
    inputs = np.asarray(inputs)
    chunks = []
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        for start in range(0, max(len(inputs), 1), EVAL_CHUNK):
            rows = inputs[start:start + EVAL_CHUNK]
            chunks.append(np.hstack(list(pool.map(lambda model: forward(model, rows), models))))
    return np.vstack(chunks)


def binarize(outputs: np.ndarray) -> np.ndarray:
    """Round at 0.5; an output of exactly 0.5 becomes 1"""
    return (np.asarray(outputs) >= 0.5).astype(np.uint8)


def pack_codes(bits: np.ndarray) -> np.ndarray:
    """Bit 0 of byte 0 holds node 0"""
    return np.packbits(np.asarray(bits, dtype=np.uint8), axis=1, bitorder="little")


def unpack_codes(packed: np.ndarray, code_bits: int) -> np.ndarray:
    return np.unpackbits(np.asarray(packed, dtype=np.uint8), axis=1, count=code_bits, bitorder="little")


def _distinct_rows(packed: np.ndarray):
    """Distinct rows in first-appearance order with per-row inverse indices and counts"""
    unique, first, inverse, counts = np.unique(
        packed, axis=0, return_index=True, return_inverse=True, return_counts=True
    )
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    return unique[order], rank[inverse.reshape(-1)], counts[order]


def empirical_output_stats(models: Sequence[MlpModel], samples: np.ndarray,
                           max_workers: Optional[int] = None) -> OutputStats:
    outputs = model_outputs(models, samples, max_workers).astype(np.float64)
    counts, edges = np.histogram(outputs, bins=HISTOGRAM_BINS, range=(0.0, 1.0))
    bits = binarize(outputs)
    active = bits.sum(axis=1)
    _, _, code_counts = _distinct_rows(pack_codes(bits))
    near = np.minimum(np.abs(outputs), np.abs(1.0 - outputs)) <= NEAR_BINARY
    logger.debug("output statistics over %d samples and %d nodes", *outputs.shape)
    return OutputStats(
        histogram_counts=counts,
        histogram_edges=edges,
        activation_prob=bits.mean(axis=0),
        mean_active=float(active.mean()),
        near_binary_fraction=float(near.mean()),
        code_proportions=np.sort(code_counts)[::-1] / outputs.shape[0],
        active_count_histogram=np.bincount(active, minlength=outputs.shape[1] + 1),
    )


def label_grid(models: Sequence[MlpModel], resolution: int) -> LabelGrid:
    """
    Argmax state of every two-pixel model on an R x R grid over [0, 1]^2.

    Grid point (x, y) feeds the input (x_a, x_b) = (x/(R-1), y/(R-1)); each
    model is one output dimension. Ties go to the lowest state index.
    """
    if resolution < 2:
        raise ValidationError("label grid resolution must be at least 2")
    if any(model.input_dim != 2 for model in models):
        raise ValidationError("label grids need two-pixel models")
    axis = np.linspace(0.0, 1.0, resolution)
    xa, xb = np.meshgrid(axis, axis)
    points = np.column_stack([xa.ravel(), xb.ravel()])
    labels = [np.argmax(forward(model, points), axis=1) for model in models]
    return LabelGrid(resolution, np.stack(labels, axis=1).reshape(resolution, resolution, len(models)))


def independence_from_labels(labels_a, labels_b, n_a: int, n_b: int) -> IndependenceReport:
    """
    Factorial-code diagnostics for two label streams.

    tv_distance is the total-variation distance between the joint label table
    and the product of its marginals; marginal_dev is the largest relative
    deviation of a marginal mass from uniform.
    """
    labels_a = np.asarray(labels_a, dtype=np.int64)
    labels_b = np.asarray(labels_b, dtype=np.int64)
    if labels_a.shape != labels_b.shape or labels_a.size == 0:
        raise ValidationError("label streams must be non-empty and of equal length")
    if labels_a.min() < 0 or labels_a.max() >= n_a or labels_b.min() < 0 or labels_b.max() >= n_b:
        raise ValidationError("labels fall outside the declared state counts")
    joint = np.bincount(labels_a * n_b + labels_b, minlength=n_a * n_b).reshape(n_a, n_b) / labels_a.size
    margin_a, margin_b = joint.sum(axis=1), joint.sum(axis=0)
    tv = 0.5 * float(np.abs(joint - np.outer(margin_a, margin_b)).sum())
    dev = max(float(np.abs(margin_a * n_a - 1.0).max()), float(np.abs(margin_b * n_b - 1.0).max()))
    return IndependenceReport(tv, dev, float(mutual_info_score(labels_a, labels_b)))


def empirical_joint_independence(models: Sequence[MlpModel], samples: np.ndarray) -> IndependenceReport:
    if len(models) != 2:
        raise ValidationError(f"joint independence needs exactly two output dimensions, got {len(models)}")
    labels = [np.argmax(model_outputs([model], samples), axis=1) for model in models]
    logger.debug("joint label table over %d samples", len(samples))
    return independence_from_labels(labels[0], labels[1], models[0].output_dim, models[1].output_dim)


def output_state_distribution(model: MlpModel, samples: np.ndarray) -> StateReport:
    """Empirical Q over argmax states of one softmax model"""
    labels = np.argmax(model_outputs([model], samples), axis=1)
    q = np.bincount(labels, minlength=model.output_dim) / labels.size
    return StateReport(q, entropy(make_distribution(q, normalize=True)), float(q.min()), float(q.max()))


def encode_corpus(models: Sequence[MlpModel], patches: np.ndarray,
                  max_workers: Optional[int] = None) -> Tuple[BinaryCodeSet, np.ndarray]:
    """Binary code of every patch plus the set of distinct codes with their counts"""
    outputs = model_outputs(models, patches, max_workers)
    if outputs.shape[1] > MAX_CODE_BITS:
        raise ValidationError(f"codes are limited to {MAX_CODE_BITS} bits, got {outputs.shape[1]}")
    packed = pack_codes(binarize(outputs))
    distinct, _, counts = _distinct_rows(packed)
    return BinaryCodeSet(outputs.shape[1], distinct, counts.astype(np.int64)), packed


def hamming_distances(codes: np.ndarray, query: np.ndarray) -> np.ndarray:
    return np.bitwise_count(np.bitwise_xor(codes, query[None, :])).sum(axis=1, dtype=np.int64)


def knn_hamming(codes: np.ndarray, query: np.ndarray, k: int) -> List[Tuple[int, int]]:
    """k nearest codes as (index, distance); equal distances keep index order"""
    codes = np.asarray(codes, dtype=np.uint8)
    if k < 1 or k > len(codes):
        raise ValidationError(f"k={k} must be between 1 and the {len(codes)} stored codes")
    distances = hamming_distances(codes, np.asarray(query, dtype=np.uint8))
    order = np.argsort(distances, kind="stable")[:k]
    return [(int(i), int(distances[i])) for i in order]


def similar_patches(patch_codes: np.ndarray, query_index: int, k: int) -> List[Tuple[int, int]]:
    """Nearest patches to patch `query_index` by code distance, the query itself excluded"""
    if not 0 <= query_index < len(patch_codes):
        raise ValidationError(f"query index {query_index} outside 0..{len(patch_codes) - 1}")
    others = np.delete(np.arange(len(patch_codes)), query_index)
    ranked = knn_hamming(patch_codes[others], patch_codes[query_index], k)
    return [(int(others[i]), d) for i, d in ranked]


def _input_channels(models: Sequence[MlpModel], patch_size: int) -> int:
    dims = {model.input_dim for model in models}
    if len(dims) != 1:
        raise ValidationError("all models must share one input dimension")
    channels, rest = divmod(dims.pop(), patch_size * patch_size)
    if rest or channels not in (1, 3):
        raise ValidationError(f"model input does not match {patch_size}x{patch_size} patches")
    return channels


def _pixels(image: Image, channels: int) -> np.ndarray:
    if channels == 1:
        return to_gray(image).data
    if image.channels != 3:
        raise ValidationError("colour models need an RGB image")
    return image.data


def feature_maps(models: Sequence[MlpModel], image: Image, patch_size: int,
                 max_workers: Optional[int] = None) -> FeatureMapSet:
    """Slide the patch models over `image` at stride 1 and keep the raw outputs per node"""
    channels = _input_channels(models, patch_size)
    if image.width < patch_size or image.height < patch_size:
        raise ValidationError(f"image {image.width}x{image.height} is smaller than the patch")
    windows = sliding_window_view(_pixels(image, channels), (patch_size, patch_size), axis=(0, 1))
    rows, cols = windows.shape[:2]
    patches = windows.transpose(0, 1, 3, 4, 2).reshape(rows * cols, -1)
    outputs = model_outputs(models, (patches / 255.0).astype(np.float32), max_workers)
    return FeatureMapSet(outputs.T.reshape(-1, rows, cols), patch_size)


def _runs(mask: np.ndarray) -> List[Tuple[int, int]]:
    """Maximal True runs as inclusive (start, end) column pairs"""
    padded = np.concatenate([[False], mask, [False]])
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    return [(int(s), int(e) - 1) for s, e in zip(edges[0::2], edges[1::2])]


def _close_gaps(mask: np.ndarray) -> np.ndarray:
    closed = mask.copy()
    closed[1:-1] |= mask[:-2] & mask[2:]
    return closed


def probe_response(models: Sequence[MlpModel], probe: Image, patch_size: int,
                   max_workers: Optional[int] = None) -> ProbeResponse:
    """
    Activation intervals of every node along a column-varying probe image.

    A column is active when the rounded output is 1 on at least half of the
    map rows. Activation gaps of one column are closed; segments shorter than
    2% of the columns are discarded; a node counts as activated when at least
    1% of its columns are active. A node whose inactive columns form one
    segment touching neither edge is reported as single-segment inhibited.
    """
    maps = feature_maps(models, probe, patch_size, max_workers).maps
    columns = maps.shape[2]
    min_active = max(1, int(np.ceil(PROBE_ACTIVE_FRACTION * columns)))
    min_segment = max(1, int(np.ceil(PROBE_SEGMENT_FRACTION * columns)))

    intervals, activated, single, multi, inhibited = [], [], [], [], []
    for node_map in maps:
        active = binarize(node_map).mean(axis=0) >= 0.5
        closed = _close_gaps(active)
        segments = [(s, e) for s, e in _runs(closed) if e - s + 1 >= min_segment]
        gaps = [(s, e) for s, e in _runs(~closed) if e - s + 1 >= min_segment]
        is_active = int(active.sum()) >= min_active
        intervals.append(segments)
        activated.append(is_active)
        single.append(is_active and len(segments) == 1)
        multi.append(is_active and len(segments) > 1)
        inhibited.append(len(gaps) == 1 and gaps[0][0] > 0 and gaps[0][1] < columns - 1)
    return ProbeResponse(intervals, np.array(activated), np.array(single), np.array(multi),
                         np.array(inhibited), columns)


def occupancy_stats(codes: BinaryCodeSet, anchors: int, seed: int) -> OccupancyCurves:
    """Samples at each Hamming distance from random occupied anchor codes, and per-site rates"""
    distinct = len(codes.counts)
    if not 1 <= anchors <= distinct:
        raise ValidationError(f"anchors={anchors} must be between 1 and the {distinct} distinct codes")
    picks = make_rng(seed, "occupancy").choice(distinct, size=anchors, replace=False)
    D = codes.code_bits
    counts = np.empty((anchors, D + 1), dtype=np.int64)
    for row, anchor in enumerate(picks):
        distances = hamming_distances(codes.codes, codes.codes[anchor])
        counts[row] = np.bincount(distances, weights=codes.counts, minlength=D + 1).astype(np.int64)
    sites = comb(D, np.arange(D + 1))
    return OccupancyCurves(picks, counts, np.cumsum(counts, axis=1), counts / sites)


def tile_patches(image: Image, patch_size: int, channels: int) -> np.ndarray:
    """Non-overlapping tiles in row-major tile order, flattened and scaled to [0, 1]"""
    if image.width % patch_size or image.height % patch_size:
        raise ValidationError(f"image {image.width}x{image.height} is not divisible into {patch_size}-pixel tiles")
    pixels = _pixels(image, channels)
    rows, cols = image.height // patch_size, image.width // patch_size
    tiles = pixels.reshape(rows, patch_size, cols, patch_size, channels).transpose(0, 2, 1, 3, 4)
    return (tiles.reshape(rows * cols, -1) / 255.0).astype(np.float32)


def code_features(models: Sequence[MlpModel], patches: np.ndarray, max_workers: Optional[int] = None) -> np.ndarray:
    """Rounded codes as 0/1 float rows, the decoder's input"""
    return binarize(model_outputs(models, patches, max_workers)).astype(np.float32)


def decoder_table(models: Sequence[MlpModel], patches: np.ndarray,
                  max_workers: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Distinct codes as decoder inputs, each paired with the mean of the patches that produced it"""
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 2 or len(patches) == 0:
        raise ValidationError("decoder table is empty")
    features = code_features(models, patches, max_workers)
    distinct, inverse, counts = _distinct_rows(pack_codes(features.astype(np.uint8)))
    sums = np.zeros((len(distinct), patches.shape[1]))
    np.add.at(sums, inverse, patches)
    inputs = unpack_codes(distinct, features.shape[1]).astype(np.float32)
    return inputs, (sums / counts[:, None]).astype(np.float32)


def decode_image(encoders: Sequence[MlpModel], decoder: MlpModel, image: Image, patch_size: int,
                 max_workers: Optional[int] = None) -> Image:
    """Encode, round and decode every tile of `image`, then reassemble the tiles"""
    channels = _input_channels(encoders, patch_size)
    if decoder.output_dim != patch_size * patch_size * channels:
        raise ValidationError("decoder output does not match the patch size")
    tiles = tile_patches(image, patch_size, channels)
    decoded = forward(decoder, code_features(encoders, tiles, max_workers)).astype(np.float64)
    pixels = np.clip(np.floor(255.0 * decoded + 0.5), 0, 255).astype(np.uint8)
    rows, cols = image.height // patch_size, image.width // patch_size
    canvas = pixels.reshape(rows, cols, patch_size, patch_size, channels).transpose(0, 2, 1, 3, 4)
    return Image.from_array(canvas.reshape(image.height, image.width, channels))
