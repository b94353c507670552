"""
Even-coding objectives and their exact gradients with respect to model outputs.

Every loss returns (loss, grad) where grad has the shape of the outputs it was
given. Arithmetic is 64-bit regardless of the output dtype.
"""

import logging
from dataclasses import dataclass
from itertools import combinations
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import pdist, squareform
from scipy.special import xlogy

from utils.errors import ValidationError

logger = logging.getLogger(__name__)

ROW_SUM_TOLERANCE = 1e-5
RANGE_TOLERANCE = 1e-6
REPEL_MODES = ("sample_wise", "node_wise")
PAIR_BLOCK = 64


@dataclass(frozen=True)
class OodLossConfig:
    k: float = 2.0 / 3.0


@dataclass(frozen=True)
class RepelLossConfig:
    alpha: float = 0.05
    epsilon: float = 1e-38
    mode: str = "sample_wise"


def loss_config_from_dict(section: Dict):
    """Build a loss config from its JSON fragment, e.g. {"loss": "ood", "k": 0.6667}"""
    section = dict(section)
    kind = section.pop("loss", None)
    if kind in ("ood", "miod"):
        unknown = set(section) - {"k"}
        if unknown:
            raise ValidationError(f"unknown {kind} loss keys: {sorted(unknown)}")
        cfg = OodLossConfig(**section)
        if cfg.k < 0:
            raise ValidationError("k must be non-negative")
        return kind, cfg
    if kind == "repel":
        unknown = set(section) - {"alpha", "epsilon", "mode"}
        if unknown:
            raise ValidationError(f"unknown repel loss keys: {sorted(unknown)}")
        cfg = RepelLossConfig(**section)
        if cfg.alpha < 0 or cfg.epsilon < 0:
            raise ValidationError("alpha and epsilon must be non-negative")
        if cfg.mode not in REPEL_MODES:
            raise ValidationError(f"repel mode must be one of {REPEL_MODES}")
        return kind, cfg
    if kind == "mse":
        if section:
            raise ValidationError(f"unknown mse loss keys: {sorted(section)}")
        return kind, None
    raise ValidationError(f"unknown loss {kind!r}; expected ood, miod, repel or mse")


def _neg_entropy_terms(values: np.ndarray) -> np.ndarray:
    """Elementwise y log y and its derivative log y + 1, both 0 where y == 0"""
    with np.errstate(divide="ignore"):
        derivative = np.where(values > 0, np.log(np.where(values > 0, values, 1.0)) + 1.0, 0.0)
    return xlogy(values, values), derivative


def _check_softmax_rows(values: np.ndarray, label: str):
    if values.ndim != 2:
        raise ValidationError(f"{label} must be a 2D samples x states matrix")
    if np.any(np.abs(values.sum(axis=1) - 1.0) > ROW_SUM_TOLERANCE) or np.any(values < 0):
        raise ValidationError(f"{label} rows are not normalised probability vectors")


def e_ood(batch: np.ndarray, cfg: OodLossConfig, validate: bool = True) -> Tuple[float, np.ndarray]:
    """
    Single output dimension loss:
    sum_j m_j log m_j + k * mean_s(-sum_j y_sj log y_sj), with m_j the batch mean.
    """
    y = np.asarray(batch, dtype=np.float64)
    if validate:
        _check_softmax_rows(y, "E_OOD batch")
    if y.ndim != 2 or y.shape[0] < 2:
        raise ValidationError("E_OOD needs at least two samples")
    S = y.shape[0]
    mean = y.mean(axis=0)
    mean_terms, mean_derivative = _neg_entropy_terms(mean)
    sample_terms, sample_derivative = _neg_entropy_terms(y)

    loss = float(mean_terms.sum() - cfg.k * sample_terms.sum(axis=1).mean())
    grad = (mean_derivative[None, :] - cfg.k * sample_derivative) / S
    return loss, grad


def e_miod(batch: Sequence[np.ndarray], cfg: OodLossConfig, validate: bool = True) -> Tuple[float, List[np.ndarray]]:
    """
    Multiple independent output dimensions.

    `batch` holds one S x N_d softmax matrix per dimension. The first term
    averages the joint negative entropy over every pair of dimensions, the
    second is k/D times the mean per-sample entropy summed over dimensions.
    """
    dims = [np.asarray(values, dtype=np.float64) for values in batch]
    D = len(dims)
    if D < 2:
        raise ValidationError("E_MIOD needs D >= 2 output dimensions; use E_OOD for one")
    if validate:
        for d, values in enumerate(dims):
            _check_softmax_rows(values, f"E_MIOD dimension {d}")
    S = dims[0].shape[0]
    if any(values.shape[0] != S for values in dims):
        raise ValidationError("E_MIOD dimensions disagree in sample count")

    pairs = list(combinations(range(D), 2))
    grads = [np.zeros_like(values) for values in dims]
    joint_total = 0.0
    for a, b in pairs:
        joint = dims[a].T @ dims[b] / S
        terms, derivative = _neg_entropy_terms(joint)
        joint_total += terms.sum()
        grads[a] += dims[b] @ derivative.T / (S * len(pairs))
        grads[b] += dims[a] @ derivative / (S * len(pairs))

    entropy_total = 0.0
    for d, values in enumerate(dims):
        terms, derivative = _neg_entropy_terms(values)
        entropy_total += terms.sum() / S
        grads[d] -= cfg.k / D * derivative / S

    loss = float(joint_total / len(pairs) - cfg.k / D * entropy_total)
    return loss, grads


def _repel_rows(points: np.ndarray, epsilon: float) -> Tuple[float, np.ndarray]:
    """Mean over unique row pairs of -log(||u - v||_1 + epsilon) and its gradient"""
    count = points.shape[0]
    n_pairs = count * (count - 1) / 2
    with np.errstate(divide="ignore"):
        distances = squareform(pdist(points, "cityblock")) + epsilon
        loss = float(-np.log(distances[np.triu_indices(count, 1)]).sum() / n_pairs)
        weights = np.where(distances > 0, 1.0 / distances, 0.0)
    np.fill_diagonal(weights, 0.0)

    grad = np.empty_like(points)
    for start in range(0, count, PAIR_BLOCK):
        stop = min(start + PAIR_BLOCK, count)
        signs = np.sign(points[start:stop, None, :] - points[None, :, :])
        grad[start:stop] = -np.einsum("ij,ijd->id", weights[start:stop], signs) / n_pairs
    return loss, grad


def _check_unit_range(y: np.ndarray):
    if y.ndim != 2:
        raise ValidationError("repulsion batch must be a 2D samples x nodes matrix")
    if np.any(y < -RANGE_TOLERANCE) or np.any(y > 1 + RANGE_TOLERANCE):
        raise ValidationError("repulsion batch entries must lie in [0, 1]")


def repel_sample_wise(batch: np.ndarray, cfg: RepelLossConfig, validate: bool = True) -> Tuple[float, np.ndarray]:
    """Samples repel each other in output space, plus alpha times the mean l1 activation"""
    y = np.asarray(batch, dtype=np.float64)
    if validate:
        _check_unit_range(y)
    if y.ndim != 2 or y.shape[0] < 2:
        raise ValidationError("sample-wise repulsion needs at least two samples")
    loss, grad = _repel_rows(y, cfg.epsilon)
    S = y.shape[0]
    loss += cfg.alpha * float(np.abs(y).sum(axis=1).mean())
    grad += cfg.alpha * np.sign(y) / S
    return loss, grad


def repel_node_wise(batch: np.ndarray, cfg: RepelLossConfig, validate: bool = True) -> Tuple[float, np.ndarray]:
    """Activation patterns of nodes over the batch repel each other, plus the same sparsity term"""
    y = np.asarray(batch, dtype=np.float64)
    if validate:
        _check_unit_range(y)
    if y.ndim != 2 or y.shape[1] < 2:
        raise ValidationError("node-wise repulsion needs at least two nodes")
    loss, grad_t = _repel_rows(y.T, cfg.epsilon)
    S = y.shape[0]
    loss += cfg.alpha * float(np.abs(y).sum(axis=1).mean())
    grad = grad_t.T + cfg.alpha * np.sign(y) / S
    return loss, grad


def repel(batch: np.ndarray, cfg: RepelLossConfig, validate: bool = True) -> Tuple[float, np.ndarray]:
    if cfg.mode == "node_wise":
        return repel_node_wise(batch, cfg, validate)
    return repel_sample_wise(batch, cfg, validate)


def squared_error(outputs: np.ndarray, targets: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean squared error over every entry, the decoder's training loss"""
    y = np.asarray(outputs, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if y.shape != t.shape:
        raise ValidationError(f"outputs {y.shape} and targets {t.shape} differ in shape")
    diff = y - t
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size
