"""
Discrete information calculus for many-to-one partitions.

An input alphabet of M states carries a distribution p(x). A partition f maps
every state to one of N groups. Everything here is exact arithmetic over
probability vectors; nothing is learned.
"""

import itertools
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import entr, xlogy
from scipy.stats import entropy as scipy_entropy

from utils.errors import ContractViolation, ValidationError, raise_if_problems

logger = logging.getLogger(__name__)

SUM_TOLERANCE = 1e-9
ZERO_FLOOR = 1e-300
TIE_TOLERANCE = 1e-12
EXHAUSTIVE_MAX_STATES = 64
EXHAUSTIVE_MAX_CANDIDATES = 500_000
OBJECTIVES = ("max_HQ", "min_Hq")


@dataclass(frozen=True, eq=False)
class DiscreteDistribution:
    probs: np.ndarray

    @property
    def size(self) -> int:
        return int(self.probs.shape[0])


@dataclass(frozen=True, eq=False)
class OutputDistribution:
    q_probs: np.ndarray

    @property
    def size(self) -> int:
        return int(self.q_probs.shape[0])


@dataclass(frozen=True, eq=False)
class Partition:
    assignment: np.ndarray
    n_groups: int

    @property
    def size(self) -> int:
        return int(self.assignment.shape[0])

    @property
    def group_sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.n_groups)


@dataclass(frozen=True)
class TransmissionRate:
    direct: float
    via_output_entropy: float


@dataclass(frozen=True)
class BoundaryShift:
    exact: float
    first_order: float
    moved_state: int
    delta: float


@dataclass(frozen=True, eq=False)
class ToyExampleResult:
    M: int
    a_transmission: int
    a_modeling: int
    hq_curve: np.ndarray


def validate_probability_vector(values, label="distribution") -> List[str]:
    """Return the list of problems that make `values` an invalid probability vector"""
    problems = []
    probs = np.asarray(values, dtype=np.float64)
    if probs.ndim != 1 or probs.size == 0:
        problems.append(f"{label} must be a non-empty vector")
        return problems
    if not np.all(np.isfinite(probs)):
        problems.append(f"{label} contains non-finite entries")
        return problems
    if np.any(probs < 0):
        problems.append(f"{label} has negative entries")
    total = float(probs.sum())
    if abs(total - 1.0) > SUM_TOLERANCE:
        problems.append(f"{label} sums to {total!r}, not 1")
    return problems


def _clean(probs: np.ndarray) -> np.ndarray:
    return np.where(probs < ZERO_FLOOR, 0.0, probs)


def make_distribution(values, normalize: bool = False) -> DiscreteDistribution:
    probs = np.asarray(values, dtype=np.float64).copy()
    if normalize and probs.ndim == 1 and probs.size and probs.sum() > 0:
        probs = probs / probs.sum()
    raise_if_problems(validate_probability_vector(probs))
    return DiscreteDistribution(_clean(probs))


def make_output_distribution(values) -> OutputDistribution:
    q_probs = np.asarray(values, dtype=np.float64).copy()
    raise_if_problems(validate_probability_vector(q_probs, "output distribution"))
    return OutputDistribution(_clean(q_probs))


def validate_partition(assignment, n_groups: Optional[int] = None) -> List[str]:
    problems = []
    labels = np.asarray(assignment)
    if labels.ndim != 1 or labels.size == 0:
        return ["partition must assign at least one state"]
    if not np.issubdtype(labels.dtype, np.integer):
        return ["partition group indices must be integers"]
    if np.any(labels < 0):
        problems.append("partition has negative group indices")
        return problems
    if n_groups is None:
        n_groups = int(labels.max()) + 1
    if np.any(labels >= n_groups):
        problems.append(f"partition group index exceeds N={n_groups}")
        return problems
    empty = np.flatnonzero(np.bincount(labels, minlength=n_groups) == 0)
    if empty.size:
        problems.append(f"partition groups {empty.tolist()} are empty")
    return problems


def make_partition(assignment, n_groups: Optional[int] = None) -> Partition:
    labels = np.asarray(assignment)
    raise_if_problems(validate_partition(labels, n_groups))
    labels = labels.astype(np.int64)
    if n_groups is None:
        n_groups = int(labels.max()) + 1
    return Partition(labels, int(n_groups))


def contiguous_partition(M: int, boundaries: Sequence[int]) -> Partition:
    """
    Build a 1D contiguous partition of M states.

    Args:
        M: number of input states
        boundaries: strictly increasing cut positions in (0, M); group g holds
            the states from boundaries[g-1] up to, but excluding, boundaries[g]

    Returns:
        Partition with len(boundaries) + 1 groups
    """
    cuts = list(boundaries)
    if any(b <= 0 or b >= M for b in cuts) or sorted(set(cuts)) != cuts:
        raise ValidationError(f"boundaries {cuts} are not strictly increasing within (0, {M})")
    assignment = np.zeros(M, dtype=np.int64)
    for cut in cuts:
        assignment[cut:] += 1
    return Partition(assignment, len(cuts) + 1)


def group_range(f: Partition, group: int) -> Optional[Tuple[int, int]]:
    """First and last state of a group, or None when the group is not contiguous"""
    members = np.flatnonzero(f.assignment == group)
    if members.size == 0 or members[-1] - members[0] + 1 != members.size:
        return None
    return int(members[0]), int(members[-1])


def is_contiguous(f: Partition) -> bool:
    return all(group_range(f, g) is not None for g in range(f.n_groups))


def boundaries_of(f: Partition) -> Tuple[int, ...]:
    """Cut positions of a contiguous partition whose groups are in increasing order"""
    return tuple(int(i) for i in np.flatnonzero(np.diff(f.assignment)) + 1)


def _check_sizes(p: DiscreteDistribution, f: Partition):
    if p.size != f.size:
        raise ValidationError(f"distribution has M={p.size} states but partition has {f.size}")


def entropy(dist: DiscreteDistribution, base: str = "nats") -> float:
    """Shannon entropy with 0 log 0 = 0"""
    if base not in ("nats", "bits"):
        raise ValidationError(f"unknown entropy base {base!r}")
    probs = np.asarray(dist.probs if hasattr(dist, "probs") else dist.q_probs)
    raise_if_problems(validate_probability_vector(probs))
    value = float(np.sum(entr(_clean(probs))))
    if base == "bits":
        value /= math.log(2)
    return value


def push_forward(p: DiscreteDistribution, f: Partition) -> OutputDistribution:
    """Q(y_j): total input mass of each group"""
    _check_sizes(p, f)
    return OutputDistribution(np.bincount(f.assignment, weights=p.probs, minlength=f.n_groups))


def modeled_distribution(Q: OutputDistribution, f: Partition) -> DiscreteDistribution:
    """q(x) = Q(y_j) / n_j for every x in group j"""
    if Q.size != f.n_groups:
        raise ValidationError(f"output distribution has {Q.size} states, partition has {f.n_groups}")
    sizes = f.group_sizes
    return DiscreteDistribution(Q.q_probs[f.assignment] / sizes[f.assignment])


def hq_grouped(Q: OutputDistribution, f: Partition) -> float:
    """Entropy of the modeled distribution evaluated group by group"""
    if Q.size != f.n_groups:
        raise ValidationError(f"output distribution has {Q.size} states, partition has {f.n_groups}")
    sizes = f.group_sizes.astype(np.float64)
    return float(np.sum(entr(Q.q_probs) + Q.q_probs * np.log(sizes)))


def cross_entropy(p: DiscreteDistribution, q: DiscreteDistribution) -> float:
    """H_pq = -sum p log q"""
    if p.size != q.size:
        raise ValidationError("cross entropy needs distributions of equal size")
    return float(-np.sum(xlogy(p.probs, q.probs)))


def kl_divergence(p: DiscreteDistribution, q: DiscreteDistribution) -> float:
    """Textbook D_KL(p || q)"""
    if p.size != q.size:
        raise ValidationError("KL divergence needs distributions of equal size")
    return float(scipy_entropy(p.probs, q.probs))


def kl_p_q(p: DiscreteDistribution, f: Partition) -> float:
    """D_KL(p || q) for the distribution modeled by f, computed as H_q - H_p"""
    Q = push_forward(p, f)
    return hq_grouped(Q, f) - entropy(p)


def transmission_rate(p: DiscreteDistribution, f: Partition) -> TransmissionRate:
    """
    Mutual information I(x; y) of the deterministic channel f.

    Returns both the direct sum over the joint table and the output entropy H_Q;
    for a deterministic map the two coincide.
    """
    _check_sizes(p, f)
    Q = push_forward(p, f)
    joint = np.zeros((p.size, f.n_groups))
    joint[np.arange(p.size), f.assignment] = p.probs
    independent = np.outer(p.probs, Q.q_probs)
    ratio = np.divide(joint, independent, out=np.ones_like(joint), where=joint > 0)
    direct = float(np.sum(xlogy(joint, ratio)))
    return TransmissionRate(direct=direct, via_output_entropy=float(np.sum(entr(Q.q_probs))))


def boundary_shift_delta_hq(
    p: DiscreteDistribution, f: Partition, donor_group: int, receiver_group: int
) -> BoundaryShift:
    """
    Change of H_q when the donor hands its boundary state to an adjacent receiver.

    `exact` compares two grouped evaluations; `first_order` is
    q_2 - q_1 + delta * log(q_1 / q_2) with delta the moved state's probability.
    """
    _check_sizes(p, f)
    donor = group_range(f, donor_group)
    receiver = group_range(f, receiver_group)
    if donor is None or receiver is None:
        raise ContractViolation("boundary shift needs contiguous donor and receiver groups")
    sizes = f.group_sizes
    if sizes[donor_group] < 2:
        raise ContractViolation(f"donor group {donor_group} has a single state")
    if donor[1] + 1 == receiver[0]:
        moved = donor[1]
    elif receiver[1] + 1 == donor[0]:
        moved = donor[0]
    else:
        raise ContractViolation(f"groups {donor_group} and {receiver_group} are not adjacent")

    Q = push_forward(p, f)
    shifted = f.assignment.copy()
    shifted[moved] = receiver_group
    after = Partition(shifted, f.n_groups)
    exact = hq_grouped(push_forward(p, after), after) - hq_grouped(Q, f)

    q1 = Q.q_probs[donor_group] / sizes[donor_group]
    q2 = Q.q_probs[receiver_group] / sizes[receiver_group]
    delta = float(p.probs[moved])
    with np.errstate(divide="ignore"):
        first_order = float(q2 - q1 + delta * np.log(q1 / q2))
    return BoundaryShift(exact=exact, first_order=first_order, moved_state=int(moved), delta=delta)


def _segment_scores(prefix, start, ends, objective):
    """(primary, secondary) scores to minimise for segments [start, end)"""
    mass = prefix[ends] - prefix[start]
    output_term = entr(mass)
    modeled_term = output_term + mass * np.log(np.asarray(ends - start, dtype=np.float64))
    if objective == "max_HQ":
        return -output_term, modeled_term
    return modeled_term, -output_term


def _pick(primary, secondary):
    """Index of the best candidate: primary first, then secondary, then lowest index"""
    best = primary.min()
    close = primary <= best + TIE_TOLERANCE * max(1.0, abs(best))
    best_secondary = np.where(close, secondary, np.inf).min()
    close &= secondary <= best_secondary + TIE_TOLERANCE * max(1.0, abs(best_secondary))
    return int(np.argmax(close))


def _search_dp(probs, n_groups, objective):
    M = probs.size
    prefix = np.concatenate([[0.0], np.cumsum(probs)])
    # suffix tables: best scores for splitting [i, M) into g groups
    last_p, last_s = _segment_scores(prefix, np.arange(M), np.full(M, M), objective)
    primary = {1: np.append(last_p, np.inf)}
    secondary = {1: np.append(last_s, np.inf)}
    choice = {}

    for g in range(2, n_groups + 1):
        first_states = [0] if g == n_groups else range(M - g + 1)
        prim_g = np.full(M + 1, np.inf)
        sec_g = np.full(M + 1, np.inf)
        choice_g = np.full(M + 1, -1, dtype=np.int64)
        for i in first_states:
            ends = np.arange(i + 1, M - g + 2)
            seg_p, seg_s = _segment_scores(prefix, i, ends, objective)
            total_p = seg_p + primary[g - 1][ends]
            total_s = seg_s + secondary[g - 1][ends]
            k = _pick(total_p, total_s)
            prim_g[i], sec_g[i], choice_g[i] = total_p[k], total_s[k], ends[k]
        primary[g], secondary[g], choice[g] = prim_g, sec_g, choice_g

    cuts = []
    start = 0
    for g in range(n_groups, 1, -1):
        start = int(choice[g][start])
        cuts.append(start)
    return cuts


def _search_exhaustive(probs, n_groups, objective):
    M = probs.size
    prefix = np.concatenate([[0.0], np.cumsum(probs)])
    best_cuts, best_p, best_s = None, np.inf, np.inf
    for cuts in itertools.combinations(range(1, M), n_groups - 1):
        edges = np.array((0,) + cuts + (M,))
        seg_p, seg_s = _segment_scores(prefix, edges[:-1], edges[1:], objective)
        total_p, total_s = float(seg_p.sum()), float(seg_s.sum())
        tol_p = TIE_TOLERANCE * max(1.0, abs(best_p)) if np.isfinite(best_p) else 0.0
        tol_s = TIE_TOLERANCE * max(1.0, abs(best_s)) if np.isfinite(best_s) else 0.0
        if total_p < best_p - tol_p or (abs(total_p - best_p) <= tol_p and total_s < best_s - tol_s):
            best_cuts, best_p, best_s = list(cuts), total_p, total_s
    return best_cuts


def best_contiguous_partition(
    p: DiscreteDistribution, n_groups: int, objective: str, method: str = "auto"
) -> Partition:
    """
    Globally optimal 1D contiguous partition for max_HQ or min_Hq.

    Ties in the chosen objective are broken by the other objective, then by the
    lexicographically smallest boundary vector.
    """
    if objective not in OBJECTIVES:
        raise ValidationError(f"objective must be one of {OBJECTIVES}, got {objective!r}")
    M = p.size
    if n_groups < 1 or n_groups > M:
        raise ValidationError(f"N={n_groups} must be between 1 and M={M}")
    if n_groups == 1:
        return Partition(np.zeros(M, dtype=np.int64), 1)
    if method == "auto":
        small = M <= EXHAUSTIVE_MAX_STATES and math.comb(M - 1, n_groups - 1) <= EXHAUSTIVE_MAX_CANDIDATES
        method = "exhaustive" if small else "dp"
    if method == "exhaustive":
        if M > EXHAUSTIVE_MAX_STATES:
            raise ValidationError(f"exhaustive search is limited to M <= {EXHAUSTIVE_MAX_STATES}")
        cuts = _search_exhaustive(p.probs, n_groups, objective)
    elif method == "dp":
        cuts = _search_dp(p.probs, n_groups, objective)
    else:
        raise ValidationError(f"unknown search method {method!r}")
    logger.debug("best %s partition of M=%d into N=%d: %s", objective, M, n_groups, cuts)
    return contiguous_partition(M, cuts)


def toy_distribution(M: int) -> DiscreteDistribution:
    """Linearly decaying p with peak 2/M, renormalised to sum to one"""
    states = np.arange(M, dtype=np.float64)
    probs = (2.0 / M) * (1.0 - states / M)
    return make_distribution(probs / probs.sum())


def toy_hq_closed_form(r):
    """H_q - log M for the two-group toy split at fraction r of the states"""
    r = np.asarray(r, dtype=np.float64)
    return -xlogy(r * (2.0 - r), 2.0 - r) - xlogy((1.0 - r) ** 2, 1.0 - r)


def toy_example(M: int, curve_points: int = 1001) -> ToyExampleResult:
    """Both optima of the two-group toy problem plus the H_q - log M curve"""
    if M < 1000:
        raise ValidationError(f"toy example needs M >= 1000, got {M}")
    a_transmission = int(math.floor((1.0 - 1.0 / math.sqrt(2.0)) * M + 0.5))
    splits = np.arange(1, M)
    curve = toy_hq_closed_form(splits / M)
    a_modeling = int(splits[np.argmin(curve)])

    picks = np.unique(np.linspace(0, splits.size - 1, min(curve_points, splits.size)).round().astype(int))
    hq_curve = np.column_stack([splits[picks] / M, curve[picks]])
    logger.info("toy example M=%d: a_transmission=%d a_modeling=%d", M, a_transmission, a_modeling)
    return ToyExampleResult(M=M, a_transmission=a_transmission, a_modeling=a_modeling, hq_curve=hq_curve)
