"""Similarity kernels, pairwise score matrices and pseudo-labeling.

All kernels follow the "larger is more similar" contract: cosine in [-1, 1],
Euclidean as negated L2 distance, Gaussian as exp(-d^2 / (2 sigma^2)).
Pseudo-labels come either from a k-nearest-neighbour majority vote over a
reference set (the memory bank or the source batch) or, as an ablation
baseline, from the classifier's argmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DegenerateInputError, GatingError

ZERO_NORM_TOL = 1e-12

COSINE = "cosine"
EUCLIDEAN = "euclidean"
GAUSSIAN = "gaussian"
_KINDS = (COSINE, EUCLIDEAN, GAUSSIAN)


@dataclass(frozen=True)
class SimilarityKind:
    name: str
    sigma: float = 1.0  # Gaussian bandwidth, ignored by the other kernels

    def __post_init__(self):
        if self.name not in _KINDS:
            raise ConfigurationError(f"unknown similarity kind {self.name!r}")
        if self.name == GAUSSIAN and not self.sigma > 0:
            raise ConfigurationError("Gaussian similarity needs sigma > 0")


def _check_norms(x: np.ndarray, who: str) -> np.ndarray:
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    bad = np.where(norms <= ZERO_NORM_TOL)[0]
    if bad.size:
        raise DegenerateInputError(
            f"cosine similarity on (near-)zero {who} vector at row {bad[0]}"
        )
    return norms


def similarity(f_i, f_j, kind: SimilarityKind) -> float:
    """Score a single pair of equal-width feature vectors."""
    a = np.asarray(f_i, dtype=np.float64).reshape(-1)
    b = np.asarray(f_j, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ConfigurationError(f"widths differ: {a.shape[0]} vs {b.shape[0]}")
    return float(pairwise_similarity(a[None, :], b[None, :], kind)[0, 0])


def pairwise_similarity(targets, references, kind: SimilarityKind) -> np.ndarray:
    """Score matrix with entry (j, i) = similarity(target j, reference i)."""
    t = np.asarray(targets, dtype=np.float64)
    r = np.asarray(references, dtype=np.float64)
    if r.shape[0] == 0:
        raise ConfigurationError("reference set is empty")
    if t.shape[1] != r.shape[1]:
        raise ConfigurationError(f"widths differ: {t.shape[1]} vs {r.shape[1]}")
    if kind.name == COSINE:
        tn = _check_norms(t, "target")
        rn = _check_norms(r, "reference")
        return (t / tn[:, None]) @ (r / rn[:, None]).T
    d2 = _sq_dists(t, r)
    if kind.name == EUCLIDEAN:
        return -np.sqrt(d2)
    return np.exp(-d2 / (2.0 * kind.sigma**2))


def _sq_dists(t: np.ndarray, r: np.ndarray) -> np.ndarray:
    d2 = (
        np.sum(t * t, axis=1)[:, None]
        + np.sum(r * r, axis=1)[None, :]
        - 2.0 * (t @ r.T)
    )
    return np.maximum(d2, 0.0)


def pairwise_similarity_vjp(targets, references, kind: SimilarityKind,
                            upstream: np.ndarray,
                            sim: np.ndarray | None = None) -> np.ndarray:
    """Gradient of sum(upstream * scores) w.r.t. the target rows.

    References are constants (bank entries or detached source features), so
    no gradient is returned for them. Pass the already-computed score matrix
    as ``sim`` to skip recomputing it.
    """
    t = np.asarray(targets, dtype=np.float64)
    r = np.asarray(references, dtype=np.float64)
    up = np.asarray(upstream, dtype=np.float64)
    if kind.name == COSINE:
        tn = _check_norms(t, "target")
        rn = _check_norms(r, "reference")
        that = t / tn[:, None]
        rhat = r / rn[:, None]
        phi = sim if sim is not None else that @ rhat.T
        # d phi_i / dt = (rhat_i - phi_i * that) / |t|
        return (up @ rhat - (up * phi).sum(axis=1, keepdims=True) * that) / tn[:, None]
    if kind.name == EUCLIDEAN:
        d = -sim if sim is not None else np.sqrt(_sq_dists(t, r))
        coef = np.where(d > ZERO_NORM_TOL, up / np.maximum(d, ZERO_NORM_TOL), 0.0)
    else:
        phi = sim if sim is not None else np.exp(-_sq_dists(t, r) / (2.0 * kind.sigma**2))
        coef = up * phi / kind.sigma**2
    # sum_i coef_ji * (r_i - t_j)
    return coef @ r - coef.sum(axis=1, keepdims=True) * t


@dataclass
class PseudoLabel:
    """kNN vote for one anchor: winning class, neighbour positions, vote counts."""

    label: int
    neighbors: np.ndarray  # k reference positions, most similar first
    votes: np.ndarray      # per-class neighbour counts, length num_classes


@dataclass
class PseudoLabelAssignment:
    """Batched pseudo-labels: one row per anchor."""

    labels: np.ndarray     # (n,)
    neighbors: np.ndarray  # (n, k)
    votes: np.ndarray      # (n, num_classes)


def _top_k(sim_row: np.ndarray, k: int) -> np.ndarray:
    """Positions of the k largest scores, most similar first.

    Exactly reproduces a full stable sort by (-score, position): among equal
    scores the smallest positions win, without the O(m log m) full sort.
    """
    m = sim_row.size
    if k >= m:
        candidates = np.arange(m)
    else:
        kth = np.partition(sim_row, m - k)[m - k]
        above = np.flatnonzero(sim_row > kth)
        ties = np.flatnonzero(sim_row == kth)[: k - above.size]
        candidates = np.concatenate((above, ties))
    return candidates[np.argsort(-sim_row[candidates], kind="stable")]


def _vote(nbrs: np.ndarray, sim_row: np.ndarray, ref_labels: np.ndarray,
          num_classes: int) -> PseudoLabel:
    votes = np.zeros(num_classes, dtype=np.int64)
    cumsim = np.zeros(num_classes)
    for idx in nbrs:
        c = ref_labels[idx]
        votes[c] += 1
        cumsim[c] += sim_row[idx]
    best = votes.max()
    tied = np.where(votes == best)[0]
    if tied.size > 1:
        # break by largest cumulative similarity, then smallest class index
        tied = tied[cumsim[tied] == cumsim[tied].max()]
    return PseudoLabel(int(tied[0]), nbrs.copy(), votes)


def knn_pseudo_label(sim_row, ref_labels, k: int, num_classes: int | None = None) -> PseudoLabel:
    """Majority vote among the k most similar reference entries.

    Ties in similarity resolve to the smallest reference position; ties in
    the vote resolve by largest cumulative similarity, then smallest class.
    """
    sim_row = np.asarray(sim_row, dtype=np.float64).reshape(-1)
    ref_labels = np.asarray(ref_labels, dtype=np.int64).reshape(-1)
    if k < 1:
        raise ConfigurationError("k must be >= 1")
    if sim_row.shape[0] < k:
        raise GatingError(f"reference set of size {sim_row.shape[0]} smaller than k={k}")
    if num_classes is None:
        num_classes = int(ref_labels.max()) + 1
    return _vote(_top_k(sim_row, k), sim_row, ref_labels, num_classes)


def assign_pseudo_labels(sim: np.ndarray, ref_labels, k: int,
                         num_classes: int) -> PseudoLabelAssignment:
    """kNN pseudo-labels for every row of a similarity matrix."""
    ref_labels = np.asarray(ref_labels, dtype=np.int64).reshape(-1)
    if sim.shape[1] < k:
        raise GatingError(f"reference set of size {sim.shape[1]} smaller than k={k}")
    n = sim.shape[0]
    labels = np.zeros(n, dtype=np.int64)
    neighbors = np.zeros((n, k), dtype=np.int64)
    votes = np.zeros((n, num_classes), dtype=np.int64)
    for j in range(n):
        pl = _vote(_top_k(sim[j], k), sim[j], ref_labels, num_classes)
        labels[j] = pl.label
        neighbors[j] = pl.neighbors
        votes[j] = pl.votes
    return PseudoLabelAssignment(labels, neighbors, votes)


def classifier_pseudo_label(prob_row) -> int:
    """Argmax class of one probability row; ties go to the smallest index."""
    return int(np.argmax(np.asarray(prob_row, dtype=np.float64).reshape(-1)))
