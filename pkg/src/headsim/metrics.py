"""Verification and ordering metrics over scored sample pairs.

ROC sweeps group tied scores into a single threshold, which makes the
trapezoidal AUC exactly the pairwise rank statistic
(wins + 0.5 * ties) / (positives * negatives). Verification rates at a
target false-accept rate are only reported when the negative-pair count can
resolve the target (N >= 1/FAR); otherwise they are explicitly undefined
rather than extrapolated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .relations import Relation, SampleMeta, relation_of

DEFAULT_FAR_TARGETS = (1e-2, 1e-3, 1e-4)
SCORE_TOL = 1e-6


@dataclass(frozen=True)
class ScoredPair:
    """One evaluation pair: cosine score, protocol label, relation tier."""

    score: float
    label: bool
    relation: Relation


@dataclass
class RocResult:
    thresholds: np.ndarray  # distinct scores, descending sweep order
    far: np.ndarray  # non-decreasing, aligned with thresholds
    tpr: np.ndarray
    auc: float
    vr_at_far: dict[float, Optional[float]] = field(default_factory=dict)
    num_positives: int = 0
    num_negatives: int = 0


def _scores_labels(pairs: Sequence[ScoredPair]):
    scores = np.array([p.score for p in pairs], dtype=np.float64)
    labels = np.array([p.label for p in pairs], dtype=bool)
    return scores, labels


def roc(pairs: Sequence[ScoredPair], far_targets=DEFAULT_FAR_TARGETS) -> RocResult:
    """Full ROC sweep with tie-grouped thresholds.

    Requires at least one positive and one negative pair. Curve points are
    (FAR, TPR) at "accept score >= threshold" for each distinct score, with
    an implicit (0, 0) start; AUC is the trapezoidal integral.
    """
    scores, labels = _scores_labels(pairs)
    return roc_from_arrays(scores, labels, far_targets)


def roc_from_arrays(scores: np.ndarray, labels: np.ndarray, far_targets=DEFAULT_FAR_TARGETS) -> RocResult:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    num_pos = int(labels.sum())
    num_neg = int(labels.size - num_pos)
    if num_pos == 0 or num_neg == 0:
        raise ValueError(f"need both pair classes (got {num_pos} positives, {num_neg} negatives)")

    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    l_sorted = labels[order]
    # Group ties: keep the last cumulative count at each distinct score.
    distinct = np.flatnonzero(np.diff(s_sorted, append=-np.inf))
    cum_pos = np.cumsum(l_sorted)[distinct]
    cum_neg = np.cumsum(~l_sorted)[distinct]
    thresholds = s_sorted[distinct]
    tpr = cum_pos / num_pos
    far = cum_neg / num_neg
    auc = float(np.trapezoid(np.concatenate([[0.0], tpr]), np.concatenate([[0.0], far])))

    result = RocResult(
        thresholds=thresholds,
        far=far,
        tpr=tpr,
        auc=auc,
        num_positives=num_pos,
        num_negatives=num_neg,
    )
    result.vr_at_far = {t: vr_at_far(result, t) for t in far_targets}
    return result


def vr_at_far(result_or_pairs, target_far: float) -> Optional[float]:
    """TPR at the most permissive threshold with empirical FAR <= target.

    Returns None (undefined) when the negative count cannot resolve the
    target, i.e. num_negatives < 1/target.
    """
    if not 0.0 < target_far < 1.0:
        raise ValueError("target_far must be in (0, 1)")
    result = result_or_pairs
    if not isinstance(result, RocResult):
        result = roc(result_or_pairs, far_targets=())
    if result.num_negatives < 1.0 / target_far:
        return None
    ok = result.far <= target_far
    if not ok.any():
        return 0.0
    return float(result.tpr[np.flatnonzero(ok)[-1]])


@dataclass(frozen=True)
class PairLimits:
    """Subsampling caps; full cross-products explode quadratically."""

    max_positive: int = 20_000
    max_negative: int = 200_000


PROTOCOLS = ("identity", "appearance")


def build_eval_pairs(
    metas: Sequence[SampleMeta],
    embeddings: np.ndarray,
    protocol: str,
    limits: PairLimits = PairLimits(),
    rng: Optional[np.random.Generator] = None,
) -> list[ScoredPair]:
    """Score and label all (subsampled) pairs under a verification protocol.

    - ``identity``: positives are same-identity pairs (same-state and
      state-change alike); negatives are other-identity pairs.
    - ``appearance``: positives are same-state pairs only; state-change and
      other-identity pairs are both negative.

    Pairs are subsampled per class with the supplied generator when they
    exceed the limits; the relation tier is recorded on every pair.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}; choices {PROTOCOLS}")
    n = len(metas)
    if embeddings.shape[0] != n:
        raise ValueError("metas and embeddings length mismatch")
    rng = rng or np.random.default_rng(0)

    ids = np.array([m.identity for m in metas])
    apps = np.array([m.appearance for m in metas])
    iu, ju = np.triu_indices(n, k=1)
    same_id = ids[iu] == ids[ju]
    same_state = same_id & (apps[iu] == apps[ju])
    relation = np.where(same_state, Relation.SAME_STATE, np.where(same_id, Relation.STATE_CHANGE, Relation.OTHER_IDENTITY))
    positive = same_id if protocol == "identity" else same_state

    def _pick(mask, cap):
        idx = np.flatnonzero(mask)
        if idx.size > cap:
            idx = rng.choice(idx, size=cap, replace=False)
            idx.sort()
        return idx

    pos_idx = _pick(positive, limits.max_positive)
    neg_idx = _pick(~positive, limits.max_negative)
    if pos_idx.size == 0 or neg_idx.size == 0:
        raise ValueError(f"protocol {protocol!r} produced an empty pair class")

    out: list[ScoredPair] = []
    for idx, label in ((pos_idx, True), (neg_idx, False)):
        scores = np.einsum("ij,ij->i", embeddings[iu[idx]], embeddings[ju[idx]])
        for s, r in zip(scores, relation[idx]):
            out.append(ScoredPair(score=float(s), label=label, relation=Relation(int(r))))
    return out


def ordering_satisfaction(triples) -> float:
    """Fraction of (same-state, state-change, other-identity) score triples
    in strictly decreasing order. Ties violate."""
    arr = np.asarray(triples, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("no triples given")
    arr = arr.reshape(-1, 3)
    ok = (arr[:, 0] > arr[:, 1]) & (arr[:, 1] > arr[:, 2])
    return float(ok.mean())


def sample_ordering_triples(
    metas: Sequence[SampleMeta],
    embeddings: np.ndarray,
    num_triples: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Anchor-relative score triples for the ordering metric.

    Each row holds one anchor's cosine to a random same-state partner, a
    random state-change partner, and a random other-identity partner.
    Anchors lacking any of the three partner classes are never drawn.
    """
    ids = np.array([m.identity for m in metas])
    apps = np.array([m.appearance for m in metas])
    n = len(metas)
    same_id = ids[:, None] == ids[None, :]
    same_state = same_id & (apps[:, None] == apps[None, :])
    np.fill_diagonal(same_id, False)
    np.fill_diagonal(same_state, False)
    semi = same_id & ~same_state
    other = ~same_id & ~np.eye(n, dtype=bool)

    eligible = np.flatnonzero(same_state.any(1) & semi.any(1) & other.any(1))
    if eligible.size == 0:
        raise ValueError("no anchor has all three partner classes")
    triples = np.empty((num_triples, 3), dtype=np.float64)
    anchors = rng.choice(eligible, size=num_triples, replace=True)
    for row, i in enumerate(anchors):
        j1 = rng.choice(np.flatnonzero(same_state[i]))
        j2 = rng.choice(np.flatnonzero(semi[i]))
        j3 = rng.choice(np.flatnonzero(other[i]))
        triples[row] = (
            embeddings[i] @ embeddings[j1],
            embeddings[i] @ embeddings[j2],
            embeddings[i] @ embeddings[j3],
        )
    return triples


def mean_score_by_relation(
    metas: Sequence[SampleMeta],
    embeddings: np.ndarray,
    rng: Optional[np.random.Generator] = None,
    max_pairs_per_relation: int = 50_000,
) -> dict[Relation, float]:
    """Mean cosine per relation tier over (subsampled) pairs."""
    n = len(metas)
    ids = np.array([m.identity for m in metas])
    apps = np.array([m.appearance for m in metas])
    iu, ju = np.triu_indices(n, k=1)
    same_id = ids[iu] == ids[ju]
    same_state = same_id & (apps[iu] == apps[ju])
    masks = {
        Relation.SAME_STATE: same_state,
        Relation.STATE_CHANGE: same_id & ~same_state,
        Relation.OTHER_IDENTITY: ~same_id,
    }
    rng = rng or np.random.default_rng(0)
    out: dict[Relation, float] = {}
    for rel, mask in masks.items():
        idx = np.flatnonzero(mask)
        if idx.size == 0:
            continue
        if idx.size > max_pairs_per_relation:
            idx = rng.choice(idx, size=max_pairs_per_relation, replace=False)
        scores = np.einsum("ij,ij->i", embeddings[iu[idx]], embeddings[ju[idx]])
        out[rel] = float(scores.mean())
    return out


def retrieval_topk(
    query_embeddings: np.ndarray,
    gallery_embeddings: np.ndarray,
    k: int,
    self_indices: Optional[np.ndarray] = None,
):
    """Top-k gallery items per query by cosine, ties broken to lowest index.

    ``self_indices[q]`` (or -1) names the gallery slot that IS query ``q``;
    self-matches are excluded. A different gallery item with an identical
    vector still ranks normally.

    Returns ``(indices, scores)`` of shape (num_queries, k).
    """
    gallery = np.asarray(gallery_embeddings)
    queries = np.asarray(query_embeddings)
    if gallery.size == 0:
        raise ValueError("empty gallery")
    if not 1 <= k <= gallery.shape[0]:
        raise ValueError(f"k={k} out of range for gallery of {gallery.shape[0]}")
    scores = queries @ gallery.T
    if self_indices is not None:
        rows = np.flatnonzero(np.asarray(self_indices) >= 0)
        scores[rows, np.asarray(self_indices)[rows]] = -np.inf
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    top_scores = np.take_along_axis(scores, order, axis=1)
    return order, top_scores


def relation_of_pair(a: SampleMeta, b: SampleMeta) -> Relation:
    """Re-export for callers that only import metrics."""
    return relation_of(a, b)
