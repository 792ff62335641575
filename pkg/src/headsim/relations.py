"""Pairwise relation tiers, quadruplet mining, and mixed-batch composition.

Every ordered pair of distinct samples falls into exactly one tier:

- ``SAME_STATE``: same identity and same appearance state,
- ``STATE_CHANGE``: same identity, different appearance state,
- ``OTHER_IDENTITY``: different identities.

Target embeddings should score pairs in that order (same-state highest).
Appearance labels may come either from generated worlds or from the video
pipeline (segment ids), in which case identity is a cluster id.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum
from typing import Optional, Sequence

import numpy as np


class Relation(IntEnum):
    """Similarity tier of a sample pair; lower value = expected more similar."""

    SAME_STATE = 1
    STATE_CHANGE = 2
    OTHER_IDENTITY = 3

    @property
    def tag(self) -> str:
        return _RELATION_TAGS[self]


_RELATION_TAGS = {
    Relation.SAME_STATE: "same_state",
    Relation.STATE_CHANGE: "state_change",
    Relation.OTHER_IDENTITY: "other_identity",
}


@dataclass(frozen=True)
class SampleMeta:
    """Labels a single sample for relation purposes.

    ``appearance`` ids must be globally unique (namespaced per video) so the
    pipeline's segment ids can be used directly.
    """

    sample_id: str
    identity: int
    appearance: int
    video_id: str = ""
    face_visible: bool = True


def relation_of(a: SampleMeta, b: SampleMeta) -> Relation:
    """Relation tier of a distinct pair; symmetric in its arguments."""
    if a.sample_id == b.sample_id:
        raise ValueError(f"relation undefined for identical sample ids ({a.sample_id!r})")
    if a.identity != b.identity:
        return Relation.OTHER_IDENTITY
    if a.appearance != b.appearance:
        return Relation.STATE_CHANGE
    return Relation.SAME_STATE


@dataclass(frozen=True)
class Quadruplet:
    """Mined (anchor, positive, semi-negative, negative) batch indices.

    ``semi_negative`` is ``-1`` when the anchor has no in-batch STATE_CHANGE
    partner; the ranking loss then keeps only its positive-vs-negative term.
    """

    anchor: int
    positive: int
    semi_negative: int
    negative: int
    semi_negative_present: bool


def _relation_masks(metas: Sequence[SampleMeta]):
    ids = np.array([m.identity for m in metas])
    apps = np.array([m.appearance for m in metas])
    same_id = ids[:, None] == ids[None, :]
    same_state = same_id & (apps[:, None] == apps[None, :])
    np.fill_diagonal(same_id, False)
    np.fill_diagonal(same_state, False)
    return same_state, same_id & ~same_state, ~same_id & ~np.eye(len(metas), dtype=bool)


def build_quadruplets(
    metas: Sequence[SampleMeta],
    similarity: np.ndarray,
    mode: str = "hard",
    *,
    hardest_positive: bool = True,
    rng: Optional[np.random.Generator] = None,
) -> list[Quadruplet]:
    """Mine one quadruplet per eligible anchor from a batch.

    ``similarity`` is the batch's pairwise cosine matrix. In ``hard`` mode the
    semi-negative and negative are the most similar candidates of their tier
    and the positive is the least similar same-state partner (or the first
    one when ``hardest_positive`` is off); ties break to the lowest index.
    ``random`` mode picks uniformly and requires ``rng``. Anchors without a
    same-state or other-identity partner are skipped; a missing state-change
    partner only clears ``semi_negative_present``.
    """
    n = len(metas)
    similarity = np.asarray(similarity)
    if similarity.shape != (n, n):
        raise ValueError(f"similarity shape {similarity.shape} != ({n}, {n})")
    if mode not in ("hard", "random"):
        raise ValueError(f"unknown mining mode {mode!r}")
    if mode == "random" and rng is None:
        raise ValueError("random mining requires an explicit rng")

    pos_mask, semi_mask, neg_mask = _relation_masks(metas)
    out: list[Quadruplet] = []
    for i in range(n):
        pos_idx = np.flatnonzero(pos_mask[i])
        neg_idx = np.flatnonzero(neg_mask[i])
        if pos_idx.size == 0 or neg_idx.size == 0:
            continue
        semi_idx = np.flatnonzero(semi_mask[i])
        if mode == "hard":
            row = similarity[i]
            if hardest_positive:
                pos = int(pos_idx[np.argmin(row[pos_idx])])
            else:
                pos = int(pos_idx[0])
            neg = int(neg_idx[np.argmax(row[neg_idx])])
            semi = int(semi_idx[np.argmax(row[semi_idx])]) if semi_idx.size else -1
        else:
            pos = int(rng.choice(pos_idx))
            neg = int(rng.choice(neg_idx))
            semi = int(rng.choice(semi_idx)) if semi_idx.size else -1
        out.append(
            Quadruplet(
                anchor=i,
                positive=pos,
                semi_negative=semi,
                negative=neg,
                semi_negative_present=semi >= 0,
            )
        )
    return out


@dataclass(frozen=True)
class BatchPlan:
    """Indices into the head/face pools composing one training batch.

    Head samples carry relation structure and feed quadruplet mining; face
    samples are distillation-only and never enter quadruplets.
    """

    head_indices: np.ndarray
    face_indices: np.ndarray

    @property
    def size(self) -> int:
        return len(self.head_indices) + len(self.face_indices)


def mixed_batch(
    head_pool: Sequence[SampleMeta],
    face_pool: Sequence[SampleMeta],
    batch_size: int,
    head_fraction: float,
    rng: np.random.Generator,
) -> BatchPlan:
    """Compose a batch of ``ceil(head_fraction * batch_size)`` head samples
    plus distillation-only face samples.

    Head samples are drawn as identity blocks (a same-state pair plus, when
    the identity has one, a pair from a sibling state), which guarantees,
    where the pool allows, >=2 samples sharing a state, >=2 states of some
    identity, and >=2 identities, and keeps quadruplet mining dense: most
    anchors see all three relation tiers in-batch.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not 0.0 < head_fraction <= 1.0:
        raise ValueError("head_fraction must be in (0, 1]")
    n_head = math.ceil(head_fraction * batch_size)
    n_face = batch_size - n_head
    if n_head > 0 and len(head_pool) == 0:
        raise ValueError("head pool is empty but head_fraction > 0")
    if n_face > 0 and len(face_pool) == 0:
        raise ValueError("face pool is empty but head_fraction < 1")

    by_state: dict[tuple[int, int], list[int]] = {}
    states_of: dict[int, list[int]] = {}
    for idx, m in enumerate(head_pool):
        by_state.setdefault((m.identity, m.appearance), []).append(idx)
    for u, a in sorted(by_state):
        states_of.setdefault(u, []).append(a)
    identities = sorted(states_of)

    picked: list[int] = []
    chosen = np.zeros(len(head_pool), dtype=bool)

    def _take_from(group, want):
        free = [j for j in group if not chosen[j]]
        take = min(want, len(free))
        if take > 0:
            for j in rng.choice(free, size=take, replace=False):
                picked.append(int(j))
                chosen[j] = True
        return take

    def _pick_state(u, prefer_pair):
        states = states_of[u]
        if prefer_pair:
            rich = [s for s in states if sum(not chosen[j] for j in by_state[(u, s)]) >= 2]
            if rich:
                return rich[rng.integers(len(rich))]
        free = [s for s in states if any(not chosen[j] for j in by_state[(u, s)])]
        return free[rng.integers(len(free))] if free else None

    order = list(rng.permutation(identities))
    cursor = 0
    sweeps = 0
    while len(picked) < n_head and sweeps < 3:
        if cursor >= len(order):
            cursor = 0
            sweeps += 1
            continue
        u = order[cursor]
        cursor += 1
        cap = min(4, n_head - len(picked))
        if not picked and len(order) >= 2 and n_head >= 3:
            cap = min(cap, n_head - 1)  # leave room for a second identity
        a = _pick_state(u, prefer_pair=True)
        if a is None:
            continue
        got = _take_from(by_state[(u, a)], min(2, cap))
        if got < cap and len(states_of[u]) >= 2:
            siblings = [s for s in states_of[u] if s != a]
            a2 = siblings[rng.integers(len(siblings))]
            _take_from(by_state[(u, a2)], min(2, cap - got))

    remaining = n_head - len(picked)
    if remaining > 0:  # pool smaller than the batch: top up with replacement
        free = np.flatnonzero(~chosen)
        picked.extend(int(j) for j in free[: remaining])
        if len(picked) < n_head:
            picked.extend(
                int(j) for j in rng.integers(0, len(head_pool), size=n_head - len(picked))
            )

    head_indices = np.array(picked[:n_head], dtype=np.int64)
    rng.shuffle(head_indices)

    if n_face > 0:
        replace = n_face > len(face_pool)
        face_indices = rng.choice(len(face_pool), size=n_face, replace=replace).astype(np.int64)
    else:
        face_indices = np.empty(0, dtype=np.int64)
    return BatchPlan(head_indices=head_indices, face_indices=face_indices)
