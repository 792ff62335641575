"""Training objectives: teacher alignment and the hierarchical ranking loss.

The ranking loss scores each mined quadruplet by three softplus hinge terms
that together enforce same-state > state-change > other-identity ordering of
anchor similarities:

    softplus(gap1 + s_semi - s_pos)
  + softplus(gap2 + s_neg  - s_pos)
  + softplus(gap3 + s_neg  - s_semi)

When the anchor has no state-change partner only the middle term survives,
preserving the identity-vs-other constraint. The alignment loss pulls the
identity embedding toward a frozen teacher vector (1 - cosine) and is gated
to samples with a usable face.

All gradients here are analytic (w.r.t. the embedding matrices); combined
with :func:`headsim.model.encode_backward` they cover the full model.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .model import VARIANTS, EmbeddingPair
from .relations import Quadruplet

SIM_RANGE_TOL = 1e-6
UNIT_NORM_TOL = 1e-4


@dataclass(frozen=True)
class Margins:
    """Required similarity gaps between the three relation tiers."""

    same_vs_semi: float = 0.1  # same-state ahead of state-change
    same_vs_diff: float = 0.3  # same-state ahead of other-identity
    semi_vs_diff: float = 0.2  # state-change ahead of other-identity

    def __post_init__(self):
        if min(self.same_vs_semi, self.same_vs_diff, self.semi_vs_diff) <= 0:
            raise ValueError("margins must be strictly positive")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.same_vs_semi, self.same_vs_diff, self.semi_vs_diff)


@dataclass(frozen=True)
class LossWeights:
    """Objective mix. ``sim_scale`` multiplies similarity differences inside
    the ranking hinges (cosine-margin losses need a scale to keep gradients
    alive when training from scratch; 1.0 reproduces the plain formula)."""

    align: float = 1.0
    sim: float = 1.0
    sim_scale: float = 1.0


@dataclass
class LossBreakdown:
    """Per-step loss components; total = w_align*align + w_sim*(sim_id+sim_head)."""

    align: float
    sim_id: float
    sim_head: float
    total: float
    num_quadruplets: int
    num_align_pairs: int


def softplus_stable(x):
    """log(1 + exp(x)) as max(x, 0) + log1p(exp(-|x|)); overflow-free."""
    x = np.asarray(x)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid_stable(x):
    """Derivative of softplus_stable."""
    x = np.asarray(x)
    if x.dtype.kind != "f":
        x = x.astype(np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def align_loss(teacher_vec: np.ndarray, student_vec: np.ndarray) -> float:
    """1 - cos between a frozen teacher embedding and the identity embedding.

    Both inputs must be unit-norm within 1e-4.
    """
    t = np.asarray(teacher_vec, dtype=np.float64)
    s = np.asarray(student_vec, dtype=np.float64)
    for name, vec in (("teacher", t), ("student", s)):
        norm = np.linalg.norm(vec)
        if abs(norm - 1.0) > UNIT_NORM_TOL:
            raise ValueError(f"{name} vector is not unit-norm (||v|| = {norm:.6f})")
    return float(1.0 - t @ s)


def _check_similarity(name: str, value: float) -> None:
    if not -1.0 - SIM_RANGE_TOL <= value <= 1.0 + SIM_RANGE_TOL:
        raise ValueError(f"{name} = {value} outside [-1, 1]")


def sim_loss(s_pos: float, s_semi: Optional[float], s_neg: float, margins: Margins) -> float:
    """Hierarchical ranking loss for one anchor's similarity triple.

    ``s_semi`` is None for partial quadruplets (no state-change partner);
    only the same-vs-other term applies then.
    """
    _check_similarity("s_pos", s_pos)
    _check_similarity("s_neg", s_neg)
    g1, g2, g3 = margins.as_tuple()
    if s_semi is None:
        return float(softplus_stable(g2 + s_neg - s_pos))
    _check_similarity("s_semi", s_semi)
    return float(
        softplus_stable(g1 + s_semi - s_pos)
        + softplus_stable(g2 + s_neg - s_pos)
        + softplus_stable(g3 + s_neg - s_semi)
    )


def _quad_arrays(quadruplets: Sequence[Quadruplet], batch: int):
    qa = np.array([q.anchor for q in quadruplets], dtype=np.int64)
    qp = np.array([q.positive for q in quadruplets], dtype=np.int64)
    qn1 = np.array([q.semi_negative for q in quadruplets], dtype=np.int64)
    qn2 = np.array([q.negative for q in quadruplets], dtype=np.int64)
    present = np.array([q.semi_negative_present for q in quadruplets], dtype=bool)
    stacked = np.concatenate([qa, qp, qn2, qn1[present]])
    if stacked.size and (stacked.min() < 0 or stacked.max() >= batch):
        raise ValueError("quadruplet index out of range for this batch")
    if np.any(qn1[present] < 0):
        raise ValueError("semi_negative marked present but index < 0")
    return qa, qp, np.where(present, qn1, 0), qn2, present


def _sim_term(z: np.ndarray, quads, margins: Margins, scale: float):
    """Mean ranking loss over quadruplets on embedding matrix ``z`` and its
    gradient d(mean)/dz."""
    qa, qp, qn1, qn2, present = quads
    nq = qa.size
    dz = np.zeros_like(z)
    if nq == 0:
        return 0.0, dz
    g1, g2, g3 = margins.as_tuple()

    s_pos = np.einsum("ij,ij->i", z[qa], z[qp])
    s_semi = np.einsum("ij,ij->i", z[qa], z[qn1])
    s_neg = np.einsum("ij,ij->i", z[qa], z[qn2])

    arg1 = g1 + scale * (s_semi - s_pos)
    arg2 = g2 + scale * (s_neg - s_pos)
    arg3 = g3 + scale * (s_neg - s_semi)

    per_quad = softplus_stable(arg2) + present * (softplus_stable(arg1) + softplus_stable(arg3))
    loss = float(per_quad.mean())

    w1 = sigmoid_stable(arg1) * present * (scale / nq)
    w2 = sigmoid_stable(arg2) * (scale / nq)
    w3 = sigmoid_stable(arg3) * present * (scale / nq)
    d_pos = -(w1 + w2)
    d_semi = w1 - w3
    d_neg = w2 + w3

    np.add.at(
        dz,
        qa,
        d_pos[:, None] * z[qp] + d_semi[:, None] * z[qn1] + d_neg[:, None] * z[qn2],
    )
    np.add.at(dz, qp, d_pos[:, None] * z[qa])
    np.add.at(dz, qn1, d_semi[:, None] * z[qa])
    np.add.at(dz, qn2, d_neg[:, None] * z[qa])
    return loss, dz


def batch_objective(
    pair: EmbeddingPair,
    quadruplets: Sequence[Quadruplet],
    teacher_targets: Optional[np.ndarray],
    distill_mask: Optional[np.ndarray],
    variant: str,
    margins: Margins,
    weights: LossWeights = LossWeights(),
):
    """Combined loss over one batch plus gradients w.r.t. both embeddings.

    Routing by variant:

    - ``shared``: alignment + ranking on the single embedding (counted once
      as ``sim_id``; ``sim_head`` is 0);
    - ``dual_head_split``: alignment on z_id only, ranking on z_head only;
    - ``dual_head_both`` / ``dual_cls``: alignment + ranking on z_id and
      ranking on z_head.

    ``teacher_targets`` is a (B, d) array whose rows are consulted where
    ``distill_mask`` is set; masked rows must be finite unit vectors. Returns
    ``(LossBreakdown, d_z_id, d_z_head)`` where gradients are of the *total*.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choices {VARIANTS}")
    z_id = pair.z_id
    z_head = pair.z_head
    batch = z_id.shape[0]
    quads = _quad_arrays(quadruplets, batch)

    sim_on_id = variant in ("dual_cls", "dual_head_both", "shared")
    sim_on_head = variant in ("dual_cls", "dual_head_split", "dual_head_both")

    sim_id = 0.0
    dz_id = np.zeros_like(z_id)
    if sim_on_id:
        sim_id, d_sim_id = _sim_term(z_id, quads, margins, weights.sim_scale)
        dz_id += weights.sim * d_sim_id

    sim_head = 0.0
    dz_head = np.zeros_like(z_id)
    if sim_on_head:
        sim_head, d_sim_head = _sim_term(z_head, quads, margins, weights.sim_scale)
        dz_head += weights.sim * d_sim_head

    align = 0.0
    num_align = 0
    if distill_mask is not None:
        idx = np.flatnonzero(np.asarray(distill_mask, dtype=bool))
        num_align = int(idx.size)
        if num_align:
            if teacher_targets is None:
                raise ValueError("distill_mask set but teacher_targets is None")
            targets = np.asarray(teacher_targets)
            if targets.shape != z_id.shape:
                raise ValueError(
                    f"teacher_targets shape {targets.shape} != embeddings {z_id.shape}"
                )
            sel = targets[idx]
            if not np.isfinite(sel).all():
                raise ValueError("missing (non-finite) teacher target for a flagged sample")
            cos = np.einsum("ij,ij->i", sel.astype(z_id.dtype, copy=False), z_id[idx])
            align = float(np.mean(1.0 - cos))
            dz_id[idx] += weights.align * (-sel / num_align).astype(z_id.dtype, copy=False)

    total = weights.align * align + weights.sim * (sim_id + sim_head)
    breakdown = LossBreakdown(
        align=align,
        sim_id=sim_id,
        sim_head=sim_head,
        total=float(total),
        num_quadruplets=len(quadruplets),
        num_align_pairs=num_align,
    )
    return breakdown, dz_id, dz_head
