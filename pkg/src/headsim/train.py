"""Seeded training loop: mixed batches, online mining, AdamW, checkpoints.

Every stochastic choice is keyed by (master seed, purpose, absolute step),
so training is resumable from any epoch checkpoint with an identical
continuation of the data-order stream, and reruns are bit-reproducible on
the same backend.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .config import ExperimentConfig, SplitConfig, config_hash
from .manifest import load_image, read_jsonl
from .model import (
    EncoderConfig,
    encode,
    encode_backward,
    encode_identity,
    load_checkpoint,
    parameter_init,
    save_checkpoint,
)
from .objectives import LossWeights, batch_objective
from .optim import AdamW
from .relations import SampleMeta, build_quadruplets, mixed_batch
from .seeding import derive_rng, stable_u64
from .synthworld import FactorSpec, OracleTeacher, head_mask_for, randomize_background_image

_SAMPLE_ID_RE = re.compile(r"^s(\d+)_(\d+)_(\d+)$")


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite loss; carries the path of the dumped batch."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


@dataclass
class SamplePool:
    """A manifest loaded into memory: metadata plus uint8 images."""

    metas: list[SampleMeta]
    images: np.ndarray  # (n, S, S, 3) uint8
    masks: Optional[np.ndarray] = None  # (n, S, S) bool, when recoverable

    def __len__(self) -> int:
        return len(self.metas)


def load_pool(manifest_path, world: Optional[FactorSpec] = None) -> SamplePool:
    """Read a sample manifest and its PNGs.

    When the generating world spec is supplied and sample ids parse as
    world-grid ids, head masks are recomputed so background augmentation can
    run; otherwise masks stay None and augmentation is skipped.
    """
    root = os.path.dirname(os.path.abspath(manifest_path))
    _, records = read_jsonl(manifest_path)
    if not records:
        raise ValueError(f"empty manifest {manifest_path}")
    metas = []
    images = []
    masks = []
    masks_ok = world is not None
    for rec in records:
        metas.append(
            SampleMeta(
                sample_id=rec["sample_id"],
                identity=int(rec["identity"]),
                appearance=int(rec["appearance"]),
                video_id=rec.get("video_id", ""),
                face_visible=bool(rec.get("face_visible", True)),
            )
        )
        img = load_image(os.path.join(root, rec["image_path"]))
        images.append(np.round(img * 255.0).astype(np.uint8))
        if masks_ok:
            m = _SAMPLE_ID_RE.match(rec["sample_id"])
            if m is None:
                masks_ok = False
            else:
                masks.append(head_mask_for(world, int(m.group(1)), int(m.group(2)), int(m.group(3))))
    return SamplePool(
        metas=metas,
        images=np.stack(images),
        masks=np.stack(masks) if masks_ok and masks else None,
    )


@dataclass
class WorldSplit:
    """Index sets over one pool: training, identity-holdout evaluation, and
    the distillation sample-holdout (train identities, unseen samples)."""

    train_idx: np.ndarray
    eval_idx: np.ndarray
    distill_eval_idx: np.ndarray
    holdout_identities: list[int]

    def to_json(self) -> dict:
        return {
            "train_idx": self.train_idx.tolist(),
            "eval_idx": self.eval_idx.tolist(),
            "distill_eval_idx": self.distill_eval_idx.tolist(),
            "holdout_identities": list(map(int, self.holdout_identities)),
        }

    @classmethod
    def from_json(cls, data: dict) -> "WorldSplit":
        return cls(
            train_idx=np.array(data["train_idx"], dtype=np.int64),
            eval_idx=np.array(data["eval_idx"], dtype=np.int64),
            distill_eval_idx=np.array(data["distill_eval_idx"], dtype=np.int64),
            holdout_identities=list(data["holdout_identities"]),
        )


def split_pool(metas: list[SampleMeta], split: SplitConfig, seed: int) -> WorldSplit:
    """Deterministic holdout split keyed by the master seed."""
    identities = sorted({m.identity for m in metas})
    k = min(split.holdout_identities, max(len(identities) - 2, 0))
    rng = derive_rng(seed, "split-identities")
    holdout = sorted(int(u) for u in rng.choice(identities, size=k, replace=False)) if k else []
    holdout_set = set(holdout)

    eval_idx = [i for i, m in enumerate(metas) if m.identity in holdout_set]
    train_candidates = [i for i, m in enumerate(metas) if m.identity not in holdout_set]

    by_state: dict[tuple[int, int], list[int]] = {}
    for i in train_candidates:
        by_state.setdefault((metas[i].identity, metas[i].appearance), []).append(i)

    distill_eval = []
    train = []
    for key in sorted(by_state):
        group = by_state[key]
        n_hold = int(len(group) * split.holdout_sample_fraction)
        grng = derive_rng(seed, "split-samples", *key)
        held = set(grng.choice(group, size=n_hold, replace=False).tolist()) if n_hold else set()
        for i in group:
            (distill_eval if i in held else train).append(i)

    return WorldSplit(
        train_idx=np.array(sorted(train), dtype=np.int64),
        eval_idx=np.array(sorted(eval_idx), dtype=np.int64),
        distill_eval_idx=np.array(sorted(distill_eval), dtype=np.int64),
        holdout_identities=holdout,
    )


def batch_fingerprint(head_ids: list[str], face_ids: list[str]) -> str:
    import hashlib

    joined = ",".join(head_ids) + "|" + ",".join(face_ids)
    return hashlib.sha256(joined.encode("utf-8")).hexdigest()[:16]


TeacherFn = Callable[[int], np.ndarray]


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    optimizer: AdamW
    history: list[dict]
    checkpoint_paths: list[str]
    final_checkpoint: str
    log_path: str


def _distill_flags(metas: list[SampleMeta], gate: str) -> np.ndarray:
    if gate == "none":
        return np.zeros(len(metas), dtype=bool)
    if gate == "all":
        return np.ones(len(metas), dtype=bool)
    return np.array([m.face_visible for m in metas], dtype=bool)


def train_model(
    cfg: ExperimentConfig,
    pool: SamplePool,
    out_dir,
    *,
    face_pool: Optional[SamplePool] = None,
    split: Optional[WorldSplit] = None,
    teacher: Optional[TeacherFn] = None,
    resume: Optional[str] = None,
    routing_audit: bool = False,
    log_name: str = "train_log.jsonl",
) -> TrainResult:
    """Train an encoder on a sample pool; see the module docstring for the
    determinism contract.

    ``teacher`` maps an identity id to a unit target vector (defaults to the
    seeded oracle teacher over the pool's identities); pass a custom callable
    to distill from an external model. With ``routing_audit`` every step also
    logs the ranking-only gradient magnitude on the identity projection,
    which must stay 0 for the split variant.
    """
    os.makedirs(out_dir, exist_ok=True)
    enc = cfg.encoder
    if split is None:
        split = split_pool(pool.metas, cfg.split, cfg.seed)

    train_idx = split.train_idx
    if train_idx.size == 0:
        raise ValueError("empty training split")
    head_metas = [pool.metas[i] for i in train_idx]

    if teacher is None:
        num_ids = max(m.identity for m in pool.metas) + 1
        oracle = OracleTeacher.create(num_ids, dim=enc.embed_dim, seed=cfg.seed)
        teacher = oracle.embed

    head_fraction = cfg.head_fraction
    face_metas: list[SampleMeta] = face_pool.metas if face_pool is not None else []
    if face_pool is None and head_fraction < 1.0:
        head_fraction = 1.0  # no face pool available: all-head batches

    heads_per_batch = int(np.ceil(head_fraction * cfg.batch_size))
    steps_per_epoch = cfg.steps_per_epoch or max(1, len(head_metas) // max(heads_per_batch, 1))
    total_steps = steps_per_epoch * cfg.epochs

    if resume is not None:
        ck = load_checkpoint(resume)
        if ck.config != enc:
            raise ValueError("resume checkpoint encoder config differs from the experiment config")
        params = {k: np.array(v) for k, v in ck.params.items()}
        optimizer = AdamW(params, cfg.optimizer)
        if ck.opt_m is not None:
            optimizer.load_state(ck.opt_m, ck.opt_v, ck.opt_count)
        start_epoch = ck.epoch
    else:
        params = parameter_init(enc, seed=cfg.seed)
        optimizer = AdamW(params, cfg.optimizer)
        start_epoch = 0

    chash = config_hash(cfg)
    log_path = os.path.join(out_dir, log_name)
    history: list[dict] = []
    ckpt_paths: list[str] = []
    audit_weights = LossWeights(align=0.0, sim=cfg.loss.sim)

    with open(log_path, "w", encoding="utf-8") as log:
        log.write(json.dumps({"_meta": {"config_hash": chash, "seed": cfg.seed}}) + "\n")
        for epoch in range(start_epoch, cfg.epochs):
            for step_in_epoch in range(steps_per_epoch):
                step = epoch * steps_per_epoch + step_in_epoch
                record = _train_step(
                    cfg,
                    enc,
                    params,
                    optimizer,
                    pool,
                    head_metas,
                    train_idx,
                    face_pool,
                    face_metas,
                    head_fraction,
                    teacher,
                    step,
                    total_steps,
                    routing_audit,
                    audit_weights,
                    out_dir,
                )
                record["epoch"] = epoch
                history.append(record)
                log.write(json.dumps(record, sort_keys=True) + "\n")
            path = os.path.join(out_dir, f"ckpt_epoch{epoch + 1:03d}.npz")
            save_checkpoint(
                path,
                enc,
                params,
                opt_m=optimizer.m,
                opt_v=optimizer.v,
                opt_count=optimizer.count,
                epoch=epoch + 1,
                step=(epoch + 1) * steps_per_epoch,
                extra={"config_hash": chash, "steps_per_epoch": steps_per_epoch},
            )
            ckpt_paths.append(path)

    final_path = os.path.join(out_dir, "final.npz")
    save_checkpoint(
        final_path,
        enc,
        params,
        opt_m=optimizer.m,
        opt_v=optimizer.v,
        opt_count=optimizer.count,
        epoch=cfg.epochs,
        step=total_steps,
        extra={"config_hash": chash, "steps_per_epoch": steps_per_epoch},
    )
    return TrainResult(
        params=params,
        optimizer=optimizer,
        history=history,
        checkpoint_paths=ckpt_paths,
        final_checkpoint=final_path,
        log_path=log_path,
    )


def _train_step(
    cfg,
    enc: EncoderConfig,
    params,
    optimizer,
    pool,
    head_metas,
    train_idx,
    face_pool,
    face_metas,
    head_fraction,
    teacher,
    step,
    total_steps,
    routing_audit,
    audit_weights,
    out_dir,
):
    plan = mixed_batch(
        head_metas,
        face_metas,
        cfg.batch_size,
        head_fraction,
        derive_rng(cfg.seed, "batch", step),
    )
    head_global = train_idx[plan.head_indices]
    batch_head_metas = [head_metas[i] for i in plan.head_indices]
    images = [pool.images[head_global].astype(np.float32) / 255.0]
    batch_metas = list(batch_head_metas)
    masks = [pool.masks[head_global] if pool.masks is not None else None]
    if plan.face_indices.size:
        images.append(face_pool.images[plan.face_indices].astype(np.float32) / 255.0)
        batch_metas.extend(face_pool.metas[i] for i in plan.face_indices)
        masks.append(face_pool.masks[plan.face_indices] if face_pool.masks is not None else None)
    images = np.concatenate(images) if len(images) > 1 else images[0]

    if cfg.background_randomization:
        offset = 0
        for group in masks:
            if group is not None:
                for slot in range(group.shape[0]):
                    images[offset + slot] = randomize_background_image(
                        images[offset + slot],
                        group[slot],
                        stable_u64(cfg.seed, "bg-aug", step, offset + slot) % 2**32,
                    )
            offset += group.shape[0] if group is not None else 0

    n_head = len(batch_head_metas)
    distill = np.zeros(len(batch_metas), dtype=bool)
    distill[:n_head] = _distill_flags(batch_head_metas, cfg.distill_gate)
    distill[n_head:] = True  # face-pool samples are distillation-only
    targets = np.full((len(batch_metas), enc.embed_dim), np.nan, dtype=np.float64)
    for i in np.flatnonzero(distill):
        targets[i] = teacher(batch_metas[i].identity)

    pair, cache = encode(enc, params, images, want_cache=True)

    mine_z = pair.z_id if cfg.mining_embedding == "identity" else pair.z_head
    head_z = mine_z[:n_head]
    sims = head_z @ head_z.T
    quads = build_quadruplets(
        batch_head_metas,
        sims,
        cfg.mining_mode,
        hardest_positive=cfg.hardest_positive,
        rng=derive_rng(cfg.seed, "mining", step) if cfg.mining_mode == "random" else None,
    )

    breakdown, dz_id, dz_head = batch_objective(
        pair, quads, targets, distill, enc.variant, cfg.margins, cfg.loss
    )
    if not np.isfinite(breakdown.total):
        dump_path = os.path.join(out_dir, f"diverged_step{step:06d}.json")
        with open(dump_path, "w", encoding="utf-8") as fh:
            json.dump(
                {
                    "step": step,
                    "sample_ids": [m.sample_id for m in batch_metas],
                    "breakdown": vars(breakdown),
                },
                fh,
                indent=2,
            )
        raise TrainingDiverged(f"non-finite loss at step {step}", dump_path)

    grads = encode_backward(enc, params, cache, dz_id, dz_head)
    lr = cfg.optimizer.lr_at(step, total_steps)
    optimizer.step(params, grads, lr=lr)

    record = {
        "step": step,
        "lr": lr,
        "align": breakdown.align,
        "sim_id": breakdown.sim_id,
        "sim_head": breakdown.sim_head,
        "total": breakdown.total,
        "num_quadruplets": breakdown.num_quadruplets,
        "num_align_pairs": breakdown.num_align_pairs,
        "batch_hash": batch_fingerprint(
            [m.sample_id for m in batch_head_metas],
            [m.sample_id for m in batch_metas[n_head:]],
        ),
    }
    if routing_audit:
        _, adz_id, adz_head = batch_objective(
            pair, quads, targets, distill, enc.variant, cfg.margins, audit_weights
        )
        agrads = encode_backward(enc, params, cache, adz_id, adz_head)
        record["id_proj_sim_grad"] = float(
            max(np.abs(agrads["proj_id.weight"]).max(), np.abs(agrads["proj_id.bias"]).max())
        )
    return record


def embed_pool(
    enc: EncoderConfig, params, images_uint8: np.ndarray, batch_size: int = 128
) -> np.ndarray:
    """Identity embeddings for a full pool, batched; inference never touches
    the head projection."""
    outs = []
    for start in range(0, images_uint8.shape[0], batch_size):
        chunk = images_uint8[start : start + batch_size].astype(np.float32) / 255.0
        outs.append(encode_identity(enc, params, chunk))
    return np.concatenate(outs, axis=0)
