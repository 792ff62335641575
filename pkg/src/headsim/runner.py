"""Experiment orchestration behind the CLI verbs.

Every artifact embeds the resolved config hash and master seed (JSONL meta
records, ``# key=value`` CSV comment lines, ``meta`` blocks in JSON
reports), and all writers are canonical, so a rerun with an identical
config reproduces byte-identical manifests and reports.
"""

from __future__ import annotations

import dataclasses
import json
import os
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .config import ExperimentConfig, config_hash
from .manifest import load_image, read_jsonl, save_image, write_jsonl
from .metrics import (
    PairLimits,
    build_eval_pairs,
    mean_score_by_relation,
    ordering_satisfaction,
    retrieval_topk,
    roc,
    sample_ordering_triples,
)
from .model import load_checkpoint
from .pipeline import STAGES, Detection, FrameRecord, run_pipeline
from .relations import SampleMeta
from .seeding import derive_rng
from .synthworld import (
    FrameWorldSpec,
    OracleTeacher,
    generate_frame_world,
    generate_world,
    noisy_identity_embedder,
)
from .train import WorldSplit, embed_pool, load_pool, split_pool, train_model

ABLATION_VARIANTS = ("shared", "dual_head_split", "dual_head_both", "dual_cls")

_LOSSES_ON_ID = {
    "shared": "align+sim",
    "dual_head_split": "align",
    "dual_head_both": "align+sim",
    "dual_cls": "align+sim",
}
_NUM_CLS = {"shared": 1, "dual_head_split": 1, "dual_head_both": 1, "dual_cls": 2}


def default_out_dir(verb: str, cfg: ExperimentConfig, explicit: Optional[str] = None) -> str:
    if explicit:
        return explicit
    root = os.environ.get("HEADSIM_OUT", "runs")
    return os.path.join(root, f"{verb}_{config_hash(cfg)}")


def _meta(cfg: ExperimentConfig, **extra) -> dict:
    meta = {"config_hash": config_hash(cfg), "seed": cfg.seed, "kernel_backend": kernels.backend_name()}
    meta.update(extra)
    return meta


def write_json(path, obj) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def cmd_synth(cfg: ExperimentConfig, out_dir, *, write_frames: bool = False) -> dict:
    """Generate the sample world (and optionally the frame world) on disk."""
    os.makedirs(out_dir, exist_ok=True)
    samples, manifest = generate_world(cfg.world)
    for sample, record in zip(samples, manifest):
        save_image(os.path.join(out_dir, record["image_path"]), sample.image)
    manifest_path = os.path.join(out_dir, "world_manifest.jsonl")
    write_jsonl(manifest_path, manifest, meta=_meta(cfg, kind="world_manifest"))

    per_identity: dict[str, dict] = {}
    for rec in manifest:
        ident = per_identity.setdefault(str(rec["identity"]), {"samples": 0, "states": {}})
        ident["samples"] += 1
        state = str(rec["appearance"])
        ident["states"][state] = ident["states"].get(state, 0) + 1
    summary = {
        "meta": _meta(cfg, kind="world_summary"),
        "total_samples": len(manifest),
        "num_identities": cfg.world.num_identities,
        "states_per_identity": cfg.world.states_per_identity,
        "samples_per_state": cfg.world.samples_per_state,
        "face_visible": int(sum(r["face_visible"] for r in manifest)),
        "per_identity": per_identity,
    }
    summary_path = os.path.join(out_dir, "world_summary.json")
    write_json(summary_path, summary)

    result = {"manifest": manifest_path, "summary": summary_path, "num_samples": len(manifest)}
    if write_frames:
        frame_spec = FrameWorldSpec(factors=cfg.world)
        records = generate_frame_world(frame_spec)
        frame_records = []
        for rec in records:
            rel = f"frames/{rec['video_id']}_{rec['frame_index']:05d}.png"
            save_image(os.path.join(out_dir, rel), rec["image"])
            frame_records.append(
                {
                    "video_id": rec["video_id"],
                    "frame_index": rec["frame_index"],
                    "image_path": rel,
                    "detections": rec["detections"],
                }
            )
        frame_manifest = os.path.join(out_dir, "frame_manifest.jsonl")
        write_jsonl(frame_manifest, frame_records, meta=_meta(cfg, kind="frame_manifest"))
        result["frame_manifest"] = frame_manifest
        result["num_frames"] = len(frame_records)
    return result


def cmd_train(
    cfg: ExperimentConfig,
    manifest_path,
    out_dir,
    *,
    face_manifest_path=None,
    resume=None,
    routing_audit: bool = False,
) -> dict:
    """Train on a world manifest; writes split, per-step log, checkpoints."""
    os.makedirs(out_dir, exist_ok=True)
    pool = load_pool(manifest_path, world=cfg.world)
    face_pool = load_pool(face_manifest_path, world=None) if face_manifest_path else None
    split = split_pool(pool.metas, cfg.split, cfg.seed)
    write_json(os.path.join(out_dir, "split.json"), {"meta": _meta(cfg), **split.to_json()})

    result = train_model(
        cfg,
        pool,
        out_dir,
        face_pool=face_pool,
        split=split,
        resume=resume,
        routing_audit=routing_audit,
    )
    summary = {
        "meta": _meta(cfg, kind="train_summary"),
        "steps": len(result.history),
        "final_total": result.history[-1]["total"] if result.history else None,
        "final_checkpoint": os.path.basename(result.final_checkpoint),
        "log": os.path.basename(result.log_path),
    }
    write_json(os.path.join(out_dir, "train_summary.json"), summary)
    return {
        "checkpoint": result.final_checkpoint,
        "log": result.log_path,
        "split": os.path.join(out_dir, "split.json"),
        "history": result.history,
    }


def _write_roc_csv(path, result, cfg: ExperimentConfig, protocol: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# config_hash={config_hash(cfg)} seed={cfg.seed} protocol={protocol}\n")
        fh.write("threshold,far,tpr\n")
        for t, far, tpr in zip(result.thresholds, result.far, result.tpr):
            fh.write(f"{float(t)!r},{float(far)!r},{float(tpr)!r}\n")


def _vr_json(vr_map: dict) -> dict:
    return {f"{target:g}": (None if value is None else value) for target, value in vr_map.items()}


def evaluate_embeddings(
    cfg: ExperimentConfig,
    metas: Sequence[SampleMeta],
    embeddings: np.ndarray,
    protocols: Sequence[str],
) -> tuple[dict, dict]:
    """Protocol metrics over already-computed identity embeddings; returns
    (report fragment, RocResult per protocol)."""
    limits = PairLimits(cfg.eval.max_positive_pairs, cfg.eval.max_negative_pairs)
    report: dict = {"protocols": {}}
    rocs = {}
    for protocol in protocols:
        pairs = build_eval_pairs(
            metas, embeddings, protocol, limits, derive_rng(cfg.seed, "eval-pairs", protocol)
        )
        result = roc(pairs)
        rocs[protocol] = result
        report["protocols"][protocol] = {
            "auc": result.auc,
            "vr_at_far": _vr_json(result.vr_at_far),
            "num_positive_pairs": result.num_positives,
            "num_negative_pairs": result.num_negatives,
        }
    triples = sample_ordering_triples(
        metas, embeddings, cfg.eval.num_triples, derive_rng(cfg.seed, "eval-triples")
    )
    report["ordering"] = {
        "num_triples": int(triples.shape[0]),
        "satisfaction": ordering_satisfaction(triples),
    }
    means = mean_score_by_relation(metas, embeddings, derive_rng(cfg.seed, "eval-means"))
    report["relation_mean_scores"] = {rel.tag: means[rel] for rel in means}
    return report, rocs


def cmd_eval(
    cfg: ExperimentConfig,
    checkpoint_path,
    manifest_path,
    out_dir,
    *,
    protocols: Sequence[str] = ("identity", "appearance"),
    split_path=None,
    plot: bool = True,
) -> dict:
    """Embed the held-out identities with z_id and run the metric suite."""
    os.makedirs(out_dir, exist_ok=True)
    ck = load_checkpoint(checkpoint_path)
    pool = load_pool(manifest_path, world=cfg.world)
    if split_path:
        with open(split_path, "r", encoding="utf-8") as fh:
            split = WorldSplit.from_json(json.load(fh))
    else:
        split = split_pool(pool.metas, cfg.split, cfg.seed)
    if split.eval_idx.size == 0:
        raise ValueError("no held-out identities in the split")

    eval_metas = [pool.metas[i] for i in split.eval_idx]
    eval_emb = embed_pool(ck.config, ck.params, pool.images[split.eval_idx], cfg.eval.batch_size)

    report, rocs = evaluate_embeddings(cfg, eval_metas, eval_emb, protocols)
    report["meta"] = _meta(
        cfg, kind="eval_report", checkpoint=os.path.basename(str(checkpoint_path))
    )
    report["num_eval_samples"] = len(eval_metas)
    report["holdout_identities"] = split.holdout_identities

    for protocol, result in rocs.items():
        _write_roc_csv(os.path.join(out_dir, f"roc_{protocol}.csv"), result, cfg, protocol)

    # Distillation preservation on held-out samples of training identities.
    distill_idx = np.array(
        [i for i in split.distill_eval_idx if pool.metas[i].face_visible], dtype=np.int64
    )
    if distill_idx.size:
        teacher = OracleTeacher.create(
            max(m.identity for m in pool.metas) + 1, dim=ck.config.embed_dim, seed=cfg.seed
        )
        demb = embed_pool(ck.config, ck.params, pool.images[distill_idx], cfg.eval.batch_size)
        targets = teacher.embed_many([pool.metas[i].identity for i in distill_idx])
        cosines = np.einsum("ij,ij->i", demb.astype(np.float64), targets)
        report["distill"] = {
            "num_samples": int(distill_idx.size),
            "mean_teacher_cosine": float(cosines.mean()),
            "min_teacher_cosine": float(cosines.min()),
        }
    else:
        report["distill"] = {"num_samples": 0, "mean_teacher_cosine": None}

    k = min(cfg.eval.retrieval_k, len(eval_metas) - 1)
    if k >= 1:
        order, scores = retrieval_topk(
            eval_emb, eval_emb, k, self_indices=np.arange(len(eval_metas))
        )
        hit = np.array(
            [
                [eval_metas[j].identity == eval_metas[i].identity for j in order[i]]
                for i in range(len(eval_metas))
            ]
        )
        report["retrieval"] = {
            "k": int(k),
            "num_queries": len(eval_metas),
            "same_identity_precision_at_k": float(hit.mean()),
            "same_identity_precision_at_1": float(hit[:, 0].mean()),
        }
        retrieval_rows = [
            {
                "query": eval_metas[i].sample_id,
                "results": [eval_metas[int(j)].sample_id for j in order[i]],
                "scores": [float(s) for s in scores[i]],
            }
            for i in range(len(eval_metas))
        ]
        write_jsonl(
            os.path.join(out_dir, "retrieval_topk.jsonl"), retrieval_rows, meta=_meta(cfg)
        )

    ids = np.array([m.sample_id for m in eval_metas])
    np.savez_compressed(
        os.path.join(out_dir, "embeddings.npz"),
        sample_ids=ids,
        embeddings=eval_emb,
        config_hash=np.array(config_hash(cfg)),
    )

    report_path = os.path.join(out_dir, "report.json")
    write_json(report_path, report)
    if plot:
        plot_roc_curves(
            [os.path.join(out_dir, f"roc_{p}.csv") for p in protocols],
            os.path.join(out_dir, "roc.png"),
            labels=list(protocols),
        )
    return report


def cmd_ablate(cfg: ExperimentConfig, manifest_path, out_dir) -> dict:
    """Train/evaluate all four encoder variants on an identical batch stream
    and emit the comparison table."""
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    hash_streams = {}
    audits = {}
    for variant in ABLATION_VARIANTS:
        vcfg = dataclasses.replace(cfg, encoder=dataclasses.replace(cfg.encoder, variant=variant))
        vdir = os.path.join(out_dir, variant)
        train_out = cmd_train(vcfg, manifest_path, vdir, routing_audit=True)
        hash_streams[variant] = [rec["batch_hash"] for rec in train_out["history"]]
        audits[variant] = max(rec.get("id_proj_sim_grad", 0.0) for rec in train_out["history"])
        report = cmd_eval(
            vcfg,
            train_out["checkpoint"],
            manifest_path,
            os.path.join(vdir, "eval"),
            protocols=("identity",),
            split_path=train_out["split"],
            plot=False,
        )
        identity = report["protocols"]["identity"]
        rows.append(
            {
                "variant": variant,
                "num_cls_tokens": _NUM_CLS[variant],
                "losses_on_identity": _LOSSES_ON_ID[variant],
                "vr_at_far_1e-2": identity["vr_at_far"]["0.01"],
                "vr_at_far_1e-3": identity["vr_at_far"]["0.001"],
                "vr_at_far_1e-4": identity["vr_at_far"]["0.0001"],
                "auc": identity["auc"],
                "ordering_satisfaction": report["ordering"]["satisfaction"],
                "max_id_proj_sim_grad": audits[variant],
            }
        )

    streams = list(hash_streams.values())
    identical = all(s == streams[0] for s in streams[1:])
    if not identical:
        raise RuntimeError("ablation variants consumed different batch streams")

    table = {
        "meta": _meta(cfg, kind="ablation_table"),
        "batch_stream_identical": identical,
        "rows": rows,
    }
    write_json(os.path.join(out_dir, "ablation.json"), table)

    columns = list(rows[0].keys())
    csv_path = os.path.join(out_dir, "ablation.csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(f"# config_hash={config_hash(cfg)} seed={cfg.seed}\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(str(row[c]) for c in columns) + "\n")

    md_path = os.path.join(out_dir, "ablation.md")
    with open(md_path, "w", encoding="utf-8") as fh:
        fh.write("| " + " | ".join(columns) + " |\n")
        fh.write("|" + "---|" * len(columns) + "\n")
        for row in rows:
            cells = [
                f"{row[c]:.4f}" if isinstance(row[c], float) else str(row[c]) for c in columns
            ]
            fh.write("| " + " | ".join(cells) + " |\n")
    return table


def load_frame_records(frame_manifest_path) -> list[FrameRecord]:
    root = os.path.dirname(os.path.abspath(frame_manifest_path))
    _, records = read_jsonl(frame_manifest_path)
    frames = []
    for rec in records:
        detections = [
            Detection(
                head_box=tuple(d["head_box"]),
                face_box=tuple(d["face_box"]) if d.get("face_box") else None,
                identity=d.get("identity"),
                appearance=d.get("appearance"),
            )
            for d in rec["detections"]
        ]
        image = load_image(os.path.join(root, rec["image_path"])) if rec.get("image_path") else None
        hist = np.array(rec["hsv_hist"], dtype=np.float64) if rec.get("hsv_hist") else None
        frames.append(
            FrameRecord(
                video_id=rec["video_id"],
                frame_index=int(rec["frame_index"]),
                detections=detections,
                image=image,
                hsv_hist=hist,
            )
        )
    return frames


def cmd_pipeline(cfg: ExperimentConfig, frame_manifest_path, out_dir, *, stage: str = "relations") -> dict:
    """Run the dataset-construction pipeline over a frame manifest.

    The clustering stage embeds best-face crops with the seeded noisy oracle
    stand-in, which needs ground-truth identity annotations on detections;
    manifests lacking them must plug a real embedder via
    :func:`headsim.pipeline.run_pipeline` directly.
    """
    os.makedirs(out_dir, exist_ok=True)
    frames = load_frame_records(frame_manifest_path)

    embed_fn = None
    if STAGES.index(stage) >= STAGES.index("cluster"):
        identities = [
            d.identity for f in frames for d in f.detections if d.identity is not None
        ]
        if not identities:
            raise ValueError(
                "frame manifest has no identity annotations; use run_pipeline with a real embedder"
            )
        teacher = OracleTeacher.create(max(identities) + 1, dim=128, seed=cfg.seed)
        noisy = noisy_identity_embedder(teacher, cfg.teacher_noise, cfg.seed)

        def embed_fn(segment, best_frame):
            for f in segment.frames:
                if f.frame_index == best_frame and f.identity is not None:
                    return noisy(f.identity, segment.segment_id)
            raise ValueError(f"segment {segment.segment_id} best frame lacks identity annotation")

    result = run_pipeline(frames, embed_fn, cfg.pipeline, until=stage)

    meta = _meta(cfg, kind="pipeline", stage=stage)
    write_jsonl(
        os.path.join(out_dir, "shots.jsonl"),
        [dataclasses.asdict(s) for s in result.shots],
        meta=meta,
    )
    seg_records = []
    for i, seg in enumerate(result.segments):
        rec = {
            "segment_id": seg.segment_id,
            "video_id": seg.video_id,
            "shot_id": seg.shot_id,
            "num_frames": len(seg),
            "face_visible_count": seg.face_visible_count,
            "frames": [f.frame_index for f in seg.frames],
        }
        if i < len(result.best_face_frames):
            rec["best_face_frame"] = result.best_face_frames[i]
        if i < len(result.cluster_ids):
            rec["cluster_id"] = int(result.cluster_ids[i])
        seg_records.append(rec)
    write_jsonl(os.path.join(out_dir, "segments.jsonl"), seg_records, meta=meta)
    if result.metas:
        write_jsonl(
            os.path.join(out_dir, "metas.jsonl"),
            [
                {
                    "sample_id": m.sample_id,
                    "identity": m.identity,
                    "appearance": m.appearance,
                    "video_id": m.video_id,
                    "face_visible": m.face_visible,
                }
                for m in result.metas
            ],
            meta=meta,
        )
    write_json(
        os.path.join(out_dir, "stage_counts.json"), {"meta": meta, **result.stage_counts}
    )
    return result.stage_counts


def plot_roc_curves(csv_paths, out_png, labels=None) -> str:
    """Minimal ROC line plot; the CSV stays the source of truth."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = labels or [os.path.basename(str(p)) for p in csv_paths]
    fig, ax = plt.subplots(figsize=(5, 4))
    for path, label in zip(csv_paths, labels):
        far, tpr = [], []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                if line.startswith("#") or line.startswith("threshold"):
                    continue
                _, f, t = line.strip().split(",")
                far.append(float(f))
                tpr.append(float(t))
        ax.plot([0.0] + far, [0.0] + tpr, label=label)
    ax.set_xscale("log")
    ax.set_xlim(1e-5, 1.0)
    ax.set_xlabel("false accept rate")
    ax.set_ylabel("verification rate")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png
