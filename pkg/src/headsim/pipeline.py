"""Weak-supervision dataset construction over frame/detection manifests.

Stages (each usable standalone, composed by :func:`run_pipeline`):

1. shot segmentation from HSV histogram distances between consecutive
   frames (adaptive mean + k*sigma threshold with an absolute floor);
2. greedy IoU tracking of head detections within each shot;
3. segment filtering by length and face-visibility mix;
4. best-face frame selection (face area strictly above half the head box);
5. average-linkage agglomerative identity clustering of best-face
   embeddings under cosine similarity;
6. relation induction: identity label = cluster id, appearance label =
   segment id, so downstream relation logic reproduces the tier structure.

All stages are deterministic for fixed inputs and thresholds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels
from .relations import SampleMeta

Box = tuple[float, float, float, float]

HIST_BINS = (8, 4, 4)  # (H, S, V)


@dataclass
class Detection:
    head_box: Box
    face_box: Optional[Box] = None
    identity: Optional[int] = None  # ground truth when available (synthetic worlds)
    appearance: Optional[int] = None


@dataclass
class FrameRecord:
    video_id: str
    frame_index: int
    detections: list[Detection] = field(default_factory=list)
    image: Optional[np.ndarray] = None
    hsv_hist: Optional[np.ndarray] = None

    def histogram(self) -> np.ndarray:
        if self.hsv_hist is None:
            if self.image is None:
                raise ValueError(f"frame {self.video_id}:{self.frame_index} has no image or histogram")
            self.hsv_hist = hsv_histogram(self.image)
        return self.hsv_hist


@dataclass
class Shot:
    video_id: str
    start_frame: int  # inclusive
    end_frame: int  # inclusive


@dataclass
class TrackFrame:
    frame_index: int
    head_box: Box
    face_box: Optional[Box] = None
    identity: Optional[int] = None
    appearance: Optional[int] = None


@dataclass
class TrackSegment:
    segment_id: str
    video_id: str
    shot_id: int
    frames: list[TrackFrame]

    @property
    def face_visible_count(self) -> int:
        return sum(1 for f in self.frames if f.face_box is not None)

    def __len__(self) -> int:
        return len(self.frames)


def hsv_histogram(image: np.ndarray, bins=HIST_BINS) -> np.ndarray:
    """L1-normalized 3-D HSV histogram of an RGB image in [0, 1], flattened."""
    if image.size == 0:
        raise ValueError("empty image")
    flat = np.ascontiguousarray(image.reshape(-1, 3), dtype=np.float32)
    hsv = kernels.rgb_to_hsv(flat)
    hist, _ = np.histogramdd(hsv, bins=bins, range=((0, 1), (0, 1), (0, 1)))
    return (hist / flat.shape[0]).reshape(-1)


def detect_shots(frames: Sequence[FrameRecord], k_sigma: float = 3.0, floor: float = 0.2) -> list[Shot]:
    """Partition one video's frames into shots at histogram-distance spikes.

    A boundary is declared between consecutive frames whose histogram L1
    distance exceeds max(mean + k_sigma * std, floor) of all consecutive
    distances in the video; near-constant videos therefore stay one shot.
    """
    if not frames:
        raise ValueError("no frames")
    video_ids = {f.video_id for f in frames}
    if len(video_ids) != 1:
        raise ValueError(f"detect_shots expects one video, got {sorted(video_ids)}")
    video_id = frames[0].video_id
    frames = sorted(frames, key=lambda f: f.frame_index)

    if len(frames) == 1:
        return [Shot(video_id, frames[0].frame_index, frames[0].frame_index)]

    hists = np.stack([f.histogram() for f in frames])
    dists = np.abs(np.diff(hists, axis=0)).sum(axis=1)
    threshold = max(float(dists.mean() + k_sigma * dists.std()), floor)

    shots = []
    start = frames[0].frame_index
    for i, d in enumerate(dists):
        if d > threshold:
            shots.append(Shot(video_id, start, frames[i].frame_index))
            start = frames[i + 1].frame_index
    shots.append(Shot(video_id, start, frames[-1].frame_index))
    return shots


def iou(box_a: Box, box_b: Box) -> float:
    """Intersection over union of two (x0, y0, x1, y1) boxes; 0 on zero union."""
    for box in (box_a, box_b):
        if box[2] < box[0] or box[3] < box[1]:
            raise ValueError(f"malformed box {box}")
    ix = max(0.0, min(box_a[2], box_b[2]) - max(box_a[0], box_b[0]))
    iy = max(0.0, min(box_a[3], box_b[3]) - max(box_a[1], box_b[1]))
    inter = ix * iy
    area_a = (box_a[2] - box_a[0]) * (box_a[3] - box_a[1])
    area_b = (box_b[2] - box_b[0]) * (box_b[3] - box_b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def track_heads(
    frames: Sequence[FrameRecord],
    iou_threshold: float = 0.5,
    max_gap: int = 1,
    video_id: Optional[str] = None,
    shot_id: int = 0,
) -> list[TrackSegment]:
    """Greedy IoU association of detections into track segments.

    Per frame, (open track, detection) candidates with IoU >= threshold are
    matched one-to-one in descending IoU order (ties to the lower track id,
    then lower detection index); unmatched detections open new tracks and
    tracks idle for more than ``max_gap`` frames close. The caller passes
    frames of a single shot, so tracks never cross shot boundaries.
    """
    frames = sorted(frames, key=lambda f: f.frame_index)
    if video_id is None:
        video_id = frames[0].video_id if frames else ""

    next_track = 0
    open_tracks: dict[int, list[TrackFrame]] = {}
    last_seen: dict[int, int] = {}
    closed: list[tuple[int, list[TrackFrame]]] = []

    def _close(tid):
        closed.append((tid, open_tracks.pop(tid)))
        del last_seen[tid]

    for frame in frames:
        for tid in sorted(open_tracks):
            if frame.frame_index - last_seen[tid] > max_gap:
                _close(tid)

        candidates = []
        for tid in sorted(open_tracks):
            tail = open_tracks[tid][-1].head_box
            for di, det in enumerate(frame.detections):
                score = iou(tail, det.head_box)
                if score >= iou_threshold:
                    candidates.append((-score, tid, di))
        candidates.sort()

        used_tracks: set[int] = set()
        used_dets: set[int] = set()
        for neg_score, tid, di in candidates:
            if tid in used_tracks or di in used_dets:
                continue
            det = frame.detections[di]
            open_tracks[tid].append(
                TrackFrame(frame.frame_index, det.head_box, det.face_box, det.identity, det.appearance)
            )
            last_seen[tid] = frame.frame_index
            used_tracks.add(tid)
            used_dets.add(di)

        for di, det in enumerate(frame.detections):
            if di in used_dets:
                continue
            open_tracks[next_track] = [
                TrackFrame(frame.frame_index, det.head_box, det.face_box, det.identity, det.appearance)
            ]
            last_seen[next_track] = frame.frame_index
            next_track += 1

    for tid in sorted(open_tracks):
        closed.append((tid, open_tracks[tid]))

    closed.sort(key=lambda item: item[0])
    return [
        TrackSegment(
            segment_id=f"{video_id}:h{shot_id:02d}:t{tid:03d}",
            video_id=video_id,
            shot_id=shot_id,
            frames=track,
        )
        for tid, track in closed
    ]


def filter_segments(
    segments: Sequence[TrackSegment],
    min_frames: int = 5,
    min_face_frac: float = 0.20,
    min_nonface_frac: float = 0.10,
) -> list[TrackSegment]:
    """Keep segments long enough and mixing face-visible with face-invisible
    frames; all three thresholds are inclusive."""
    kept = []
    for seg in segments:
        n = len(seg)
        if n < min_frames:
            continue
        visible = seg.face_visible_count / n
        if visible >= min_face_frac and (1.0 - visible) >= min_nonface_frac:
            kept.append(seg)
    return kept


def select_best_face(segment: TrackSegment, min_face_ratio: float = 0.5) -> Optional[int]:
    """Frame index of the largest face strictly exceeding ``min_face_ratio``
    of its head box area; None when no frame qualifies."""
    best_idx = None
    best_area = -1.0
    for f in segment.frames:
        if f.face_box is None:
            continue
        head_area = (f.head_box[2] - f.head_box[0]) * (f.head_box[3] - f.head_box[1])
        face_area = (f.face_box[2] - f.face_box[0]) * (f.face_box[3] - f.face_box[1])
        if head_area <= 0 or face_area / head_area <= min_face_ratio:
            continue
        if face_area > best_area:
            best_area = face_area
            best_idx = f.frame_index
    return best_idx


def cluster_identities(embeddings: np.ndarray, tau: float = 0.5) -> np.ndarray:
    """Average-linkage agglomerative clustering under cosine similarity.

    Merges the pair of clusters with the highest average pairwise similarity
    while that maximum stays >= tau (ties resolve to the lexicographically
    smallest cluster-id pair). Returns dense cluster ids ordered by each
    cluster's smallest member index.
    """
    embeddings = np.asarray(embeddings)
    n = embeddings.shape[0]
    if n == 0:
        return np.empty(0, dtype=np.int64)
    sims = embeddings @ embeddings.T

    members: dict[int, list[int]] = {i: [i] for i in range(n)}
    # cross[a][b]: summed pairwise similarity between clusters a and b
    cross = {i: {j: float(sims[i, j]) for j in range(n) if j != i} for i in range(n)}

    while len(members) > 1:
        best = None
        active = sorted(members)
        for ai, a in enumerate(active):
            for b in active[ai + 1 :]:
                avg = cross[a][b] / (len(members[a]) * len(members[b]))
                if best is None or avg > best[0] + 1e-15:
                    best = (avg, a, b)
        if best is None or best[0] < tau:
            break
        _, a, b = best
        for c in members:
            if c in (a, b):
                continue
            cross[a][c] = cross[c][a] = cross[a][c] + cross[b][c]
            del cross[c][b]
        members[a].extend(members[b])
        del members[b]
        del cross[b]
        cross[a].pop(b, None)

    labels = np.empty(n, dtype=np.int64)
    for new_id, a in enumerate(sorted(members, key=lambda c: min(members[c]))):
        labels[members[a]] = new_id
    return labels


def induce_relations(
    segments: Sequence[TrackSegment],
    cluster_ids: Sequence[int],
    stride: int = 1,
) -> list[SampleMeta]:
    """Per-frame sample metadata with identity = cluster id and appearance =
    dense segment index (unique across videos by construction)."""
    if len(segments) != len(cluster_ids):
        raise ValueError("segments and cluster_ids length mismatch")
    metas: list[SampleMeta] = []
    for seg_index, (seg, cluster) in enumerate(zip(segments, cluster_ids)):
        for f in seg.frames[::stride]:
            metas.append(
                SampleMeta(
                    sample_id=f"{seg.segment_id}:f{f.frame_index:05d}",
                    identity=int(cluster),
                    appearance=seg_index,
                    video_id=seg.video_id,
                    face_visible=f.face_box is not None,
                )
            )
    return metas


@dataclass(frozen=True)
class PipelineConfig:
    shot_k_sigma: float = 3.0
    shot_floor: float = 0.2
    iou_threshold: float = 0.5
    max_gap: int = 1
    min_frames: int = 5
    min_face_frac: float = 0.20
    min_nonface_frac: float = 0.10
    min_face_ratio: float = 0.5
    cluster_tau: float = 0.5
    sample_stride: int = 1


@dataclass
class PipelineResult:
    shots: list[Shot]
    segments: list[TrackSegment]  # post-filter, with a best-face frame
    best_face_frames: list[int]
    cluster_ids: np.ndarray
    metas: list[SampleMeta]
    stage_counts: dict
    dropped_no_best_face: list[str]


STAGES = ("shots", "track", "filter", "bestface", "cluster", "relations")


def run_pipeline(
    frames: Sequence[FrameRecord],
    embed_fn: Optional[Callable[[TrackSegment, int], np.ndarray]],
    config: PipelineConfig = PipelineConfig(),
    until: str = "relations",
) -> PipelineResult:
    """Run stages over a multi-video frame collection, up to ``until``.

    ``embed_fn(segment, best_face_frame_index)`` supplies the face embedding
    used for identity clustering (adapter point for real face models); it may
    be None when stopping before the cluster stage. Segments that pass the
    filter but have no qualifying best-face frame are dropped and reported.
    """
    if until not in STAGES:
        raise ValueError(f"unknown stage {until!r}; choices {STAGES}")
    stop = STAGES.index(until)
    by_video: dict[str, list[FrameRecord]] = {}
    for f in frames:
        by_video.setdefault(f.video_id, []).append(f)

    counts: dict = {"videos": len(by_video), "frames": len(frames)}
    result = PipelineResult(
        shots=[],
        segments=[],
        best_face_frames=[],
        cluster_ids=np.empty(0, dtype=np.int64),
        metas=[],
        stage_counts=counts,
        dropped_no_best_face=[],
    )

    tracked: list[TrackSegment] = []
    for video_id in sorted(by_video):
        vframes = sorted(by_video[video_id], key=lambda f: f.frame_index)
        shots = detect_shots(vframes, config.shot_k_sigma, config.shot_floor)
        result.shots.extend(shots)
        if stop >= STAGES.index("track"):
            for shot_id, shot in enumerate(shots):
                shot_frames = [
                    f for f in vframes if shot.start_frame <= f.frame_index <= shot.end_frame
                ]
                tracked.extend(
                    track_heads(
                        shot_frames,
                        iou_threshold=config.iou_threshold,
                        max_gap=config.max_gap,
                        video_id=video_id,
                        shot_id=shot_id,
                    )
                )
    counts["shots"] = len(result.shots)
    if stop < STAGES.index("track"):
        return result
    counts["tracked_segments"] = len(tracked)
    if stop < STAGES.index("filter"):
        result.segments = tracked
        return result

    filtered = filter_segments(
        tracked, config.min_frames, config.min_face_frac, config.min_nonface_frac
    )
    counts["filtered_segments"] = len(filtered)
    if stop < STAGES.index("bestface"):
        result.segments = filtered
        return result

    kept: list[TrackSegment] = []
    best_frames: list[int] = []
    for seg in filtered:
        best = select_best_face(seg, config.min_face_ratio)
        if best is None:
            result.dropped_no_best_face.append(seg.segment_id)
            continue
        kept.append(seg)
        best_frames.append(best)
    result.segments = kept
    result.best_face_frames = best_frames
    counts["segments_dropped_no_best_face"] = len(result.dropped_no_best_face)
    counts["kept_segments"] = len(kept)
    if stop < STAGES.index("cluster"):
        return result

    if kept:
        if embed_fn is None:
            raise ValueError("embed_fn required for the cluster stage")
        embeddings = np.stack([embed_fn(seg, bf) for seg, bf in zip(kept, best_frames)])
        result.cluster_ids = cluster_identities(embeddings, config.cluster_tau)
    counts["clusters"] = int(result.cluster_ids.max() + 1) if result.cluster_ids.size else 0
    if stop < STAGES.index("relations"):
        return result

    result.metas = induce_relations(kept, result.cluster_ids, config.sample_stride)
    counts["samples"] = len(result.metas)
    return result
