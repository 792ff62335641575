"""Deterministic synthetic head-world generation.

Each rendered sample is controlled by three factor groups:

- identity: base head ellipse geometry, skin hue/saturation, brightness
  pattern — stable across everything else;
- appearance state: hair band hue/shape and an accessory glyph — stable
  within a state, different across states of the same identity;
- nuisance: illumination gain, small spatial shift, and the background —
  resampled per sample and irrelevant to the labels.

Rear-view samples (``face_visible=False``) hide the eyes/mouth and extend
the hair region over the face area; frontal samples carry a ``face_box``
whose area is a controlled fraction of the head box.

The frozen oracle teacher stands in for a pretrained face-recognition model:
a random linear map of identity, unit-normalized, bit-stable per seed. Any
callable ``identity -> unit vector`` can replace it where a teacher is
consumed (see :mod:`headsim.train`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from . import kernels
from .seeding import derive_rng, stable_u64

Box = tuple[float, float, float, float]  # (x0, y0, x1, y1) pixel coordinates


@dataclass(frozen=True)
class FactorSpec:
    """Size and factor structure of a generated world."""

    num_identities: int
    states_per_identity: int
    samples_per_state: int
    image_size: int = 64
    nuisance_dims: int = 4
    face_visible_fraction: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if self.num_identities < 1:
            raise ValueError("num_identities must be >= 1")
        if self.states_per_identity < 1:
            raise ValueError("states_per_identity must be >= 1")
        if self.samples_per_state < 1:
            raise ValueError("samples_per_state must be >= 1")
        if self.image_size < 16:
            raise ValueError("image_size must be >= 16")
        if self.nuisance_dims < 0:
            raise ValueError("nuisance_dims must be >= 0")
        if not 0.0 <= self.face_visible_fraction <= 1.0:
            raise ValueError("face_visible_fraction must be in [0, 1]")

    @property
    def total_samples(self) -> int:
        return self.num_identities * self.states_per_identity * self.samples_per_state


@dataclass
class SynthSample:
    sample_id: str
    image: np.ndarray  # (S, S, 3) float32 in [0, 1]
    identity: int
    appearance: int
    nuisance_seed: int
    head_mask: np.ndarray  # (S, S) bool
    face_visible: bool
    face_box: Optional[Box]
    video_id: str = ""
    segment_id: str = ""


def hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    h = h % 1.0
    i = int(h * 6.0) % 6
    f = h * 6.0 - math.floor(h * 6.0)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return np.array(rgb, dtype=np.float32)


@dataclass(frozen=True)
class _IdentityParams:
    hue: float
    sat: float
    val: float
    rx: float  # ellipse half-axes as fractions of image size
    ry: float
    cy_off: float
    pattern_freq: float
    pattern_phase: float
    eye_spread: float


@dataclass(frozen=True)
class _AppearanceParams:
    hair_hue: float
    hair_sat: float
    hair_val: float
    hair_frac: float
    hairline_amp: float
    glyph_kind: int
    glyph_angle: float
    glyph_size: float
    glyph_hue: float
    glyph_val: float
    collar_hue: float
    collar_val: float
    collar_frac: float


@dataclass(frozen=True)
class _RenderControls:
    """Per-sample knobs: nuisance realization plus face visibility."""

    gain: float = 1.0
    dx: float = 0.0
    dy: float = 0.0
    bg_hue: float = 0.6
    bg_sat: float = 0.35
    bg_val: float = 0.55
    bg_noise_seed: int = 0
    face_visible: bool = True
    face_ratio: float = 0.6  # face-box area / head-box area when visible


def _identity_params(seed: int, identity: int) -> _IdentityParams:
    rng = derive_rng(seed, "identity", identity)
    return _IdentityParams(
        hue=float(rng.uniform(0.0, 1.0)),
        sat=float(rng.uniform(0.5, 0.85)),
        val=float(rng.uniform(0.7, 0.95)),
        rx=float(rng.uniform(0.26, 0.36)),
        ry=float(rng.uniform(0.30, 0.40)),
        cy_off=float(rng.uniform(-0.04, 0.04)),
        pattern_freq=float(rng.uniform(1.5, 3.5)),
        pattern_phase=float(rng.uniform(0.0, 2.0 * math.pi)),
        eye_spread=float(rng.uniform(0.32, 0.48)),
    )


def _appearance_params(seed: int, identity: int, appearance: int) -> _AppearanceParams:
    rng = derive_rng(seed, "appearance", identity, appearance)
    return _AppearanceParams(
        hair_hue=float(rng.uniform(0.0, 1.0)),
        hair_sat=float(rng.uniform(0.55, 0.95)),
        hair_val=float(rng.uniform(0.3, 0.9)),
        hair_frac=float(rng.uniform(0.22, 0.46)),
        hairline_amp=float(rng.uniform(-0.16, 0.16)),
        glyph_kind=int(rng.integers(0, 4)),
        glyph_angle=float(rng.uniform(0.2 * math.pi, 0.8 * math.pi)),
        glyph_size=float(rng.uniform(0.05, 0.085)),
        glyph_hue=float(rng.uniform(0.0, 1.0)),
        glyph_val=float(rng.uniform(0.25, 0.95)),
        collar_hue=float(rng.uniform(0.0, 1.0)),
        collar_val=float(rng.uniform(0.3, 0.95)),
        collar_frac=float(rng.uniform(0.55, 0.72)),
    )


def _nuisance_controls(spec: FactorSpec, identity: int, appearance: int, index: int):
    """Draw per-sample controls; returns (controls, nuisance_seed).

    The nuisance latent has ``nuisance_dims`` active dimensions consumed in
    order (gain, shift-x, shift-y, background); inactive knobs keep neutral
    values. Face visibility is a separate per-sample factor.
    """
    nuisance_seed = stable_u64(spec.seed, "nuisance", identity, appearance, index)
    rng = np.random.default_rng(nuisance_seed)
    latent = rng.uniform(0.0, 1.0, size=max(spec.nuisance_dims, 4))
    active = spec.nuisance_dims

    gain = 0.88 + 0.24 * latent[0] if active >= 1 else 1.0
    dx = (latent[1] - 0.5) * 4.0 if active >= 2 else 0.0
    dy = (latent[2] - 0.5) * 4.0 if active >= 3 else 0.0
    if active >= 4:
        bg_hue = float(latent[3])
        bg_seed = int(rng.integers(0, 2**32))
    else:
        bg_hue = 0.6
        bg_seed = stable_u64(spec.seed, "bg", identity, appearance) % 2**32

    face_visible = bool(rng.uniform() < spec.face_visible_fraction)
    face_ratio = float(rng.uniform(0.35, 0.75))
    controls = _RenderControls(
        gain=float(gain),
        dx=float(dx),
        dy=float(dy),
        bg_hue=bg_hue,
        bg_sat=0.25 + 0.25 * bg_hue,
        bg_val=0.35 + 0.4 * ((bg_hue * 7.0) % 1.0),
        bg_noise_seed=bg_seed,
        face_visible=face_visible,
        face_ratio=face_ratio,
    )
    return controls, nuisance_seed


def _mask_bbox(mask: np.ndarray) -> Optional[Box]:
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return None
    return (float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def _render(
    size: int,
    idp: _IdentityParams,
    app: _AppearanceParams,
    ctl: _RenderControls,
):
    """Rasterize one head image; returns (image, head_mask, face_box, head_box)."""
    s = float(size)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) + 0.5

    cx = s / 2.0 + ctl.dx
    cy = s * (0.5 + idp.cy_off) + ctl.dy
    rx = idp.rx * s
    ry = idp.ry * s

    ellipse = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0

    tex = kernels.value_noise(size, size, cell=10, seed=ctl.bg_noise_seed, octaves=2)
    bg = hsv_to_rgb(ctl.bg_hue, ctl.bg_sat, ctl.bg_val)
    img = bg[None, None, :] * (0.7 + 0.45 * tex[:, :, None])

    skin = hsv_to_rgb(idp.hue, idp.sat, idp.val)
    pattern = 1.0 + 0.08 * np.sin(
        2.0 * math.pi * idp.pattern_freq * (yy / s) + idp.pattern_phase
    )
    skin_img = skin[None, None, :] * pattern[:, :, None]
    img = np.where(ellipse[:, :, None], skin_img, img)

    # Rear views extend the hair band a little past the frontal hairline;
    # the strong appearance cues (hair color/shape, glyph, collar) stay
    # visible from both sides so the view toggle acts like a nuisance.
    y_top = cy - ry
    depth = app.hair_frac if ctl.face_visible else app.hair_frac + 0.12
    hairline = y_top + 2.0 * ry * depth + app.hairline_amp * ry * np.cos(
        math.pi * (xx - cx) / (2.0 * rx)
    )
    hair_mask = ellipse & (yy <= hairline)
    hair = hsv_to_rgb(app.hair_hue, app.hair_sat, app.hair_val)
    img = np.where(hair_mask[:, :, None], hair[None, None, :], img)

    collar_mask = ellipse & (yy >= cy + app.collar_frac * ry)
    collar = hsv_to_rgb(app.collar_hue, 0.8, app.collar_val)
    img = np.where(collar_mask[:, :, None], collar[None, None, :], img)

    gx = cx + 0.58 * rx * math.cos(app.glyph_angle)
    gy = cy + 0.58 * ry * math.sin(app.glyph_angle)
    gr = app.glyph_size * s
    if app.glyph_kind == 0:
        glyph = (xx - gx) ** 2 + (yy - gy) ** 2 <= gr**2
    elif app.glyph_kind == 1:
        glyph = np.maximum(np.abs(xx - gx), np.abs(yy - gy)) <= gr
    elif app.glyph_kind == 2:
        d2 = (xx - gx) ** 2 + (yy - gy) ** 2
        glyph = (d2 <= gr**2) & (d2 >= (0.45 * gr) ** 2)
    else:
        glyph = (np.abs(xx - gx) <= 0.45 * gr) & (np.abs(yy - gy) <= 1.8 * gr)
    glyph &= ellipse
    gcol = hsv_to_rgb(app.glyph_hue, 0.85, app.glyph_val)
    img = np.where(glyph[:, :, None], gcol[None, None, :], img)

    head_box: Box = (cx - rx, cy - ry, cx + rx, cy + ry)
    face_box: Optional[Box] = None
    if ctl.face_visible:
        half_w = rx * math.sqrt(ctl.face_ratio)
        half_h = ry * math.sqrt(ctl.face_ratio)
        ex = idp.eye_spread * half_w
        ey = cy - 0.35 * half_h
        er = max(0.16 * half_w, 1.2)
        eyes = ((xx - (cx - ex)) ** 2 + (yy - ey) ** 2 <= er**2) | (
            (xx - (cx + ex)) ** 2 + (yy - ey) ** 2 <= er**2
        )
        mouth = (np.abs(xx - cx) <= 0.45 * half_w) & (
            np.abs(yy - (cy + 0.45 * half_h)) <= max(0.10 * half_h, 1.0)
        )
        dark = np.array([0.08, 0.08, 0.11], dtype=np.float32)
        red = np.array([0.5, 0.14, 0.16], dtype=np.float32)
        img = np.where((eyes & ellipse)[:, :, None], dark[None, None, :], img)
        img = np.where((mouth & ellipse)[:, :, None], red[None, None, :], img)
        face_box = (cx - half_w, cy - half_h, cx + half_w, cy + half_h)
        bbox = _mask_bbox(ellipse)
        if bbox is not None:
            face_box = (
                max(face_box[0], bbox[0]),
                max(face_box[1], bbox[1]),
                min(face_box[2], bbox[2]),
                min(face_box[3], bbox[3]),
            )
            if face_box[2] <= face_box[0] or face_box[3] <= face_box[1]:
                face_box = None

    img = np.clip(img * ctl.gain, 0.0, 1.0).astype(np.float32)
    return img, ellipse, face_box, head_box


def render_sample(spec: FactorSpec, identity: int, appearance: int, index: int) -> SynthSample:
    """Render one sample; pure function of (spec, identity, appearance, index)."""
    if not 0 <= identity < spec.num_identities:
        raise ValueError(f"identity {identity} out of range")
    if not 0 <= appearance < spec.states_per_identity:
        raise ValueError(f"appearance {appearance} out of range")
    idp = _identity_params(spec.seed, identity)
    app = _appearance_params(spec.seed, identity, appearance)
    ctl, nuisance_seed = _nuisance_controls(spec, identity, appearance, index)
    img, mask, face_box, _ = _render(spec.image_size, idp, app, ctl)
    face_visible = ctl.face_visible and face_box is not None
    video_id = f"v{identity:03d}_{appearance:02d}"
    return SynthSample(
        sample_id=f"s{identity:03d}_{appearance:02d}_{index:03d}",
        image=img,
        identity=identity,
        appearance=appearance,
        nuisance_seed=nuisance_seed,
        head_mask=mask,
        face_visible=face_visible,
        face_box=face_box if face_visible else None,
        video_id=video_id,
        segment_id=f"{video_id}_t0",
    )


def head_mask_for(spec: FactorSpec, identity: int, appearance: int, index: int) -> np.ndarray:
    """Recompute just the head mask of a sample (cheap; no rasterized image).

    Lets consumers of a written manifest (which stores RGB only) recover
    masks for background augmentation without re-rendering.
    """
    idp = _identity_params(spec.seed, identity)
    ctl, _ = _nuisance_controls(spec, identity, appearance, index)
    size = spec.image_size
    s = float(size)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) + 0.5
    cx = s / 2.0 + ctl.dx
    cy = s * (0.5 + idp.cy_off) + ctl.dy
    return ((xx - cx) / (idp.rx * s)) ** 2 + ((yy - cy) / (idp.ry * s)) ** 2 <= 1.0


def generate_world(spec: FactorSpec):
    """Render the full factor grid.

    Returns ``(samples, manifest)`` where the manifest carries one record per
    sample with canonical relative image paths. Deterministic for a fixed
    spec (each sample's randomness is keyed independently, so generation
    order never matters).
    """
    samples: list[SynthSample] = []
    manifest: list[dict] = []
    for u in range(spec.num_identities):
        for a in range(spec.states_per_identity):
            for k in range(spec.samples_per_state):
                sample = render_sample(spec, u, a, k)
                samples.append(sample)
                manifest.append(sample_record(sample))
    return samples, manifest


def sample_record(sample: SynthSample) -> dict:
    """Manifest record for one sample (image stored as a lossless PNG)."""
    return {
        "sample_id": sample.sample_id,
        "image_path": f"images/{sample.sample_id}.png",
        "identity": sample.identity,
        "appearance": sample.appearance,
        "video_id": sample.video_id,
        "segment_id": sample.segment_id,
        "face_visible": sample.face_visible,
        "face_box": list(sample.face_box) if sample.face_box is not None else None,
    }


def randomize_background_image(
    image: np.ndarray, head_mask: np.ndarray, texture_seed: int
) -> np.ndarray:
    """Replace pixels outside the mask with a seeded procedural texture.

    Pixels inside the mask are bit-identical to the input.
    """
    size = image.shape[0]
    rng = derive_rng("background-texture", texture_seed)
    base = hsv_to_rgb(float(rng.uniform(0, 1)), float(rng.uniform(0.2, 0.6)), float(rng.uniform(0.3, 0.9)))
    tex = kernels.value_noise(size, image.shape[1], cell=8, seed=texture_seed % 2**32, octaves=3)
    replacement = np.clip(base[None, None, :] * (0.55 + 0.6 * tex[:, :, None]), 0.0, 1.0)
    out = image.copy()
    outside = ~head_mask
    out[outside] = replacement.astype(image.dtype)[outside]
    return out


def randomize_background(sample: SynthSample, texture_seed: int) -> SynthSample:
    """Sample with its background replaced; labels and face box unchanged."""
    new_image = randomize_background_image(sample.image, sample.head_mask, texture_seed)
    return replace(sample, image=new_image)


@dataclass
class OracleTeacher:
    """Frozen identity-pure embedding table.

    Embeddings are the unit-normalized columns of a random matrix drawn once
    from the seed: same identity -> bit-identical vector, appearance and
    nuisance are ignored entirely.
    """

    weight_matrix: np.ndarray  # (dim, num_identities), float64

    @classmethod
    def create(cls, num_identities: int, dim: int = 128, seed: int = 0) -> "OracleTeacher":
        if num_identities < 1 or dim < 1:
            raise ValueError("num_identities and dim must be >= 1")
        rng = derive_rng(seed, "oracle-teacher", num_identities, dim)
        return cls(weight_matrix=rng.standard_normal((dim, num_identities)))

    @property
    def dim(self) -> int:
        return self.weight_matrix.shape[0]

    @property
    def num_identities(self) -> int:
        return self.weight_matrix.shape[1]

    def embed(self, identity: int) -> np.ndarray:
        if not 0 <= identity < self.num_identities:
            raise ValueError(f"identity {identity} out of range [0, {self.num_identities})")
        col = self.weight_matrix[:, identity]
        return col / np.linalg.norm(col)

    def embed_many(self, identities) -> np.ndarray:
        return np.stack([self.embed(int(u)) for u in identities])


def teacher_embed(teacher: OracleTeacher, identity: int) -> np.ndarray:
    """Unit-norm teacher embedding for an identity."""
    return teacher.embed(identity)


def noisy_identity_embedder(
    teacher: OracleTeacher, noise_scale: float, seed: int
) -> Callable[[int, str], np.ndarray]:
    """Imperfect face-embedder stand-in for clustering experiments.

    Returns ``f(identity, key)``: the teacher embedding plus seeded gaussian
    noise (keyed by ``key``), renormalized. ``noise_scale`` around 0.05 keeps
    same-identity cosines near 1 while making them non-degenerate.
    """

    def embed(identity: int, key: str = "") -> np.ndarray:
        base = teacher.embed(identity)
        rng = derive_rng(seed, "noisy-embed", key)
        noisy = base + noise_scale * rng.standard_normal(base.shape)
        return noisy / np.linalg.norm(noisy)

    return embed


@dataclass(frozen=True)
class FrameWorldSpec:
    """Controls synthetic video generation for the dataset pipeline.

    Each identity's appearance states are chunked into videos
    (``states_per_video`` states each); every state becomes one camera shot
    with a constant background base color, a slowly drifting head, per-frame
    face visibility, and detector-style box jitter.
    """

    factors: FactorSpec
    frames_per_segment: int = 24
    states_per_video: int = 2
    drift_px: float = 0.5
    jitter_px: float = 0.4

    def __post_init__(self):
        if self.frames_per_segment < 1:
            raise ValueError("frames_per_segment must be >= 1")
        if self.states_per_video < 1:
            raise ValueError("states_per_video must be >= 1")


def generate_frame_world(fws: FrameWorldSpec) -> list[dict]:
    """Synthetic frame/detection records for the pipeline.

    Returns per-frame dicts: ``video_id``, ``frame_index``, ``image`` and one
    detection ``{head_box, face_box, identity, appearance}``, where
    ``appearance`` is the global ground-truth state index. Deterministic.
    """
    spec = fws.factors
    s = float(spec.image_size)
    records: list[dict] = []
    for u in range(spec.num_identities):
        idp = _identity_params(spec.seed, u)
        states = list(range(spec.states_per_identity))
        chunks = [
            states[i : i + fws.states_per_video]
            for i in range(0, len(states), fws.states_per_video)
        ]
        for vidx, chunk in enumerate(chunks):
            video_id = f"fv{u:03d}_{vidx:02d}"
            frame_index = 0
            video_bg_hue = float(derive_rng(spec.seed, "video-bg", u, vidx).uniform(0, 1))
            for shot_pos, a in enumerate(chunk):
                app = _appearance_params(spec.seed, u, a)
                shot_rng = derive_rng(spec.seed, "shot", u, vidx, a)
                # Consecutive shots of one video get well-separated hues and
                # alternating brightness so histogram cuts are unambiguous.
                bg_hue = (video_bg_hue + 0.41 * shot_pos) % 1.0
                bg_sat = float(shot_rng.uniform(0.45, 0.65))
                bg_val = 0.35 + 0.35 * (shot_pos % 2) + float(shot_rng.uniform(0.0, 0.05))
                rx = idp.rx * s
                ry = idp.ry * s
                lo_x, hi_x = rx + 2.0, s - rx - 2.0
                lo_y, hi_y = ry + 2.0, s - ry - 2.0
                cx0 = float(shot_rng.uniform(lo_x, hi_x))
                cy0 = float(shot_rng.uniform(lo_y, hi_y))
                heading = float(shot_rng.uniform(0, 2 * math.pi))
                for t in range(fws.frames_per_segment):
                    frame_rng = derive_rng(spec.seed, "frame", u, vidx, a, t)
                    cx = float(np.clip(cx0 + fws.drift_px * t * math.cos(heading), lo_x, hi_x))
                    cy = float(np.clip(cy0 + fws.drift_px * t * math.sin(heading), lo_y, hi_y))
                    visible = bool(frame_rng.uniform() < spec.face_visible_fraction)
                    ctl = _RenderControls(
                        gain=float(frame_rng.uniform(0.95, 1.05)),
                        dx=cx - s / 2.0,
                        dy=cy - s * (0.5 + idp.cy_off),
                        bg_hue=bg_hue,
                        bg_sat=bg_sat,
                        bg_val=bg_val,
                        bg_noise_seed=int(frame_rng.integers(0, 2**32)),
                        face_visible=visible,
                        face_ratio=float(frame_rng.uniform(0.35, 0.75)),
                    )
                    img, _, face_box, head_box = _render(spec.image_size, idp, app, ctl)
                    jit = frame_rng.uniform(-fws.jitter_px, fws.jitter_px, size=4)
                    head_box = tuple(float(b + j) for b, j in zip(head_box, jit))
                    records.append(
                        {
                            "video_id": video_id,
                            "frame_index": frame_index,
                            "image": img,
                            "detections": [
                                {
                                    "head_box": list(head_box),
                                    "face_box": list(face_box) if face_box else None,
                                    "identity": u,
                                    "appearance": u * spec.states_per_identity + a,
                                }
                            ],
                        }
                    )
                    frame_index += 1
    return records
