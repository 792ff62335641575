"""Line-delimited manifest IO and lossless image storage.

All artifacts are JSONL with an optional leading ``{"_meta": ...}`` record
carrying config hash and seeds; readers skip it transparently. Serialization
is canonical (sorted keys) so reruns are byte-identical.
"""

from __future__ import annotations

import json
import os
from typing import Optional

import numpy as np
from PIL import Image

from .relations import SampleMeta


def dumps_canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_jsonl(path, records, meta: Optional[dict] = None) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        if meta is not None:
            fh.write(dumps_canonical({"_meta": meta}) + "\n")
        for rec in records:
            fh.write(dumps_canonical(rec) + "\n")


def read_jsonl(path):
    """Returns (meta or None, records)."""
    meta = None
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if "_meta" in obj and len(obj) == 1:
                meta = obj["_meta"]
            else:
                records.append(obj)
    return meta, records


def save_image(path, image: np.ndarray) -> None:
    """Float [0,1] or uint8 image -> PNG (lossless RGB)."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    if image.dtype != np.uint8:
        image = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(image, mode="RGB").save(path, format="PNG")


def load_image(path) -> np.ndarray:
    """PNG -> float32 RGB in [0,1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def meta_from_record(record: dict) -> SampleMeta:
    """Manifest record -> relation labels for one sample."""
    return SampleMeta(
        sample_id=record["sample_id"],
        identity=int(record["identity"]),
        appearance=int(record["appearance"]),
        video_id=record.get("video_id", ""),
        face_visible=bool(record.get("face_visible", True)),
    )


def frame_record_dict(video_id: str, frame_index: int, image_path: str, detections) -> dict:
    return {
        "video_id": video_id,
        "frame_index": int(frame_index),
        "image_path": image_path,
        "detections": detections,
    }
