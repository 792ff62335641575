"""Experiment configuration: defaults, YAML files, and override precedence.

Precedence is CLI flags > config file > built-in defaults. The resolved
config hashes canonically (sorted-key JSON, first 12 hex chars of SHA-256)
and that hash plus the master seed is embedded in every artifact so equal
hashes imply byte-identical outputs.

Built-in defaults mirror the full-scale recipe (batch 256, 30 epochs, lr
1e-4, weight decay 5e-2, margins 0.1/0.3/0.2); ``desk_overrides`` shrinks
them to a single-CPU budget.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

import yaml

from .model import EncoderConfig
from .objectives import LossWeights, Margins
from .optim import OptimizerConfig
from .pipeline import PipelineConfig
from .synthworld import FactorSpec


@dataclass(frozen=True)
class SplitConfig:
    """Evaluation holdouts: whole identities for verification/ordering, and
    a per-state sample fraction of training identities for the distillation
    check (teacher vectors of unseen identities are not predictable from
    pixels, so that check must use seen identities)."""

    holdout_identities: int = 8
    holdout_sample_fraction: float = 0.15


@dataclass(frozen=True)
class EvalConfig:
    num_triples: int = 2000
    max_positive_pairs: int = 20_000
    max_negative_pairs: int = 200_000
    retrieval_k: int = 3
    batch_size: int = 128


@dataclass
class ExperimentConfig:
    world: FactorSpec = field(
        default_factory=lambda: FactorSpec(
            num_identities=40, states_per_identity=4, samples_per_state=20
        )
    )
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    margins: Margins = field(default_factory=Margins)
    loss: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    batch_size: int = 256
    epochs: int = 30
    steps_per_epoch: Optional[int] = None  # None -> one pass over the head pool
    head_fraction: float = 0.5
    mining_mode: str = "hard"
    mining_embedding: str = "identity"  # mine on z_id ("identity") or z_head ("head")
    hardest_positive: bool = True
    # Worlds already resample backgrounds per sample (nuisance); this flag
    # additionally re-randomizes them every training step.
    background_randomization: bool = False
    distill_gate: str = "face_visible"  # which head samples get teacher targets
    teacher_noise: float = 0.05  # pipeline's stand-in face embedder noise
    seed: int = 0

    def __post_init__(self):
        if self.mining_mode not in ("hard", "random"):
            raise ValueError(f"unknown mining_mode {self.mining_mode!r}")
        if self.mining_embedding not in ("identity", "head"):
            raise ValueError(f"unknown mining_embedding {self.mining_embedding!r}")
        if self.distill_gate not in ("face_visible", "all", "none"):
            raise ValueError(f"unknown distill_gate {self.distill_gate!r}")
        if not 0.0 < self.head_fraction <= 1.0:
            raise ValueError("head_fraction must be in (0, 1]")


_SECTIONS = {
    "world": FactorSpec,
    "encoder": EncoderConfig,
    "margins": Margins,
    "loss": LossWeights,
    "optimizer": OptimizerConfig,
    "split": SplitConfig,
    "eval": EvalConfig,
    "pipeline": PipelineConfig,
}


def config_to_dict(config: ExperimentConfig) -> dict:
    return dataclasses.asdict(config)


def _check_keys(cls, data: dict, path: str) -> None:
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown config keys at {path or 'top level'}: {sorted(unknown)}")


def config_from_dict(data: dict) -> ExperimentConfig:
    data = copy.deepcopy(data)
    _check_keys(ExperimentConfig, data, "")
    kwargs = {}
    for key, value in data.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ValueError(f"config section {key!r} must be a mapping")
            _check_keys(_SECTIONS[key], value, key)
            kwargs[key] = _SECTIONS[key](**value)
        else:
            kwargs[key] = value
    return ExperimentConfig(**kwargs)


def _deep_merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def apply_dotted(data: dict, dotted: str, value) -> None:
    """Set ``a.b.c`` style keys in a nested dict, in place."""
    parts = dotted.split(".")
    node = data
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ValueError(f"cannot descend into non-mapping at {part!r} of {dotted!r}")
    node[parts[-1]] = value


def load_config(path=None, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Resolve defaults <- file <- overrides (dotted keys allowed)."""
    data = config_to_dict(ExperimentConfig())
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            file_data = yaml.safe_load(fh) or {}
        if not isinstance(file_data, dict):
            raise ValueError(f"config file {path} must contain a mapping")
        data = _deep_merge(data, file_data)
    if overrides:
        for key, value in overrides.items():
            apply_dotted(data, key, value)
    return config_from_dict(data)


def config_hash(config: ExperimentConfig) -> str:
    canonical = json.dumps(config_to_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def desk_overrides() -> dict:
    """Single-CPU shrink of the full-scale defaults; paper-scale values stay
    reachable through plain config."""
    return {
        "batch_size": 64,
        "epochs": 10,
        "head_fraction": 1.0,
        "optimizer": {"lr": 1.5e-3, "schedule": "cosine"},
        "loss": {"sim_scale": 12.0},
        "eval": {"num_triples": 2500},
    }


def desk_config(**extra_dotted) -> ExperimentConfig:
    data = _deep_merge(config_to_dict(ExperimentConfig()), desk_overrides())
    for key, value in extra_dotted.items():
        apply_dotted(data, key, value)
    return config_from_dict(data)
