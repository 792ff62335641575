"""AdamW optimizer (decoupled weight decay) over named parameter dicts."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels

# Per common transformer practice, weight decay skips biases, norm scales,
# and the positional/prefix token tables.
_NO_DECAY_NAMES = ("pos_embed", "cls_tokens")


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-4
    weight_decay: float = 5e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: str = "constant"  # or "cosine"
    final_lr_fraction: float = 0.1  # cosine floor as a fraction of lr
    warmup_fraction: float = 0.05  # linear ramp at the start, both schedules

    def __post_init__(self):
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.schedule!r}")

    def lr_at(self, step: int, total_steps: int) -> float:
        warmup = int(self.warmup_fraction * total_steps)
        if warmup > 0 and step < warmup:
            return self.lr * (step + 1) / warmup
        if self.schedule == "constant" or total_steps <= 1:
            return self.lr
        span = max(total_steps - 1 - warmup, 1)
        frac = min(max(step - warmup, 0), span) / span
        floor = self.lr * self.final_lr_fraction
        return floor + 0.5 * (self.lr - floor) * (1.0 + math.cos(math.pi * frac))


def _decays(name: str, param: np.ndarray) -> bool:
    return param.ndim >= 2 and name not in _NO_DECAY_NAMES


class AdamW:
    """Stateful AdamW over a dict of named arrays; updates are in place."""

    def __init__(self, params: dict[str, np.ndarray], config: OptimizerConfig):
        self.config = config
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.count = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr=None) -> None:
        cfg = self.config
        self.count += 1
        lr = cfg.lr if lr is None else lr
        for name in sorted(params):
            p = params[name]
            if not p.flags["C_CONTIGUOUS"]:
                raise ValueError(f"parameter {name!r} must be C-contiguous for in-place updates")
            wd = cfg.weight_decay if _decays(name, p) else 0.0
            kernels.adamw_update(
                p.reshape(-1),
                np.ascontiguousarray(grads[name]).reshape(-1),
                self.m[name].reshape(-1),
                self.v[name].reshape(-1),
                lr,
                cfg.beta1,
                cfg.beta2,
                cfg.eps,
                wd,
                self.count,
            )

    def load_state(self, m: dict[str, np.ndarray], v: dict[str, np.ndarray], count: int) -> None:
        self.m = {k: np.array(val) for k, val in m.items()}
        self.v = {k: np.array(val) for k, val in v.items()}
        self.count = int(count)
