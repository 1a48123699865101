"""AdamW, cosine schedule with linear warmup, global-norm clipping."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamWState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: AdamWState, lr: float) -> bool:
    """In-place AdamW update of ``params`` (name -> array). Returns False if skipped.

    Non-finite gradients skip the update entirely; the step counter is left alone.
    """
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"adamw_step: gradient for {name} has shape {g.shape}, "
                             f"parameter has {params[name].shape}")
        if not np.all(np.isfinite(g)):
            return False
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.weight_decay:
            p -= lr * state.weight_decay * p
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return True


@dataclass(frozen=True)
class ScheduleConfig:
    peak_lr: float = 1e-4
    warmup_fraction: float = 0.03
    total_steps: int = 2000
    floor_lr: float = 0.0
    kind: str = "cosine"

    @property
    def warmup_steps(self) -> int:
        return max(1, round(self.warmup_fraction * self.total_steps)) if self.warmup_fraction > 0 else 0


def cosine_warmup_lr(step: int, schedule: ScheduleConfig) -> float:
    """Linear 0 -> peak over warmup, then cosine peak -> floor at ``total_steps``."""
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    w = schedule.warmup_steps
    if step < w:
        return schedule.peak_lr * step / w
    span = schedule.total_steps - w
    frac = 1.0 if span == 0 else (step - w) / span
    return schedule.floor_lr + 0.5 * (schedule.peak_lr - schedule.floor_lr) * (1.0 + math.cos(math.pi * frac))


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))


def clip_global_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    """Scale all gradients by ``max_norm / norm`` when the global L2 norm exceeds it."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads.values())
    if norm > max_norm:
        s = max_norm / norm
        # single-precision rounding could otherwise land just above max_norm
        grads = {k: g * g.dtype.type(s if g.dtype == np.float64 else s * (1 - 1e-6))
                 for k, g in grads.items()}
    return grads, norm
