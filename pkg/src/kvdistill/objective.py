"""Source-selective mixture of temperature-scaled KL and next-token cross-entropy."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import IGNORE_INDEX, Tensor
from .data import CATEGORIES, SourceTag


@dataclass(frozen=True)
class AlphaPolicy:
    alpha: Mapping[str, float]
    temperature: float = 1.0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        for cat, a in self.alpha.items():
            if cat not in CATEGORIES:
                raise ValueError(f"unknown category {cat!r}")
            if not 0.0 <= a <= 1.0:
                raise ValueError(f"alpha for {cat} must lie in [0, 1], got {a}")

    @classmethod
    def selective(cls, alpha: float, temperature: float) -> "AlphaPolicy":
        """Distill only language-heavy sources; OCR-heavy sources get CE only."""
        return cls({"language_heavy": alpha, "ocr_heavy": 0.0}, temperature)

    @classmethod
    def uniform(cls, alpha: float, temperature: float) -> "AlphaPolicy":
        return cls({c: alpha for c in CATEGORIES}, temperature)

    @property
    def distills(self) -> bool:
        return any(a > 0 for a in self.alpha.values())


def alpha_for(policy: AlphaPolicy, tag: SourceTag | str) -> float:
    category = tag.category if isinstance(tag, SourceTag) else tag
    if category not in policy.alpha:
        raise KeyError(f"policy has no alpha for category {category!r}")
    return float(policy.alpha[category])


@dataclass
class LossBreakdown:
    combined: Tensor
    soft_sum: float
    hard_sum: float
    counted: int
    # category -> {"soft": T^2 * KL sum over alpha > 0 rows, "hard": CE sum, "count": positions};
    # both unweighted by alpha, so they track the raw teacher and label signals
    per_category: dict = field(default_factory=dict)
    empty: bool = False

    @property
    def value(self) -> float:
        return float(self.combined.data)


def counted_positions(labels: np.ndarray, attention: np.ndarray) -> np.ndarray:
    """Positions that are real tokens with a non-ignored label."""
    return (np.asarray(attention) == 1) & (np.asarray(labels) != IGNORE_INDEX)


def soft_loss(z_teacher, z_student: Tensor, positions, T: float) -> tuple[Tensor, int]:
    """``T^2 * sum KL(p_teacher || p_student)`` over ``positions`` (rows of 2-D logits)."""
    total, count = ad.kl_divergence_masked(z_teacher, z_student, positions, T)
    return ad.scale(total, T * T), count


def hard_loss(z_student: Tensor, labels, positions) -> tuple[Tensor, int]:
    labels = np.where(np.asarray(positions, dtype=bool), labels, IGNORE_INDEX)
    return ad.cross_entropy_masked(z_student, labels)


def combined_loss(z_teacher, z_student: Tensor, labels: np.ndarray, attention: np.ndarray,
                  tags: Sequence[SourceTag], policy: AlphaPolicy | None) -> LossBreakdown:
    """Normalized objective over ``[batch, seq, vocab]`` logits.

    Per counted position: ``alpha_b * T^2 * KL + (1 - alpha_b) * CE``, summed
    and divided once by the global count. With ``policy=None`` (or no teacher
    logits) this is the plain CE objective.
    """
    B, S, V = z_student.shape
    pos = counted_positions(labels, attention)
    N = int(pos.sum())
    flat_pos = pos.reshape(-1)
    zs = ad.reshape(z_student, (B * S, V))
    safe_labels = np.where(pos, labels, IGNORE_INDEX).reshape(-1)
    ce = ad.cross_entropy_per_position(zs, safe_labels)
    dtype = zs.dtype
    categories = [t.category for t in tags]

    distill = policy is not None and z_teacher is not None
    if distill:
        T = policy.temperature
        zt = np.asarray(z_teacher.data if isinstance(z_teacher, Tensor) else z_teacher).reshape(B * S, V)
        kl = ad.kl_per_position(Tensor(zt), zs, T)
        alpha = np.repeat(np.array([alpha_for(policy, t) for t in tags]), S)
        w_soft = (alpha * (T * T) * flat_pos).astype(dtype)
        w_hard = ((1.0 - alpha) * flat_pos).astype(dtype)
        total = ad.add(ad.sum_(ad.mul(kl, w_soft)), ad.sum_(ad.mul(ce, w_hard)))
        # logged soft loss covers only rows routed to the teacher (alpha > 0)
        kl_scaled = np.where(alpha > 0, (T * T) * kl.data.astype(np.float64), 0.0)
    else:
        total = ad.sum_(ad.mul(ce, flat_pos.astype(dtype)))
        kl_scaled = np.zeros(B * S)

    ce_vals = ce.data.astype(np.float64)
    per_category = {}
    for cat in CATEGORIES:
        rows = np.array([c == cat for c in categories]).repeat(S) & flat_pos
        per_category[cat] = {"soft": float(kl_scaled[rows].sum()), "hard": float(ce_vals[rows].sum()),
                             "count": int(rows.sum())}

    if N == 0:
        combined = ad.scale(total, 0.0)
    else:
        combined = ad.scale(total, 1.0 / N)
    return LossBreakdown(combined, float(kl_scaled[flat_pos].sum()), float(ce_vals[flat_pos].sum()),
                         N, per_category, empty=N == 0)
