"""Distance norms and the attack objectives built on them."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np


class NormKind(Enum):
    L0 = "L0"
    L1 = "L1"
    L2 = "L2"
    LINF = "Linf"


@dataclass(frozen=True)
class PenaltyParams:
    """Constants pushing same-class candidates behind every misclassified one.

    With inputs in [0,1]^n every reachable distance stays far below m1,
    so the penalized ranking is strict: misclassified first, by distance;
    same-class after, also by distance.
    """

    m1: float = 1e6
    m2: float = 1e3
    m_color: float = 100.0

    def __post_init__(self) -> None:
        if self.m1 <= 1.0 or self.m2 <= 1.0:
            raise ValueError("m1 and m2 must be > 1")
        if self.m_color <= 3.0:
            raise ValueError("m_color must be > 3")


def norm_distance(kind: NormKind, a: np.ndarray, b: np.ndarray) -> float:
    """L0 counts differing coordinates; L1/L2 are the usual sums; Linf the max."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    if kind is NormKind.L0:
        return float(np.count_nonzero(diff))
    if kind is NormKind.L1:
        return float(np.sum(np.abs(diff)))
    if kind is NormKind.L2:
        return float(np.sqrt(np.sum(diff * diff)))
    if kind is NormKind.LINF:
        return float(np.max(np.abs(diff))) if diff.size else 0.0
    raise ValueError(f"unknown norm kind {kind!r}")


def penalized_fitness(
    kind: NormKind,
    candidate_label: int,
    reference_label: int,
    candidate: np.ndarray,
    reference: np.ndarray,
    params: PenaltyParams,
) -> float:
    """Distance if the labels differ, m1 + m2 * distance if they agree."""
    d = norm_distance(kind, candidate, reference)
    if candidate_label != reference_label:
        return d
    return params.m1 + params.m2 * d


def color_fitness(
    betas: np.ndarray,
    candidate_label: int,
    reference_label: int,
    params: PenaltyParams,
) -> float:
    """Total darkening 3 - (b_r + b_g + b_b) if misclassified, m_color otherwise."""
    betas = np.asarray(betas, dtype=float).ravel()
    if betas.shape != (3,):
        raise ValueError(f"expected 3 darkening factors, got shape {betas.shape}")
    if np.any(betas < 0.0) or np.any(betas > 1.0):
        raise ValueError(f"darkening factors must lie in [0, 1], got {betas}")
    if candidate_label != reference_label:
        return float(3.0 - betas.sum())
    return params.m_color


def average_perturbation(a: np.ndarray, b: np.ndarray) -> float:
    """L1 distance normalized by channels * height * width."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.sum(np.abs(a - b)) / a.size)
