"""Masked multi-label losses for partially labeled records.

Labels take three states per task: 1 (positive), 0 (negative), and unknown,
stored as -1. Unknown entries contribute nothing, neither to loss values nor
to gradients. Per-record losses sum over the labeled tasks (no averaging;
the class weights already carry the normalization), and both loss families
fold the sign into a single overall negation so every term is nonnegative.

Confidences are clamped to [1e-7, 1 - 1e-7] before any logarithm.

The scalar functions here are deliberately plain float math: they are the
reference the graph builders (classification_loss_graph and friends) are
tested against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

__all__ = [
    "UNKNOWN",
    "PROB_EPS",
    "ASLConfig",
    "ClassWeights",
    "validate_labels",
    "class_weights",
    "wbce_term",
    "asl_term",
    "masked_multilabel_loss",
    "projector_loss",
    "classification_loss_graph",
    "reconstruction_loss_graph",
]

UNKNOWN = -1
PROB_EPS = 1e-7


@dataclass(frozen=True)
class ASLConfig:
    """Asymmetric-loss knobs: probability margin m and negative focus gamma."""

    margin: float = 0.05
    gamma_neg: float = 4.0

    def __post_init__(self):
        if not 0.0 <= self.margin <= 1.0:
            raise ValueError(f"margin must lie in [0, 1], got {self.margin}")
        if self.gamma_neg < 0.0:
            raise ValueError(f"gamma_neg must be nonnegative, got {self.gamma_neg}")


@dataclass
class ClassWeights:
    """Per-task positive/negative weights for the weighted-BCE family."""

    pos: np.ndarray
    neg: np.ndarray

    def __post_init__(self):
        self.pos = np.asarray(self.pos, dtype=np.float64)
        self.neg = np.asarray(self.neg, dtype=np.float64)
        if self.pos.shape != self.neg.shape or self.pos.ndim != 1:
            raise ValueError("weight vectors must be 1-D and the same length")
        if not (np.all(np.isfinite(self.pos)) and np.all(np.isfinite(self.neg))):
            raise ValueError("weights must be finite")
        if np.any(self.pos <= 0) or np.any(self.neg <= 0):
            raise ValueError("weights must be positive")


def validate_labels(labels, n_tasks: int | None = None) -> np.ndarray:
    arr = np.asarray(labels)
    if not np.all(np.isin(arr, (UNKNOWN, 0, 1))):
        raise ValueError("labels must be -1 (unknown), 0, or 1")
    arr = arr.astype(np.int64)
    if n_tasks is not None and arr.shape[-1] != n_tasks:
        raise ValueError(f"expected {n_tasks} tasks, got {arr.shape[-1]}")
    return arr


def class_weights(labels) -> ClassWeights:
    """Inverse-prevalence weights from a (n, K) label matrix.

    For task k with n_k labeled entries, P_k positives and N_k negatives:
    w_pos = n_k / (2 K P_k) and w_neg = n_k / (2 K N_k). Every task needs at
    least one positive and one negative among its labeled entries.
    """
    arr = validate_labels(labels)
    if arr.ndim != 2:
        raise ValueError(f"labels must be (records, tasks), got shape {arr.shape}")
    n_tasks = arr.shape[1]
    pos = np.zeros(n_tasks)
    neg = np.zeros(n_tasks)
    for k in range(n_tasks):
        col = arr[:, k]
        p_k = int(np.sum(col == 1))
        n_k_neg = int(np.sum(col == 0))
        n_k = p_k + n_k_neg
        if p_k == 0 or n_k_neg == 0:
            raise ValueError(
                f"task {k}: needs at least one positive and one negative labeled "
                f"record (got {p_k} positive, {n_k_neg} negative)")
        pos[k] = n_k / (2.0 * n_tasks * p_k)
        neg[k] = n_k / (2.0 * n_tasks * n_k_neg)
    return ClassWeights(pos=pos, neg=neg)


def _clamp(phi: float) -> float:
    return min(max(float(phi), PROB_EPS), 1.0 - PROB_EPS)


def wbce_term(y: int, phi: float, w_pos: float, w_neg: float) -> float:
    """-[y w_pos log(phi) + (1-y) w_neg log(1-phi)] for one binary label."""
    if y not in (0, 1):
        raise ValueError(f"wbce_term takes a resolved binary label, got {y}")
    p = _clamp(phi)
    return -(y * w_pos * math.log(p) + (1 - y) * w_neg * math.log(1.0 - p))


def asl_term(y: int, phi: float, cfg: ASLConfig) -> float:
    """Asymmetric term: -(1-phi) log(phi) for positives; for negatives the
    shifted probability p_m = max(phi - m, 0) gives -(p_m)^gamma log(1-p_m)."""
    if y not in (0, 1):
        raise ValueError(f"asl_term takes a resolved binary label, got {y}")
    p = _clamp(phi)
    if y == 1:
        return -(1.0 - p) * math.log(p)
    p_m = max(p - cfg.margin, 0.0)
    return -(p_m ** cfg.gamma_neg) * math.log(1.0 - p_m)


def masked_multilabel_loss(labels, phis, kind: str, *, weights: ClassWeights | None = None,
                           asl: ASLConfig | None = None) -> float:
    """Sum of per-task terms over the labeled entries of one record."""
    y = validate_labels(labels)
    phi = np.asarray(phis, dtype=np.float64)
    if y.shape != phi.shape or y.ndim != 1:
        raise ValueError("labels and confidences must be matching 1-D vectors")
    total = 0.0
    for k in range(y.size):
        if y[k] == UNKNOWN:
            continue
        if kind == "avg":
            if weights is None:
                raise ValueError("avg loss needs class weights")
            total += wbce_term(int(y[k]), float(phi[k]), float(weights.pos[k]), float(weights.neg[k]))
        elif kind == "asl":
            total += asl_term(int(y[k]), float(phi[k]), asl or ASLConfig())
        else:
            raise ValueError(f"unknown loss kind {kind!r}")
    return total


def projector_loss(e, e_hat, labels, phis, beta: float, kind: str, *,
                   weights: ClassWeights | None = None,
                   asl: ASLConfig | None = None) -> float:
    """Squared-L2 reconstruction plus beta times the masked classification sum."""
    e = np.asarray(e, dtype=np.float64)
    e_hat = np.asarray(e_hat, dtype=np.float64)
    if e.shape != e_hat.shape:
        raise ValueError(f"embedding shapes disagree: {e.shape} vs {e_hat.shape}")
    rec = float(np.sum((e - e_hat) ** 2))
    return rec + beta * masked_multilabel_loss(labels, phis, kind, weights=weights, asl=asl)


# ---------------------------------------------------------------------------
# graph builders used by training (batched, differentiable)


def classification_loss_graph(phi: ad.Tensor, labels, kind: str, *,
                              weights: ClassWeights | None = None,
                              asl: ASLConfig | None = None) -> ad.Tensor:
    """Per-record masked classification sums for a (B, K) confidence tensor.

    Unknown labels enter as multiplicative zero masks, which keeps their
    gradient contribution exactly zero. Returns a (B,) tensor.
    """
    y = validate_labels(labels)
    if y.shape != phi.shape:
        raise ValueError(f"labels shape {y.shape} does not match confidences {phi.shape}")
    pos_mask = (y == 1).astype(np.float64)
    neg_mask = (y == 0).astype(np.float64)
    p = phi.clip(PROB_EPS, 1.0 - PROB_EPS)
    if kind == "avg":
        if weights is None:
            raise ValueError("avg loss needs class weights")
        if weights.pos.size != y.shape[-1]:
            raise ValueError("class weight length does not match the task count")
        terms = pos_mask * weights.pos * p.log() + neg_mask * weights.neg * (1.0 - p).log()
    elif kind == "asl":
        cfg = asl or ASLConfig()
        p_m = (p - cfg.margin).maximum(0.0)
        pos_part = pos_mask * (1.0 - p) * p.log()
        neg_part = neg_mask * (p_m ** cfg.gamma_neg) * (1.0 - p_m).log()
        terms = pos_part + neg_part
    else:
        raise ValueError(f"unknown loss kind {kind!r}")
    return -terms.sum(axis=-1)


def reconstruction_loss_graph(e, e_hat: ad.Tensor) -> ad.Tensor:
    """Per-record squared-L2 reconstruction error, (B,) tensor."""
    target = e if isinstance(e, ad.Tensor) else ad.constant(e)
    if target.shape != e_hat.shape:
        raise ValueError(f"embedding shapes disagree: {target.shape} vs {e_hat.shape}")
    diff = e_hat - target
    return (diff * diff).sum(axis=-1)
