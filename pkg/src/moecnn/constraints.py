"""Expert-utilization constraints.

Two soft constraints (differentiable auxiliary losses on the batch
importance vector) and two hard constraints (training-time masking of
over-used experts, decided from running importance statistics).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, xlogx


class ConstraintKind(str, enum.Enum):
    NONE = "none"
    IMPORTANCE_LOSS = "importance_loss"
    KL_LOSS = "kl_loss"
    RELATIVE_HARD = "relative_hard"
    MEAN_HARD = "mean_hard"

    @property
    def is_soft(self) -> bool:
        return self in (ConstraintKind.IMPORTANCE_LOSS, ConstraintKind.KL_LOSS)

    @property
    def is_hard(self) -> bool:
        return self in (ConstraintKind.RELATIVE_HARD, ConstraintKind.MEAN_HARD)


@dataclass
class ConstraintConfig:
    kind: ConstraintKind = ConstraintKind.NONE
    w_imp: float = 0.5
    w_kl: float = 0.5
    m_rel: float = 0.5
    m_mean: float = 0.3
    # "sparse": importance from post-top-k weights; "dense": from the full softmax
    importance_source: str = "sparse"

    def __post_init__(self):
        self.kind = ConstraintKind(self.kind)
        for name in ("w_imp", "w_kl", "m_rel", "m_mean"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.importance_source not in ("sparse", "dense"):
            raise ValueError(f"importance_source must be 'sparse' or 'dense', got {self.importance_source!r}")


def batch_importance(weights) -> Tensor:
    """Column sums of a ``[B, N]`` weight matrix (differentiable if given a Tensor)."""
    w = weights if isinstance(weights, Tensor) else Tensor(np.asarray(weights))
    if w.ndim != 2:
        raise ValueError(f"expected a [B, N] weight matrix, got shape {w.shape}")
    if w.shape[0] == 0:
        raise ValueError("importance of an empty batch is undefined")
    return w.sum(axis=0)


def relative_importance(importance) -> np.ndarray:
    """Deviation of each expert's importance from the mean, relative to the mean."""
    imp = np.asarray(importance.data if isinstance(importance, Tensor) else importance,
                     dtype=np.float64)
    mu = imp.mean()
    if mu == 0:
        raise ValueError("relative importance undefined for zero mean importance")
    return (imp - mu) / mu


def importance_loss(importance: Tensor, w_imp: float) -> Tensor:
    """``w_imp`` times the squared coefficient of variation (population std)."""
    mu = importance.mean()
    if mu.item() == 0:
        raise ValueError("importance loss undefined for zero mean importance")
    dev = importance - mu
    var = (dev * dev).mean()
    return var / (mu * mu) * w_imp


def kl_loss(importance: Tensor, batch_size: int, w_kl: float) -> Tensor:
    """``w_kl`` times KL(P || uniform) where ``P_i = I_i / B``."""
    imp = importance.data
    if np.any(imp < 0):
        raise ValueError("negative importance")
    if not math.isclose(float(imp.sum()), batch_size, rel_tol=1e-4, abs_tol=1e-6):
        raise ValueError(f"importance sums to {float(imp.sum())}, expected batch size {batch_size}")
    n = importance.shape[0]
    p = importance * (1.0 / batch_size)
    return (xlogx(p).sum() + p.sum() * math.log(n)) * w_kl


@dataclass
class ImportanceTracker:
    """Running importance statistics that drive the hard constraints.

    ``cum_rel_importance`` is the running sum of per-batch relative
    importance; ``running_mean_importance`` the running mean of per-sample
    importance per expert; ``running_batch_mean`` the running mean of that
    quantity across experts. Decisions for batch t only see batches < t.
    """

    num_experts: int
    step: int = 0
    cum_rel_importance: np.ndarray = field(default=None)
    running_mean_importance: np.ndarray = field(default=None)
    running_batch_mean: float = 0.0
    skipped_masks: int = 0

    def __post_init__(self):
        if self.num_experts < 1:
            raise ValueError("num_experts must be >= 1")
        if self.cum_rel_importance is None:
            self.cum_rel_importance = np.zeros(self.num_experts)
        if self.running_mean_importance is None:
            self.running_mean_importance = np.zeros(self.num_experts)

    def relative_alive(self, m_rel: float) -> np.ndarray:
        return ~(self.cum_rel_importance > m_rel)

    def mean_alive(self, m_mean: float) -> np.ndarray:
        if self.step == 0:
            return np.ones(self.num_experts, dtype=bool)
        return ~(self.running_mean_importance - self.running_batch_mean > m_mean)

    def alive_mask(self, config: ConstraintConfig) -> np.ndarray | None:
        """Experts allowed for the next batch, or None when nothing is masked."""
        if config.kind == ConstraintKind.RELATIVE_HARD:
            alive = self.relative_alive(config.m_rel)
        elif config.kind == ConstraintKind.MEAN_HARD:
            alive = self.mean_alive(config.m_mean)
        else:
            return None
        if alive.all():
            return None
        if not alive.any():
            self.skipped_masks += 1
            return None
        return alive

    def update(self, importance, batch_size: int) -> None:
        imp = np.asarray(importance.data if isinstance(importance, Tensor) else importance,
                         dtype=np.float64)
        if imp.shape != (self.num_experts,):
            raise ValueError(f"importance shape {imp.shape} != ({self.num_experts},)")
        self.cum_rel_importance = self.cum_rel_importance + relative_importance(imp)
        per_sample = imp / batch_size
        self.step += 1
        self.running_mean_importance = self.running_mean_importance + \
            (per_sample - self.running_mean_importance) / self.step
        self.running_batch_mean += (per_sample.mean() - self.running_batch_mean) / self.step

    def to_dict(self) -> dict:
        return {
            "num_experts": self.num_experts,
            "step": self.step,
            "cum_rel_importance": [float(v) for v in self.cum_rel_importance],
            "running_mean_importance": [float(v) for v in self.running_mean_importance],
            "running_batch_mean": float(self.running_batch_mean),
            "skipped_masks": self.skipped_masks,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ImportanceTracker:
        return cls(num_experts=int(d["num_experts"]), step=int(d["step"]),
                   cum_rel_importance=np.array(d["cum_rel_importance"], dtype=np.float64),
                   running_mean_importance=np.array(d["running_mean_importance"], dtype=np.float64),
                   running_batch_mean=float(d["running_batch_mean"]),
                   skipped_masks=int(d["skipped_masks"]))


def _renormalize(dense_weights, alive: np.ndarray | None) -> Tensor:
    w = dense_weights if isinstance(dense_weights, Tensor) else Tensor(np.asarray(dense_weights))
    if alive is None:
        return w
    masked = w * alive.astype(w.dtype)
    return masked / masked.sum(axis=1, keepdims=True)


def apply_relative_constraint(tracker: ImportanceTracker, dense_weights, m_rel: float) -> Tensor:
    """Zero experts whose accumulated relative importance exceeds ``m_rel``, renormalize."""
    return _renormalize(dense_weights, tracker.alive_mask(
        ConstraintConfig(ConstraintKind.RELATIVE_HARD, m_rel=m_rel)))


def apply_mean_constraint(tracker: ImportanceTracker, dense_weights, m_mean: float) -> Tensor:
    """Zero experts whose running mean importance exceeds the running batch mean by ``m_mean``."""
    return _renormalize(dense_weights, tracker.alive_mask(
        ConstraintConfig(ConstraintKind.MEAN_HARD, m_mean=m_mean)))


def auxiliary_loss(config: ConstraintConfig, importance: Tensor, batch_size: int) -> Tensor | None:
    if config.kind == ConstraintKind.IMPORTANCE_LOSS:
        return importance_loss(importance, config.w_imp)
    if config.kind == ConstraintKind.KL_LOSS:
        return kl_loss(importance, batch_size, config.w_kl)
    return None
