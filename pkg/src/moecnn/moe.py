"""Sparsely-gated mixture-of-experts layer for convolutional feature maps.

Routing is per image: the gate sees the whole feature map of a sample and
produces one weight per expert. In sparse mode only the top-k experts run
for a sample, and the layer output is

    shortcut(x) + sum_i w_i(x) * expert_i(x)

with ``w`` the dense softmax weights renormalized over the selected experts.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field

import numpy as np

from .autograd import BatchNorm2d, Conv2d, Linear, Module, Tensor, scatter_rows
from .autograd import functional as F
from .constraints import (
    ConstraintConfig,
    ImportanceTracker,
    auxiliary_loss,
    batch_importance,
)


class GateKind(str, enum.Enum):
    GAP_FC = "gap_fc"
    CONV_GAP_FC = "conv_gap_fc"


@dataclass
class GateConfig:
    kind: GateKind = GateKind.GAP_FC
    num_experts: int = 4
    conv_channels: int | None = None  # defaults to the input channel count
    conv_kernel: int = 3
    # std of Gaussian noise added to training-time logits; 0 disables it
    noise_std: float = 0.0
    # start the routing FC at zero so no expert is preferred before training
    zero_init: bool = False

    def __post_init__(self):
        self.kind = GateKind(self.kind)
        if self.num_experts < 1:
            raise ValueError("num_experts must be >= 1")
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be a positive odd integer")


class RoutingMode:
    """How a layer mixes its experts: ``sparse``, ``dense`` or ``forced:<i>``."""

    SPARSE = "sparse"
    DENSE = "dense"
    FORCED = "forced"

    def __init__(self, kind: str = "sparse", expert: int | None = None):
        if kind not in (self.SPARSE, self.DENSE, self.FORCED):
            raise ValueError(f"unknown routing mode {kind!r}")
        if (kind == self.FORCED) != (expert is not None):
            raise ValueError("an expert index is required exactly for forced mode")
        if expert is not None and expert < 0:
            raise ValueError(f"invalid expert index {expert}")
        self.kind = kind
        self.expert = expert

    @classmethod
    def parse(cls, text: str) -> RoutingMode:
        text = text.strip().lower()
        m = re.fullmatch(r"forced:(\d+)", text)
        if m:
            return cls(cls.FORCED, int(m.group(1)))
        return cls(text)

    @classmethod
    def forced(cls, expert: int) -> RoutingMode:
        return cls(cls.FORCED, expert)

    def __eq__(self, other):
        return isinstance(other, RoutingMode) and (self.kind, self.expert) == (other.kind, other.expert)

    def __str__(self):
        return f"forced:{self.expert}" if self.kind == self.FORCED else self.kind

    __repr__ = __str__


@dataclass
class GateOutput:
    logits: Tensor
    dense_weights: Tensor
    topk_indices: np.ndarray
    sparse_weights: Tensor
    selected: np.ndarray = field(repr=False)  # bool [B, N]: experts executed per sample
    alive: np.ndarray | None = None  # hard-constraint survivors for this batch
    importance: Tensor | None = None


def topk_sparsify(dense_weights, k: int) -> tuple[Tensor, np.ndarray]:
    """Keep the ``k`` largest weights per row and renormalize them to sum to 1.

    Ties go to the lower expert index. The selection is a constant mask, so
    gradients reach only the selected entries. Returns the sparse weights and
    the ``[B, k]`` selected indices (largest first).
    """
    w = dense_weights if isinstance(dense_weights, Tensor) else Tensor(np.asarray(dense_weights))
    if w.ndim != 2:
        raise ValueError(f"expected [B, N] weights, got shape {w.shape}")
    n = w.shape[1]
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of experts {n}")
    order = np.argsort(-w.data, axis=1, kind="stable")[:, :k]
    sel = np.zeros(w.shape, dtype=bool)
    np.put_along_axis(sel, order, True, axis=1)
    kept = w * sel.astype(w.dtype)
    return kept / kept.sum(axis=1, keepdims=True), order


class Gate(Module):
    """GAP-FC gate, optionally preceded by a channel-preserving conv + ReLU."""

    def __init__(self, in_channels: int, config: GateConfig, rng: np.random.Generator | None = None):
        super().__init__()
        self.config = config
        self.in_channels = in_channels
        self.conv = None
        if config.kind == GateKind.CONV_GAP_FC:
            ch = config.conv_channels or in_channels
            self.conv = Conv2d(in_channels, ch, config.conv_kernel, padding=config.conv_kernel // 2,
                               bias=True, rng=rng)
            fc_in = ch
        else:
            fc_in = in_channels
        self.fc = Linear(fc_in, config.num_experts, rng=rng)
        if config.zero_init:
            self.fc.weight.data[...] = 0
            self.fc.bias.data[...] = 0

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"gate expects {self.in_channels} input channels, got shape {x.shape}")
        if self.conv is not None:
            x = F.relu(self.conv(x))
        return self.fc(F.global_avg_pool(x))

    def mac_count(self, in_shape):
        macs = 0
        shape = tuple(in_shape)
        if self.conv is not None:
            m, shape = self.conv.mac_count(shape)
            macs += m
        m, out = self.fc.mac_count((shape[0],))
        return macs + m, out


def gate_forward(features: Tensor, gate: Gate) -> GateOutput:
    """Logits and dense softmax weights only (no sparsification)."""
    logits = gate(features)
    dense = F.softmax(logits)
    return GateOutput(logits=logits, dense_weights=dense, topk_indices=np.empty((features.shape[0], 0), int),
                      sparse_weights=dense, selected=np.ones(dense.shape, dtype=bool))


class ProjectionShortcut(Module):
    """1x1 convolution (+BN) connecting the layer input to its output."""

    def __init__(self, in_channels: int, out_channels: int, stride: int,
                 rng: np.random.Generator | None = None):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, 1, stride=stride, rng=rng)
        self.bn = BatchNorm2d(out_channels)

    def forward(self, x: Tensor) -> Tensor:
        return self.bn(self.conv(x))

    def mac_count(self, in_shape):
        return self.conv.mac_count(in_shape)


class MoELayer(Module):
    """N expert sub-networks mixed by a gate, plus a projection shortcut.

    ``constraint`` and ``tracker`` are consulted only in training mode; at
    evaluation time no expert is ever masked.
    """

    def __init__(self, experts: list[Module], gate: Gate, k: int, shortcut: Module | None,
                 constraint: ConstraintConfig | None = None, noise_seed: int = 0):
        super().__init__()
        n = len(experts)
        if n < 1:
            raise ValueError("an MoE layer needs at least one expert")
        if gate.config.num_experts != n:
            raise ValueError(f"gate produces {gate.config.num_experts} weights for {n} experts")
        if not 1 <= k <= n:
            raise ValueError(f"k must satisfy 1 <= k <= {n}, got {k}")
        self.experts = list(experts)
        self.gate = gate
        self.shortcut = shortcut
        self.k = k
        self.constraint = constraint or ConstraintConfig()
        self.tracker = ImportanceTracker(n)
        self.mode = RoutingMode()
        self.last: GateOutput | None = None
        self._noise_rng = np.random.default_rng(noise_seed)

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    def set_mode(self, mode: RoutingMode | str) -> None:
        mode = RoutingMode.parse(mode) if isinstance(mode, str) else mode
        if mode.kind == RoutingMode.FORCED and mode.expert >= self.num_experts:
            raise ValueError(f"forced expert {mode.expert} out of range for {self.num_experts} experts")
        self.mode = mode

    def route(self, x: Tensor) -> GateOutput:
        """Gate, optional hard-constraint masking, then the routing-mode weights."""
        n = self.num_experts
        batch = x.shape[0]
        logits = self.gate(x)
        if self.training and self.gate.config.noise_std > 0:
            noise = self._noise_rng.standard_normal(logits.shape) * self.gate.config.noise_std
            logits = logits + noise.astype(logits.dtype)
        alive = self.tracker.alive_mask(self.constraint) if self.training else None
        dense = F.softmax(logits, alive)

        if self.mode.kind == RoutingMode.SPARSE:
            k = self.k if alive is None else min(self.k, int(alive.sum()))
            weights, idx = topk_sparsify(dense, k)
            selected = weights.data > 0
        elif self.mode.kind == RoutingMode.DENSE:
            weights = dense
            idx = np.argsort(-dense.data, axis=1, kind="stable")
            selected = np.ones((batch, n), dtype=bool)
        else:
            onehot = np.zeros((batch, n), dtype=dense.dtype)
            onehot[:, self.mode.expert] = 1.0
            weights = Tensor(onehot, dtype=dense.dtype)
            idx = np.full((batch, 1), self.mode.expert)
            selected = onehot > 0
        return GateOutput(logits=logits, dense_weights=dense, topk_indices=idx,
                          sparse_weights=weights, selected=selected, alive=alive)

    def forward(self, x: Tensor) -> Tensor:
        batch = x.shape[0]
        out_gate = self.route(x)
        weights = out_gate.sparse_weights
        out = self.shortcut(x) if self.shortcut is not None else None
        for i, expert in enumerate(self.experts):
            rows = np.flatnonzero(out_gate.selected[:, i])
            if rows.size == 0:
                continue
            if rows.size == batch:
                y = expert(x) * weights[:, i].reshape(batch, 1, 1, 1)
            else:
                y = expert(x[rows]) * weights[rows, i].reshape(rows.size, 1, 1, 1)
                y = scatter_rows(y, rows, batch)
            out = y if out is None else out + y

        source = out_gate.dense_weights if self.constraint.importance_source == "dense" \
            else out_gate.sparse_weights
        out_gate.importance = batch_importance(source)
        if self.training:
            self.tracker.update(out_gate.importance, batch)
        self.last = out_gate
        return out

    def auxiliary_loss(self) -> Tensor | None:
        """Soft-constraint loss for the most recent forward pass (None if inactive)."""
        if self.last is None or not self.constraint.kind.is_soft:
            return None
        return auxiliary_loss(self.constraint, self.last.importance, self.last.logits.shape[0])

    def mac_breakdown(self, in_shape, k: int | None = None) -> dict[str, int]:
        """Per-sample MACs of gate, shortcut and experts assuming ``k`` experts run."""
        k = self.k if k is None else k
        if not 1 <= k <= self.num_experts:
            raise ValueError(f"k must satisfy 1 <= k <= {self.num_experts}")
        gate, _ = self.gate.mac_count(in_shape)
        shortcut = self.shortcut.mac_count(in_shape)[0] if self.shortcut is not None else 0
        per_expert, _ = self.experts[0].mac_count(in_shape)
        return {"gate": gate, "shortcut": shortcut, "per_expert": per_expert,
                "experts": k * per_expert}

    def mac_count(self, in_shape, k: int | None = None):
        b = self.mac_breakdown(in_shape, k)
        _, out_shape = self.experts[0].mac_count(in_shape)
        return b["gate"] + b["shortcut"] + b["experts"], out_shape


def flops_of_forward(layer: MoELayer, input_shape, k: int | None = None) -> int:
    """Analytic per-sample multiply-accumulate count with exactly ``k`` experts executing."""
    return layer.mac_count(tuple(input_shape[-3:]), k)[0]
