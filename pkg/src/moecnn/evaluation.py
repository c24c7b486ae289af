"""Inference passes that also collect per-sample gate records."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, no_grad
from .data import Dataset
from .models import ResNet
from .moe import RoutingMode


@dataclass
class GateRecords:
    logits: np.ndarray  # [n, N]
    dense: np.ndarray
    sparse: np.ndarray
    selected: np.ndarray
    topk: list[list[int]] = field(repr=False)


@dataclass
class EvalPass:
    predictions: np.ndarray
    labels: np.ndarray
    gates: list[GateRecords]

    @property
    def accuracy(self) -> float:
        return float((self.predictions == self.labels).mean()) if len(self.labels) else 0.0


def run_eval(model: ResNet, dataset: Dataset, mode: RoutingMode | str | None = None,
             batch_size: int = 256) -> EvalPass:
    """Evaluate in eval mode (no masking, running BN statistics), in storage order."""
    was_training = model.training
    layers = model.moe_layers()
    previous = [layer.mode for layer in layers]
    model.eval()
    if mode is not None:
        model.set_mode(mode)
    preds = []
    parts: list[list[tuple]] = [[] for _ in layers]
    try:
        with no_grad():
            for start in range(0, len(dataset), batch_size):
                x = Tensor(dataset.images[start:start + batch_size])
                out = model(x)
                preds.append(out.data.argmax(axis=1))
                for li, layer in enumerate(layers):
                    g = layer.last
                    parts[li].append((g.logits.data, g.dense_weights.data, g.sparse_weights.data,
                                      g.selected, [list(map(int, r)) for r in g.topk_indices]))
    finally:
        for layer, m in zip(layers, previous):
            layer.mode = m
        model.train(was_training)
    gates = []
    for chunks in parts:
        gates.append(GateRecords(
            logits=np.concatenate([c[0] for c in chunks]),
            dense=np.concatenate([c[1] for c in chunks]),
            sparse=np.concatenate([c[2] for c in chunks]),
            selected=np.concatenate([c[3] for c in chunks]),
            topk=[r for c in chunks for r in c[4]],
        ))
    predictions = np.concatenate(preds) if preds else np.empty(0, dtype=np.int64)
    return EvalPass(predictions, dataset.fine_labels.copy(), gates)
