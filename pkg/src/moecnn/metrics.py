"""Utilization and specialization analysis of trained MoE models."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

DEAD_SHARE = 0.01


def coefficient_of_variation(values) -> float:
    """Population CV in percent."""
    v = np.asarray(values, dtype=np.float64)
    mu = v.mean()
    if mu == 0:
        raise ValueError("coefficient of variation undefined for zero mean")
    return float(100.0 * v.std() / mu)


def dead_expert_scan(shares) -> tuple[set[int], int]:
    """Experts whose importance share is strictly below 1% are dead."""
    shares = np.asarray(shares, dtype=np.float64)
    dead = {int(i) for i in np.flatnonzero(shares < DEAD_SHARE)}
    return dead, len(shares) - len(dead)


@dataclass
class UtilizationReport:
    cv_act: float
    cv_imp: float
    live_experts: int
    per_expert_importance_share: np.ndarray
    activation_counts: np.ndarray
    dead_experts: set[int] = field(default_factory=set)

    def as_dict(self) -> dict:
        return {
            "cv_act": self.cv_act,
            "cv_imp": self.cv_imp,
            "live_experts": self.live_experts,
            "dead_experts": sorted(self.dead_experts),
            "shares": [float(s) for s in self.per_expert_importance_share],
            "activation_counts": [int(c) for c in self.activation_counts],
        }


def utilization_report(sparse_weights, selected=None) -> UtilizationReport:
    """Utilization over an evaluation pass.

    ``sparse_weights`` is ``[n, N]``; ``selected`` marks the experts that ran
    for each sample (defaults to the nonzero weights). A sample counts toward
    every expert it activates.
    """
    w = np.asarray(sparse_weights, dtype=np.float64)
    sel = (w > 0) if selected is None else np.asarray(selected, dtype=bool)
    importance = w.sum(axis=0)
    counts = sel.sum(axis=0)
    shares = importance / importance.sum()
    dead, live = dead_expert_scan(shares)
    return UtilizationReport(coefficient_of_variation(counts), coefficient_of_variation(importance),
                             live, shares, counts, dead)


# -- class-level weight allocation -----------------------------------------------


@dataclass
class ClassWeightTable:
    class_names: list[str]
    mean_dense: np.ndarray  # [C, N]
    mean_sparse: np.ndarray  # [C, N]
    activation_counts: np.ndarray  # [C, N]
    present: np.ndarray  # [C] bool, classes with at least one sample

    def top_classes(self, expert: int, n: int | None = None, sparse: bool = False):
        """Classes sorted by the expert's mean weight, descending (ties by class id)."""
        table = self.mean_sparse if sparse else self.mean_dense
        rows = np.flatnonzero(self.present)
        order = rows[np.argsort(-table[rows, expert], kind="stable")]
        if n is not None:
            order = order[:n]
        return [(int(c), self.class_names[c], float(table[c, expert])) for c in order]


def class_weight_table(dense, sparse, selected, labels, class_names) -> ClassWeightTable:
    dense = np.asarray(dense, dtype=np.float64)
    sparse = np.asarray(sparse, dtype=np.float64)
    selected = np.asarray(selected, dtype=bool)
    labels = np.asarray(labels)
    num_classes, n_exp = len(class_names), dense.shape[1]
    mean_dense = np.full((num_classes, n_exp), np.nan)
    mean_sparse = np.full((num_classes, n_exp), np.nan)
    counts = np.zeros((num_classes, n_exp), dtype=np.int64)
    present = np.zeros(num_classes, dtype=bool)
    for c in range(num_classes):
        rows = labels == c
        if not rows.any():
            log.warning("class %s has no samples; skipped", class_names[c])
            continue
        present[c] = True
        mean_dense[c] = dense[rows].mean(axis=0)
        mean_sparse[c] = sparse[rows].mean(axis=0)
        counts[c] = selected[rows].sum(axis=0)
    return ClassWeightTable(list(class_names), mean_dense, mean_sparse, counts, present)


def per_class_accuracy(predictions, labels, num_classes: int) -> np.ndarray:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    acc = np.full(num_classes, np.nan)
    for c in range(num_classes):
        rows = labels == c
        if rows.any():
            acc[c] = float((predictions[rows] == c).mean())
    return acc


def best_expert_comparison(moe_accuracy, forced_accuracy) -> tuple[int, int]:
    """Classes where the full MoE is at least as accurate as every single forced expert.

    ``forced_accuracy`` is ``[N, C]``. Returns ``(count, classes compared)``.
    """
    moe = np.asarray(moe_accuracy, dtype=np.float64)
    forced = np.asarray(forced_accuracy, dtype=np.float64)
    valid = ~np.isnan(moe)
    best = np.nanmax(forced[:, valid], axis=0)
    return int((moe[valid] >= best).sum()), int(valid.sum())


# -- correlations -------------------------------------------------------------------


def pearson(x, y) -> float:
    """Pearson correlation; NaN when either input has zero variance."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson needs two 1-d vectors of equal length")
    dx = x - x.mean()
    dy = y - y.mean()
    den = math.sqrt(float((dx * dx).sum()) * float((dy * dy).sum()))
    if den == 0:
        return math.nan
    return float((dx * dy).sum() / den)


def average_ranks(x) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    sorted_x = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> float:
    return pearson(average_ranks(x), average_ranks(y))


@dataclass
class CorrelationRow:
    name: str
    pearson: float
    spearman: float


def expert_accuracy_correlation(forced_accuracy, table: ClassWeightTable) -> list[CorrelationRow]:
    """Correlate forced-expert per-class accuracy with the gate's per-class allocation.

    Each point is one (expert, class) pair: the accuracy of the expert alone
    on that class against the mean sparse weight, mean dense weight and
    activation count the gate gives that expert on that class.
    """
    acc = np.asarray(forced_accuracy, dtype=np.float64)  # [N, C]
    cls = np.flatnonzero(table.present & ~np.isnan(acc).any(axis=0))
    if len(cls) < 3:
        raise ValueError("correlation needs at least 3 classes")
    y = acc[:, cls].ravel()
    rows = []
    for name, values in (("sparse_weights", table.mean_sparse),
                         ("dense_weights", table.mean_dense),
                         ("activations", table.activation_counts)):
        x = np.asarray(values, dtype=np.float64)[cls].T.ravel()
        rows.append(CorrelationRow(name, pearson(y, x), spearman(y, x)))
    return rows


def format_corr(value: float) -> str:
    return "undefined" if math.isnan(value) else f"{value:.6f}"


def correlation_csv(rows: list[CorrelationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["correlation_with_expert_accuracy", "pearson", "spearman"])
    for r in rows:
        w.writerow([r.name, format_corr(r.pearson), format_corr(r.spearman)])
    return buf.getvalue()


@dataclass
class SpecializationReport:
    table: ClassWeightTable
    forced_accuracy: np.ndarray  # [N, C]
    moe_accuracy: np.ndarray  # [C]
    best_expert_count: tuple[int, int] = (0, 0)

    def to_csv(self) -> str:
        """Per class and expert: mean dense/sparse weight, activations, forced accuracy."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        n_exp = self.table.mean_dense.shape[1]
        w.writerow(["class_id", "class_name", "expert", "mean_dense_weight", "mean_sparse_weight",
                    "activations", "forced_accuracy", "moe_accuracy"])
        for c in np.flatnonzero(self.table.present):
            for e in range(n_exp):
                w.writerow([int(c), self.table.class_names[c], e,
                            f"{self.table.mean_dense[c, e]:.6f}",
                            f"{self.table.mean_sparse[c, e]:.6f}",
                            int(self.table.activation_counts[c, e]),
                            f"{self.forced_accuracy[e, c]:.6f}", f"{self.moe_accuracy[c]:.6f}"])
        return buf.getvalue()

    def top_classes_csv(self, top: int = 5) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["expert", "rank", "class_id", "class_name", "mean_dense_weight"])
        for e in range(self.table.mean_dense.shape[1]):
            for rank, (c, name, weight) in enumerate(self.table.top_classes(e, top), start=1):
                w.writerow([e, rank, c, name, f"{weight:.6f}"])
        return buf.getvalue()


# -- gate logit export ------------------------------------------------------------


def gate_records_csv(logits, dense, topk, labels, sample_ids=None) -> str:
    """One row per sample: id, label, logits, dense weights, selected expert ids."""
    logits = np.asarray(logits)
    dense = np.asarray(dense)
    n, n_exp = logits.shape
    ids = np.arange(n) if sample_ids is None else np.asarray(sample_ids)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_id", "label"] + [f"logit_{i}" for i in range(n_exp)]
               + [f"weight_{i}" for i in range(n_exp)] + ["topk"])
    for r in range(n):
        w.writerow([int(ids[r]), int(labels[r])]
                   + [f"{float(v):.9g}" for v in logits[r]]
                   + [f"{float(v):.9g}" for v in dense[r]]
                   + [" ".join(str(int(i)) for i in topk[r])])
    return buf.getvalue()


def read_gate_export(text: str):
    """Parse a gate export back into arrays ``(ids, labels, logits, dense, topk)``."""
    rows = list(csv.reader(io.StringIO(text)))
    header, body = rows[0], rows[1:]
    n_exp = sum(h.startswith("logit_") for h in header)
    ids = np.array([int(r[0]) for r in body])
    labels = np.array([int(r[1]) for r in body])
    logits = np.array([[float(v) for v in r[2:2 + n_exp]] for r in body])
    dense = np.array([[float(v) for v in r[2 + n_exp:2 + 2 * n_exp]] for r in body])
    topk = [[int(i) for i in r[-1].split()] for r in body]
    return ids, labels, logits, dense, topk


# -- model-level wrappers -----------------------------------------------------------


def _layer(model, layer_id: int):
    layers = model.moe_layers()
    if not 0 <= layer_id < len(layers):
        raise ValueError(f"invalid MoE layer id {layer_id}; model has {len(layers)} MoE layers")
    return layers[layer_id]


def per_class_weight_table(model, dataset, layer_id: int = 0, batch_size: int = 256) -> ClassWeightTable:
    from .evaluation import run_eval

    _layer(model, layer_id)
    ev = run_eval(model, dataset, "sparse", batch_size)
    g = ev.gates[layer_id]
    return class_weight_table(g.dense, g.sparse, g.selected, ev.labels, dataset.class_names)


def forced_expert_eval(model, dataset, expert: int, batch_size: int = 256) -> np.ndarray:
    """Per-class accuracy with every MoE layer routing all weight to ``expert``."""
    from .evaluation import run_eval
    from .moe import RoutingMode

    layers = model.moe_layers()
    if not layers:
        raise ValueError("model has no MoE layer")
    if not all(0 <= expert < layer.num_experts for layer in layers):
        raise ValueError(f"invalid expert id {expert}")
    ev = run_eval(model, dataset, RoutingMode.forced(expert), batch_size)
    return per_class_accuracy(ev.predictions, ev.labels, dataset.num_classes)


def specialization_report(model, dataset, layer_id: int = 0, batch_size: int = 256) -> SpecializationReport:
    from .evaluation import run_eval

    layer = _layer(model, layer_id)
    ev = run_eval(model, dataset, "sparse", batch_size)
    g = ev.gates[layer_id]
    table = class_weight_table(g.dense, g.sparse, g.selected, ev.labels, dataset.class_names)
    moe_acc = per_class_accuracy(ev.predictions, ev.labels, dataset.num_classes)
    forced = np.stack([forced_expert_eval(model, dataset, e, batch_size)
                       for e in range(layer.num_experts)])
    return SpecializationReport(table, forced, moe_acc, best_expert_comparison(moe_acc, forced))


def gate_logit_export(model, dataset, layer_id: int = 0, batch_size: int = 256) -> str:
    """CSV of gate logits, dense weights and top-k ids for every sample, storage order."""
    from .evaluation import run_eval

    _layer(model, layer_id)
    ev = run_eval(model, dataset, "sparse", batch_size)
    g = ev.gates[layer_id]
    return gate_records_csv(g.logits, g.dense, g.topk, ev.labels)
