"""Training, evaluation, analysis, MAC reports and multi-seed sweeps."""

from __future__ import annotations

import csv
import io
import logging
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import config as cfgmod
from .autograd import NonFiniteError, Tensor, default_dtype
from .autograd import functional as F
from .checkpoint import Checkpoint
from .config import ConfigError, RunConfig
from .data import (
    Dataset,
    class_subset,
    load_cifar100_binary,
    normalize,
    random_crop_flip,
    batch_iterator,
    synthetic_clustered_dataset,
)
from .evaluation import run_eval
from .metrics import (
    UtilizationReport,
    correlation_csv,
    expert_accuracy_correlation,
    gate_records_csv,
    per_class_accuracy,
    specialization_report,
    utilization_report,
)
from .models import ResNet, build_model, count_macs, expert_macs
from .moe import RoutingMode
from .optim import Adam

log = logging.getLogger(__name__)

METRIC_FIELDS = ["epoch", "step", "task_loss", "aux_loss", "train_accuracy", "test_accuracy",
                 "live_experts", "cv_act", "cv_imp", "shares", "masked_batches"]


class NumericError(RuntimeError):
    """Training produced a non-finite value; ``diagnostics`` holds the last gate statistics."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


def load_datasets(config: RunConfig) -> tuple[Dataset, Dataset]:
    d = config.data
    if d.kind == "synthetic":
        common = dict(num_domains=d.num_domains, classes_per_domain=d.classes_per_domain,
                      resolution=d.resolution, noise=d.noise)
        train = synthetic_clustered_dataset(d.data_seed, samples_per_class=d.samples_per_class, **common)
        test = synthetic_clustered_dataset(d.data_seed + 1_000_003,
                                           samples_per_class=d.test_samples_per_class, **common)
    else:
        train = load_cifar100_binary(os.path.join(d.path, "train.bin"))
        test = load_cifar100_binary(os.path.join(d.path, "test.bin"))
        if d.classes:
            train, test = class_subset(train, d.classes), class_subset(test, d.classes)
    if d.normalize:
        train.images = normalize(train.images)
        test.images = normalize(test.images)
    return train, test


def _gate_diagnostics(model: ResNet) -> dict:
    out = {}
    for i, layer in enumerate(model.moe_layers()):
        g = layer.last
        if g is None:
            continue
        out[f"layer{i}"] = {
            "logits_min": float(np.min(g.logits.data)),
            "logits_max": float(np.max(g.logits.data)),
            "mean_dense": [float(v) for v in g.dense_weights.data.mean(axis=0)],
            "importance": [float(v) for v in g.importance.data] if g.importance is not None else None,
            "tracker": layer.tracker.to_dict(),
        }
    return out


@dataclass
class TrainResult:
    model: ResNet
    optimizer: Adam
    history: list[dict]
    checkpoint: Checkpoint
    epoch: int
    step: int
    test_report: UtilizationReport | None = None
    test_accuracy: float | None = None
    out_dir: str | None = None


def make_checkpoint(config: RunConfig, model: ResNet, opt: Adam, epoch: int, step: int) -> Checkpoint:
    arrays = dict(model.state_dict())
    arrays.update(opt.state_arrays())
    layers = model.moe_layers()
    return Checkpoint(config=cfgmod.to_dict(config), config_hash=cfgmod.config_hash(config),
                      arrays=arrays, epoch=epoch, step=step, adam_t=opt.t,
                      trackers=[layer.tracker.to_dict() for layer in layers],
                      rng_states=[layer._noise_rng.bit_generator.state for layer in layers])


def restore_checkpoint(ckpt: Checkpoint, model: ResNet, opt: Adam | None = None) -> None:
    from .constraints import ImportanceTracker

    state = {k: v for k, v in ckpt.arrays.items() if not k.startswith("adam.")}
    model.load_state_dict(state)
    if opt is not None:
        opt.load_state(ckpt.adam_t, ckpt.arrays)
    for layer, tr, rs in zip(model.moe_layers(), ckpt.trackers, ckpt.rng_states):
        layer.tracker = ImportanceTracker.from_dict(tr)
        layer._noise_rng.bit_generator.state = rs


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return " ".join(_fmt(x) for x in v)
    return str(v)


def metrics_csv(history: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for row in history:
        w.writerow([_fmt(row.get(k, "")) for k in METRIC_FIELDS])
    return buf.getvalue()


def _evaluate_epoch(model: ResNet, test: Dataset) -> tuple[float, UtilizationReport | None]:
    try:
        ev = run_eval(model, test)
    except NonFiniteError as exc:
        raise NumericError(f"non-finite value during evaluation: {exc}", _gate_diagnostics(model)) from exc
    report = utilization_report(ev.gates[0].sparse, ev.gates[0].selected) if ev.gates else None
    return ev.accuracy, report


def train(config: RunConfig, out_dir: str | None = None, resume: str | Checkpoint | None = None,
          force: bool = False, stop_after: int | None = None, datasets=None) -> TrainResult:
    """Train ``config`` and write metrics.csv, checkpoint.ckpt and summary.txt to ``out_dir``.

    ``stop_after`` ends the run after that many total epochs (used to test resume).
    """
    config.validate(check_paths=datasets is None)
    precision = config.effective_precision()
    with default_dtype(precision):
        train_ds, test_ds = datasets if datasets is not None else load_datasets(config)
        model = build_model(config.model, seed=config.seed)
        opt = Adam(model.parameters(), lr=config.optimizer.lr,
                   betas=(config.optimizer.beta1, config.optimizer.beta2), eps=config.optimizer.eps)
        history: list[dict] = []
        start_epoch, step = 0, 0
        if resume is not None:
            ckpt = Checkpoint.load(resume) if isinstance(resume, (str, os.PathLike)) else resume
            if ckpt.config_hash != cfgmod.config_hash(config) and not force:
                raise ConfigError("checkpoint config hash does not match the run config")
            restore_checkpoint(ckpt, model, opt)
            start_epoch, step = ckpt.epoch, ckpt.step
            if out_dir and os.path.exists(os.path.join(out_dir, "metrics.csv")):
                history = read_metrics(os.path.join(out_dir, "metrics.csv"))[:start_epoch]

        end_epoch = config.epochs if stop_after is None else min(config.epochs, stop_after)
        last_acc, last_report = None, None
        for epoch in range(start_epoch, end_epoch):
            model.train()
            task_sum = aux_sum = 0.0
            correct = seen = batches = 0
            masked = 0
            aug_rng = np.random.default_rng([config.seed, epoch, 7])
            for images, labels, _ in batch_iterator(train_ds, config.batch_size, config.seed, True, epoch):
                if config.data.augment:
                    images = random_crop_flip(images, aug_rng)
                try:
                    logits = model(Tensor(images))
                    task = F.cross_entropy(logits, labels)
                    aux = model.auxiliary_loss()
                    loss = task if aux is None else task + aux
                    opt.zero_grad()
                    loss.backward()
                except NonFiniteError as exc:
                    diag = _gate_diagnostics(model)
                    raise NumericError(f"non-finite value at epoch {epoch} step {step}: {exc}", diag) from exc
                opt.step()
                step += 1
                batches += 1
                task_sum += task.item()
                aux_sum += 0.0 if aux is None else aux.item()
                correct += int((logits.data.argmax(axis=1) == labels).sum())
                seen += len(labels)
                masked += sum(layer.last.alive is not None for layer in model.moe_layers())
            row = {"epoch": epoch + 1, "step": step, "task_loss": task_sum / max(batches, 1),
                   "aux_loss": aux_sum / max(batches, 1), "train_accuracy": correct / max(seen, 1),
                   "masked_batches": masked}
            if (epoch + 1) % config.eval_every == 0 or epoch + 1 == end_epoch:
                last_acc, last_report = _evaluate_epoch(model, test_ds)
                row["test_accuracy"] = last_acc
                if last_report is not None:
                    row.update(live_experts=last_report.live_experts, cv_act=last_report.cv_act,
                               cv_imp=last_report.cv_imp,
                               shares=[float(s) for s in last_report.per_expert_importance_share])
            history.append(row)
            log.info("epoch %d task_loss=%.4f aux=%.4f test_acc=%s", epoch + 1, row["task_loss"],
                     row["aux_loss"], row.get("test_accuracy"))
        ckpt = make_checkpoint(config, model, opt, end_epoch if end_epoch > start_epoch else start_epoch, step)
        if last_report is None and model.moe_layers():
            last_acc, last_report = _evaluate_epoch(model, test_ds)
        result = TrainResult(model, opt, history, ckpt, ckpt.epoch, step, last_report, last_acc, out_dir)
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            with open(os.path.join(out_dir, "metrics.csv"), "w") as fh:
                fh.write(metrics_csv(history))
            ckpt.save(os.path.join(out_dir, "checkpoint.ckpt"))
            with open(os.path.join(out_dir, "config.ini"), "w") as fh:
                fh.write(cfgmod.dumps(config))
            with open(os.path.join(out_dir, "summary.txt"), "w") as fh:
                fh.write(run_summary(config, result))
        return result


def read_metrics(path: str) -> list[dict]:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        d = {}
        for k, v in r.items():
            if v == "":
                continue
            if k in ("epoch", "step", "live_experts", "masked_batches"):
                d[k] = int(v)
            elif k == "shares":
                d[k] = [float(x) for x in v.split()]
            else:
                d[k] = float(v)
        out.append(d)
    return out


def run_summary(config: RunConfig, result: TrainResult) -> str:
    lines = ["# moecnn run summary, format 1", "", "[run]",
             f"config_hash={cfgmod.config_hash(config)}", f"seed={config.seed}",
             f"epochs={result.epoch}", f"steps={result.step}",
             f"constraint={config.model.constraint.kind.value}"]
    if result.test_accuracy is not None:
        lines.append(f"test_accuracy={result.test_accuracy!r}")
    if result.test_report is not None:
        r = result.test_report
        lines += ["", "[utilization]", f"cv_act={r.cv_act!r}", f"cv_imp={r.cv_imp!r}",
                  f"live_experts={r.live_experts}",
                  f"dead_experts={' '.join(map(str, sorted(r.dead_experts)))}",
                  f"shares={' '.join(repr(float(s)) for s in r.per_expert_importance_share)}"]
    return "\n".join(lines) + "\n"


# -- evaluation / analysis -----------------------------------------------------------


def model_from_checkpoint(ckpt: Checkpoint | str) -> tuple[ResNet, RunConfig, Checkpoint]:
    if not isinstance(ckpt, Checkpoint):
        ckpt = Checkpoint.load(ckpt)
    config = cfgmod.from_dict(ckpt.config)
    with default_dtype(config.effective_precision()):
        model = build_model(config.model, seed=config.seed)
        restore_checkpoint(ckpt, model)
    model.eval()
    return model, config, ckpt


@dataclass
class EvalResult:
    accuracy: float
    per_class_accuracy: np.ndarray
    utilization: UtilizationReport | None
    mode: str
    predictions: np.ndarray = field(repr=False, default=None)


def evaluate(model: ResNet, dataset: Dataset, mode: RoutingMode | str = "sparse",
             batch_size: int = 256) -> EvalResult:
    if dataset.num_classes != model.config.num_classes:
        raise ConfigError(f"dataset has {dataset.num_classes} classes, model {model.config.num_classes}")
    mode = RoutingMode.parse(mode) if isinstance(mode, str) else mode
    if mode.kind == RoutingMode.FORCED:
        for layer in model.moe_layers():
            if mode.expert >= layer.num_experts:
                raise ConfigError(f"forced expert {mode.expert} out of range")
    ev = run_eval(model, dataset, mode if model.moe_layers() else None, batch_size)
    util = utilization_report(ev.gates[0].sparse, ev.gates[0].selected) if ev.gates else None
    return EvalResult(ev.accuracy, per_class_accuracy(ev.predictions, ev.labels, dataset.num_classes),
                      util, str(mode), ev.predictions)


def eval_summary(result: EvalResult) -> str:
    lines = ["# moecnn eval summary, format 1", "", "[eval]", f"mode={result.mode}",
             f"accuracy={result.accuracy!r}"]
    if result.utilization is not None:
        u = result.utilization
        lines += ["", "[utilization]", f"cv_act={u.cv_act!r}", f"cv_imp={u.cv_imp!r}",
                  f"live_experts={u.live_experts}",
                  f"shares={' '.join(repr(float(s)) for s in u.per_expert_importance_share)}"]
    lines += ["", "[per_class_accuracy]"]
    lines += [f"{c}={a!r}" for c, a in enumerate(result.per_class_accuracy.tolist())]
    return "\n".join(lines) + "\n"


def analyze(model: ResNet, dataset: Dataset, out_dir: str | None = None, layer_id: int = 0) -> dict:
    """Specialization table, correlation table and gate-logit export for one MoE layer."""
    if not model.moe_layers():
        raise ConfigError("checkpoint has no MoE layer to analyze")
    report = specialization_report(model, dataset, layer_id)
    corr = expert_accuracy_correlation(report.forced_accuracy, report.table)
    ev = run_eval(model, dataset, "sparse")
    g = ev.gates[layer_id]
    files = {
        "specialization.csv": report.to_csv(),
        "top_classes.csv": report.top_classes_csv(),
        "correlation.csv": correlation_csv(corr),
        "gate_logits.csv": gate_records_csv(g.logits, g.dense, g.topk, ev.labels),
    }
    count, total = report.best_expert_count
    files["analysis.txt"] = "\n".join([
        "# moecnn analysis summary, format 1", "", "[best_expert_comparison]",
        f"moe_at_least_best_expert={count}", f"classes={total}",
        f"summary={count} out of {total} classes", ""])
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        for name, text in files.items():
            with open(os.path.join(out_dir, name), "w") as fh:
                fh.write(text)
    return {"report": report, "correlations": corr, "files": files}


def mac_table(model_config) -> str:
    """Full-width MAC and parameter report: baseline plus the MoE model at k = 1..N."""
    base_cfg = replace(model_config, moe_position=None)
    base = count_macs(build_model(base_cfg, materialize=False))
    lines = ["# per-sample MACs; conv = F*C*kh*kw*H'*W', linear = O*D; BN/ReLU/pool/add count 0",
             "model,k,total_macs,total_gmac,param_count,per_expert_macs"]
    lines.append(f"baseline,,{base.total_macs},{base.total_gmac:.6f},{base.param_count},")
    if model_config.moe_position is not None:
        moe = build_model(model_config, materialize=False)
        per = expert_macs(moe)
        for k in range(1, model_config.num_experts + 1):
            r = count_macs(moe, k=k)
            lines.append(f"moe_pos{model_config.moe_position},{k},{r.total_macs},{r.total_gmac:.6f},"
                         f"{r.param_count},{per}")
    return "\n".join(lines) + "\n"


# -- sweeps ----------------------------------------------------------------------------


def _sweep_one(args) -> dict:
    config_dict, seed, out_dir = args
    config = cfgmod.from_dict(config_dict)
    config.seed = seed
    result = train(config, out_dir=out_dir)
    r = result.test_report
    return {"seed": seed, "test_accuracy": result.test_accuracy,
            "cv_act": r.cv_act if r else None, "cv_imp": r.cv_imp if r else None,
            "live_experts": r.live_experts if r else None}


def aggregate(rows: list[dict], keys=("test_accuracy", "cv_act", "cv_imp", "live_experts")) -> dict:
    """Mean and sample standard deviation (n-1 denominator) of each metric over seeds."""
    out = {}
    for k in keys:
        vals = [float(r[k]) for r in rows if r.get(k) is not None]
        if not vals:
            continue
        out[k] = (statistics.fmean(vals), statistics.stdev(vals) if len(vals) > 1 else 0.0)
    return out


def sweep(config: RunConfig, seeds, out_dir: str | None = None, workers: int = 1) -> dict:
    config.validate()
    jobs = [(cfgmod.to_dict(config), int(s),
             os.path.join(out_dir, f"seed{s}") if out_dir else None) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_one, jobs))
    else:
        rows = [_sweep_one(j) for j in jobs]
    agg = aggregate(rows)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "sweep.csv"), "w") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["seed", "test_accuracy", "cv_act", "cv_imp", "live_experts"])
            for r in rows:
                w.writerow([r["seed"], _fmt(r["test_accuracy"]), _fmt(r["cv_act"]),
                            _fmt(r["cv_imp"]), _fmt(r["live_experts"])])
        with open(os.path.join(out_dir, "sweep_summary.txt"), "w") as fh:
            fh.write("# moecnn sweep summary, format 1\n\n[aggregate]\n")
            fh.write(f"seeds={' '.join(str(int(s)) for s in seeds)}\n")
            for k, (m, s) in agg.items():
                fh.write(f"{k}_mean={m!r}\n{k}_std={s!r}\n")
    return {"runs": rows, "aggregate": agg}
