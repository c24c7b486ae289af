"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``CRITERION n: PASS|FAIL`` line with the measured
values, then asserts. Criteria 5 and 6 share one set of desk-scale training
runs (5 constraint kinds x 3 seeds, about 20 minutes on one core).
"""

import math
import time

import numpy as np
import pytest

from conftest import gradcheck, module_gradcheck
from moecnn import config as cfgmod
from moecnn.autograd import Tensor, default_dtype, xlogx
from moecnn.autograd import functional as F
from moecnn.autograd import tensor as T
from moecnn.constraints import (
    ConstraintConfig,
    ConstraintKind,
    ImportanceTracker,
    apply_mean_constraint,
    apply_relative_constraint,
    batch_importance,
    importance_loss,
    kl_loss,
    relative_importance,
)
from moecnn.data import decode_cifar100_binary, encode_cifar100_binary
from moecnn.harness import load_datasets, mac_table, train
from moecnn.metrics import (
    coefficient_of_variation,
    gate_logit_export,
    pearson,
    spearman,
    specialization_report,
)
from moecnn.models import ModelConfig
from moecnn.moe import topk_sparsify
from test_moe import make_layer

SEEDS = (0, 1, 2)
KINDS = ("none", "importance_loss", "kl_loss", "relative_hard", "mean_hard")


def report(capsys, number: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\nCRITERION {number}: {'PASS' if ok else 'FAIL'} {detail}")


# -- 1 ------------------------------------------------------------------------------


def test_criterion_1_mac_budget(capsys):
    start = time.perf_counter()
    table = mac_table(ModelConfig(num_classes=100, moe_position=4, num_experts=4))
    elapsed = time.perf_counter() - start
    rows = {}
    for line in table.splitlines()[2:]:
        model, k, macs, gmac, params, per = line.split(",")
        rows[(model, k)] = (float(gmac), int(per) if per else None)
    base = rows[("baseline", "")][0]
    k3, per = rows[("moe_pos4", "3")]
    k4, _ = rows[("moe_pos4", "4")]
    per_g = per / 1e9
    checks = [abs(base - 0.56) <= 0.05 * 0.56, abs(k3 - 0.63) <= 0.03, abs(k4 - 0.70) <= 0.03,
              0.06 <= per_g <= 0.08, elapsed < 1.0]
    ok = all(checks)
    report(capsys, 1, ok, f"baseline={base:.4f} k3={k3:.4f} k4={k4:.4f} per_expert={per_g:.4f} GMac "
                          f"time={elapsed:.2f}s")
    assert ok


# -- 2 ------------------------------------------------------------------------------


def test_criterion_2_sparse_weight_oracle(capsys):
    cases = [((0.4368, 0.1518, 0.1934, 0.2180), (0, 3), (0.6671, 0.3329)),
             ((0.2917, 0.3326, 0.2141, 0.1616), (0, 1), (0.4672, 0.5328))]
    worst = 0.0
    for dense, kept, expected in cases:
        w, _ = topk_sparsify(Tensor([dense]), 2)
        got = w.data[0, list(kept)]
        others = np.delete(w.data[0], list(kept))
        worst = max(worst, float(np.max(np.abs(got - expected))), float(np.max(np.abs(others))))
    ok = worst <= 1e-3
    report(capsys, 2, ok, f"max_abs_error={worst:.2e}")
    assert ok


# -- 3 ------------------------------------------------------------------------------


def _op_cases():
    conv_w = lambda rng: rng.normal(size=(3, 2, 3, 3)) * 0.5  # noqa: E731
    return {
        "add": ((3, 4), (3, 4), lambda a, b: (a + b * a).sum()),
        "sub": ((3, 4), (3, 4), lambda a, b: ((a - b) * a).sum()),
        "div": ((3, 4), (3, 4), lambda a, b: (a / (b * b + 1.0)).sum()),
        "power": ((3, 4), (3, 4), lambda a, b: T.power(a * a + 1.0, 1.5).sum() + (b * a).sum()),
        "exp_log": ((3, 4), (3, 4), lambda a, b: (T.exp(a * 0.5) * T.log(b * b + 1.0)).sum()),
        "xlogx": ((3, 4), (3, 4), lambda a, b: xlogx(a * a + 0.1).sum() + (b * a).sum()),
        "relu": ((3, 4), (3, 4), lambda a, b: (T.relu(a + 3.0) * b).sum()),
        "reduce_reshape_index": ((3, 4), (3, 4),
                                 lambda a, b: (T.mean(a * b, axis=1) ** 2).sum() + a.reshape(-1)[2:7].sum()),
        "conv2d": ((2, 2, 5, 5), None, None),
        "linear": ((4, 5), (3, 5), lambda x, w: (F.linear(x, w) ** 2).sum()),
        "global_avg_pool": ((2, 3, 4, 4), (2, 3), lambda x, g: (F.global_avg_pool(x) * g).sum()),
        "batchnorm2d": ((4, 3, 3, 3), (4, 3, 3, 3), None),
        "softmax": ((3, 4), (3, 4), lambda z, g: (F.softmax(z) * g).sum()),
        "cross_entropy": ((5, 4), None, None),
        "topk_sparsify": ((3, 4), (3, 4), lambda z, g: (topk_sparsify(F.softmax(z), 2)[0] * g).sum()),
    }, conv_w


def _importance_loss_case(z):
    return importance_loss(batch_importance(topk_sparsify(F.softmax(z), 2)[0]), 0.5)


def _kl_loss_case(z):
    return kl_loss(batch_importance(topk_sparsify(F.softmax(z), 2)[0]), z.shape[0], 0.5)


def test_criterion_3_gradient_integrity(capsys):
    start = time.perf_counter()
    cases, conv_w = _op_cases()
    worst = {}
    for seed in range(20):
        rng = np.random.default_rng(seed)
        for name, (sa, sb, fn) in cases.items():
            a = rng.normal(size=sa)
            if name == "conv2d":
                w = conv_w(rng)
                err = gradcheck(lambda x, k: (F.conv2d(x, k, stride=1, padding=1) ** 2).sum(), [a, w])
            elif name == "batchnorm2d":
                g = rng.normal(size=sb)
                gamma, beta = rng.normal(size=3), rng.normal(size=3)
                err = gradcheck(lambda x, ga, be: (F.batchnorm2d(x, ga, be, np.zeros(3), np.ones(3),
                                                                 training=True) * Tensor(g)).sum(),
                                [a, gamma, beta])
            elif name == "cross_entropy":
                labels = rng.integers(0, 4, size=5)
                err = gradcheck(lambda z: F.cross_entropy(z, labels), [a])
            else:
                b = rng.normal(size=sb)
                err = gradcheck(fn, [a, b])
            worst[name] = max(worst.get(name, 0.0), err)
        z = rng.normal(size=(6, 4))
        worst["importance_loss"] = max(worst.get("importance_loss", 0.0), gradcheck(_importance_loss_case, [z]))
        worst["kl_loss"] = max(worst.get("kl_loss", 0.0), gradcheck(_kl_loss_case, [z]))
        layer = make_layer(seed=seed)
        x = rng.normal(size=(3, 3, 5, 5))
        g = Tensor(rng.normal(size=(3, 4, 5, 5)))
        err = gradcheck(lambda x_: (layer(x_) * g).sum(), [x])
        err = max(err, module_gradcheck(layer.parameters(), lambda: (layer(Tensor(x)) * g).sum(),
                                        max_entries=4, seed=seed))
        worst["moe_sparse_forward"] = max(worst.get("moe_sparse_forward", 0.0), err)
    elapsed = time.perf_counter() - start
    name, value = max(worst.items(), key=lambda kv: kv[1])
    ok = value < 1e-4 and elapsed < 120
    report(capsys, 3, ok, f"{len(worst)} operations x 20 instances, worst={name} {value:.2e}, "
                          f"time={elapsed:.1f}s")
    assert ok, worst


# -- 4 ------------------------------------------------------------------------------


def test_criterion_4_constraint_math(capsys):
    errors = []
    errors.append(abs(importance_loss(Tensor([1.0, 3.0]), 0.5).item() - 0.125))
    errors.append(abs(importance_loss(Tensor([3.0, 3.0, 3.0]), 0.5).item()))
    errors.append(abs(kl_loss(Tensor([5.0, 0.0, 0.0, 0.0]), 5, 0.25).item() - 0.25 * math.log(4)))
    errors.append(abs(kl_loss(Tensor([2.0, 2.0, 2.0, 2.0]), 8, 0.5).item()))
    errors.append(float(np.max(np.abs(relative_importance([4.0, 0, 0, 0]) - [3, -1, -1, -1]))))
    errors.append(abs(coefficient_of_variation([1, 3]) - 50.0))
    errors.append(abs(coefficient_of_variation([5, 0, 0, 0]) - 100 * math.sqrt(3)))

    # brute force over random importance vectors
    rng = np.random.default_rng(0)
    for _ in range(50):
        imp = rng.random(4) * 10
        b = imp.sum()
        cv2 = np.var(imp) / imp.mean() ** 2
        errors.append(abs(importance_loss(Tensor(imp), 0.7).item() - 0.7 * cv2))
        p = imp / b
        errors.append(abs(kl_loss(Tensor(imp), b, 0.3).item() - 0.3 * float(np.sum(p * np.log(p * 4)))))

    dense = rng.dirichlet(np.ones(4), size=5)
    rel = ImportanceTracker(4, cum_rel_importance=np.array([0.6, 0.0, -0.3, -0.3]))
    out_rel = apply_relative_constraint(rel, dense, 0.5).data
    exp_rel = np.concatenate([np.zeros((5, 1)), dense[:, 1:] / dense[:, 1:].sum(axis=1, keepdims=True)], 1)
    errors.append(float(np.max(np.abs(out_rel - exp_rel))))
    mean = ImportanceTracker(4, step=3, running_mean_importance=np.array([0.6, 0.2, 0.1, 0.1]),
                             running_batch_mean=0.25)
    out_mean = apply_mean_constraint(mean, np.full((2, 4), 0.25), 0.3).data
    errors.append(float(np.max(np.abs(out_mean - [[0, 1 / 3, 1 / 3, 1 / 3]] * 2))))
    math_ok = max(errors) <= 1e-9

    # masked batches keep convex rows; the first batch is never masked
    convex_ok = first_ok = True
    for kind in (ConstraintKind.RELATIVE_HARD, ConstraintKind.MEAN_HARD):
        layer = make_layer(constraint=ConstraintConfig(kind, m_rel=0.1, m_mean=0.05), seed=3)
        layer.train()
        for step in range(8):
            x = Tensor(rng.normal(size=(6, 3, 5, 5)))
            layer(x)
            g = layer.last
            if step == 0:
                first_ok &= g.alive is None
            w = g.sparse_weights.data
            convex_ok &= bool(np.all(w >= 0) and np.allclose(w.sum(axis=1), 1.0, atol=1e-12))
            if g.alive is not None:
                convex_ok &= bool(np.all(w[:, ~g.alive] == 0))
    ok = math_ok and convex_ok and first_ok
    report(capsys, 4, ok, f"max_oracle_error={max(errors):.1e} convex_rows={convex_ok} "
                          f"first_batch_unmasked={first_ok}")
    assert ok


# -- 5 and 6: desk-scale training ------------------------------------------------------


@pytest.fixture(scope="module")
def desk_runs():
    base = cfgmod.desk_preset()
    with default_dtype(base.effective_precision()):
        datasets = load_datasets(base)
    runs = {}
    start = time.perf_counter()
    for kind in KINDS:
        for seed in SEEDS:
            cfg = cfgmod.desk_preset()
            cfg.model.constraint.kind = ConstraintKind(kind)
            cfg.seed = seed
            runs[kind, seed] = train(cfg, datasets=datasets)
    return {"runs": runs, "test": datasets[1], "seconds": time.perf_counter() - start,
            "precision": base.effective_precision()}


def _dead(runs, kind):
    return [4 - runs[kind, s].test_report.live_experts for s in SEEDS]


@pytest.mark.slow
def test_criterion_5_collapse_vs_balance(capsys, desk_runs):
    runs = desk_runs["runs"]
    dead_none = _dead(runs, "none")
    live_imp = [runs["importance_loss", s].test_report.live_experts for s in SEEDS]
    live_kl = [runs["kl_loss", s].test_report.live_experts for s in SEEDS]
    cv_imp = [runs["importance_loss", s].test_report.cv_imp for s in SEEDS]
    cv_kl = [runs["kl_loss", s].test_report.cv_imp for s in SEEDS]
    dead_rel = _dead(runs, "relative_hard")
    dead_mean = _dead(runs, "mean_hard")
    a = max(dead_none) >= 1
    b = all(v == 4 for v in live_imp + live_kl) and np.mean(cv_imp) <= np.mean(cv_kl)
    c = np.mean(dead_mean) > np.mean(dead_rel)
    minutes = desk_runs["seconds"] / 60
    ok = a and b and c and minutes < 30
    report(capsys, 5, ok,
           f"(a) dead[none]={dead_none} {'ok' if a else 'no'}; "
           f"(b) live[imp]={live_imp} live[kl]={live_kl} cv_imp avg {np.mean(cv_imp):.1f} vs "
           f"{np.mean(cv_kl):.1f} {'ok' if b else 'no'}; "
           f"(c) dead[mean]={dead_mean} dead[rel]={dead_rel} {'ok' if c else 'no'}; "
           f"training={minutes:.1f} min")
    assert ok


@pytest.mark.slow
def test_criterion_6_specialization(capsys, desk_runs):
    test = desk_runs["test"]
    per_domain = cfgmod.desk_preset().data.classes_per_domain
    details = []
    ok = True
    with default_dtype(desk_runs["precision"]):
        for kind in ("importance_loss", "kl_loss"):
            for seed in SEEDS:
                rep = specialization_report(desk_runs["runs"][kind, seed].model, test)
                aligned = [e for e in range(rep.table.mean_dense.shape[1])
                           if len({c // per_domain for c, _, _ in rep.table.top_classes(e, 3)}) == 1]
                count, total = rep.best_expert_count
                run_ok = bool(aligned) and count >= 0.5 * total
                ok &= run_ok
                details.append(f"{kind}/{seed}: aligned_experts={aligned} moe>=best {count}/{total}")
    report(capsys, 6, ok, "; ".join(details))
    assert ok


# -- 7 ------------------------------------------------------------------------------


def test_criterion_7_correlation(capsys):
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        x, y = rng.normal(size=25), rng.normal(size=25)
        dx, dy = x - x.mean(), y - y.mean()
        direct = float(np.sum(dx * dy) / np.sqrt(np.sum(dx * dx) * np.sum(dy * dy)))
        worst = max(worst, abs(pearson(x, y) - direct))
        rx = np.argsort(np.argsort(x)) + 1.0
        ry = np.argsort(np.argsort(y)) + 1.0
        n = len(x)
        direct_s = 1 - 6 * float(np.sum((rx - ry) ** 2)) / (n * (n * n - 1))
        worst = max(worst, abs(spearman(x, y) - direct_s))
    # forced-expert accuracy as a monotone function of assigned weight
    weights = np.linspace(0.05, 0.9, 12)
    accuracy = 1 / (1 + np.exp(-8 * (weights - 0.4)))
    rho = spearman(weights, accuracy)
    ok = worst <= 1e-10 and rho == 1.0
    report(capsys, 7, ok, f"max_formula_error={worst:.1e} monotone_spearman={rho!r}")
    assert ok


# -- 8 ------------------------------------------------------------------------------


def _small_config(epochs):
    cfg = cfgmod.desk_preset()
    cfg.data.samples_per_class = 6
    cfg.data.test_samples_per_class = 3
    cfg.data.resolution = 8
    cfg.model.input_resolution = (8, 8)
    cfg.model.width_multiplier = 0.0625
    cfg.model.constraint.kind = ConstraintKind.RELATIVE_HARD
    cfg.batch_size = 16
    cfg.epochs = epochs
    return cfg


def test_criterion_8_determinism(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv(cfgmod.DETERMINISTIC_ENV, "1")
    cfg = _small_config(4)
    train(cfg, out_dir=str(tmp_path / "straight"))
    train(cfg, out_dir=str(tmp_path / "resumed"), stop_after=2)
    train(cfg, out_dir=str(tmp_path / "resumed"), resume=str(tmp_path / "resumed" / "checkpoint.ckpt"))
    resume_ok = ((tmp_path / "straight" / "metrics.csv").read_bytes()
                 == (tmp_path / "resumed" / "metrics.csv").read_bytes()
                 and (tmp_path / "straight" / "checkpoint.ckpt").read_bytes()
                 == (tmp_path / "resumed" / "checkpoint.ckpt").read_bytes())

    raw = bytes([3, 17]) + bytes(j % 256 for j in range(3072)) + bytes([19, 99]) + bytes([255]) * 3072
    ds = decode_cifar100_binary(raw)
    decode_ok = (ds.fine_labels.tolist() == [17, 99] and ds.coarse_labels.tolist() == [3, 19]
                 and ds.images[0, 1, 0, 0] == np.float32(0) and ds.images[0, 0, 0, 5] == np.float32(5 / 255)
                 and bool(np.all(ds.images[1] == 1.0))
                 and encode_cifar100_binary(ds.images, ds.fine_labels, ds.coarse_labels) == raw)

    from moecnn.harness import model_from_checkpoint

    ckpt = str(tmp_path / "straight" / "checkpoint.ckpt")
    exports = []
    for _ in range(2):
        model, loaded, _ = model_from_checkpoint(ckpt)
        with default_dtype(loaded.effective_precision()):
            exports.append(gate_logit_export(model, load_datasets(loaded)[1]).encode())
    export_ok = exports[0] == exports[1]
    ok = resume_ok and decode_ok and export_ok
    report(capsys, 8, ok, f"resume_bit_identical={resume_ok} cifar_fixture_exact={decode_ok} "
                          f"gate_export_identical={export_ok}")
    assert ok
