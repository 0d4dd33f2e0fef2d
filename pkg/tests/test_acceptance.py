"""Acceptance suite: one pass/fail line per criterion.

Run with ``pytest tests/test_acceptance.py`` (lines appear in the terminal
summary) or directly with ``python tests/test_acceptance.py``.
"""
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from recast import tensor as T
from recast.cli import main as cli_main
from recast.config import RunConfig
from recast.core import (RecastConfig, RecastModel, TemplateBank, forward_backbone, generate_weight, head_logits,
                         Head, param_accounting, savings_closed_form)
from recast.diagnostics import coefficient_similarity, frobenius_diversity, svd_small
from recast.integrate import combine_dora, combine_lora, combine_mask, combine_rosa, merge
from recast.mimicry import MimicryConfig, run_mimicry
from recast.tensor import Tensor
from recast.til import (ParamBudget, TrainConfig, make_task_suite, pretrain_teacher, run_sequence,
                        snapshot_logits, trainable_params)

from conftest import finite_diff, rel_err

ROOT = Path(__file__).resolve().parent.parent
DEFAULT_CONFIG = ROOT / "configs" / "default.json"

# tolerances and thresholds
COSINE_MIN, MIMICRY_EPOCHS, MIMICRY_SECONDS = 0.99, 2000, 60.0
FD_H, FD_TOL, FD_SEEDS = 1e-6, 1e-5, 20
GAP_MIN, GAP_SEEDS, TASK_PARAMS_MAX = 0.10, (0, 1, 2, 3, 4), 50
ORACLE_TOL, EIG_TOL, FROB_ID_TOL = 1e-12, 1e-6, 1e-10
DORA_TOL, MERGE_TOL, COLLAPSE_TOL = 1e-10, 1e-12, 1e-12

RESULTS = []


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def default_config() -> RunConfig:
    return RunConfig.load(DEFAULT_CONFIG)


def backbone_for_seed(seed: int):
    """Teacher trained on task 0 of the seed's suite, reconstructed into the default templated model."""
    cfg = default_config()
    cfg = cfg.model_copy(update={"til": cfg.til.model_copy(update={"seed": seed}),
                                 "teacher": cfg.teacher.model_copy(update={"seed": seed}),
                                 "mimicry": cfg.mimicry.model_copy(update={"seed": seed})})
    config = cfg.recast.build()
    suite = cfg.til.suite(cfg.recast.width)
    teacher = pretrain_teacher(suite[0], config, cfg.teacher.build(), cfg.teacher.min_accuracy)
    model = RecastModel.initialize(config, seed)
    run_mimicry(teacher, model, cfg.mimicry.build())
    return cfg, model, suite


# 1 ------------------------------------------------------------------------------------
def test_criterion_1_reconstruction_fidelity():
    task0 = make_task_suite(1, 4, 64, "rotation", seed=0, n_train=128)[0]
    config = RecastConfig.uniform_fc(3, 64, 3, 2, 2)
    teacher = pretrain_teacher(task0, config, TrainConfig(epochs=60, lr=5e-3))
    model = RecastModel.initialize(config, 0)
    cfg = MimicryConfig(loss="smoothl1", beta=1.0, lr=0.01, max_epochs=MIMICRY_EPOCHS, sigma=0.0,
                        noise=False, optimizer="adam")
    start = time.perf_counter()
    rep = run_mimicry(teacher, model, cfg)
    seconds = time.perf_counter() - start
    cos = rep.min_cosine()
    record(1, cos >= COSINE_MIN and seconds < MIMICRY_SECONDS and rep.epochs <= MIMICRY_EPOCHS,
           f"min per-layer cosine {cos:.8f} (>= {COSINE_MIN}) in {rep.epochs} epochs, {seconds:.1f}s (< {MIMICRY_SECONDS:.0f}s)")


# 2 ------------------------------------------------------------------------------------
def test_criterion_2_gradient_correctness():
    worst = {"coefficients": 0.0, "templates": 0.0, "lora": 0.0, "classifier": 0.0}
    for seed in range(FD_SEEDS):
        rng = np.random.default_rng(seed)
        model = RecastModel.initialize(RecastConfig.uniform_fc(2, 4, 1, 2, 2, activation="gelu"), seed)
        B = Tensor(rng.uniform(-1, 1, (4, 2)), requires_grad=True)
        A = Tensor(rng.uniform(-1, 1, (2, 4)), requires_grad=True)
        head = Head(Tensor(rng.uniform(-1, 1, (3, 4)), requires_grad=True), Tensor(rng.uniform(-1, 1, 3), requires_grad=True))
        x, y = rng.uniform(-1, 1, (5, 4)), rng.integers(0, 3, 5)

        def loss():
            h = T.gelu(T.matmul(Tensor(x), T.transpose(combine_lora(model.weight(0, 0), B, A))))
            h = T.gelu(T.add_bias(T.matmul(h, T.transpose(model.weight(1, 0))), model.biases[(1, 0)]))
            return T.softmax_cross_entropy(head_logits(h, head), y)

        loss().backward()
        groups = {"coefficients": model.coefficient_tensors(), "templates": model.template_tensors(),
                  "lora": [B, A], "classifier": [head.weight, head.bias]}
        for name, params in groups.items():
            for p in params:
                worst[name] = max(worst[name], rel_err(p.grad, finite_diff(lambda: loss().item(), p.data, FD_H)))
    ok = all(v < FD_TOL for v in worst.values())
    detail = ", ".join(f"{k} {v:.2e}" for k, v in worst.items())
    record(2, ok, f"max relative error over {FD_SEEDS} seeds (< {FD_TOL:g}): {detail}")


# 3 & 4 ---------------------------------------------------------------------------------
@pytest.fixture(scope="module")
def seed_runs():
    runs = {}
    for seed in GAP_SEEDS:
        cfg, model, suite = backbone_for_seed(seed)
        tasks = suite[1:]
        budget = ParamBudget(cfg.til.budget)
        coef = run_sequence(model, tasks, budget, "coefficients+head", cfg.til.build())
        head = run_sequence(model, tasks, ParamBudget(cfg.til.budget), "head-only", cfg.til.build())
        runs[seed] = (cfg, model, tasks, coef, head)
    return runs


def test_criterion_3_zero_forgetting(seed_runs):
    cfg, model, tasks, coef, _ = seed_runs[GAP_SEEDS[0]]
    worst = 0.0
    for i, task in enumerate(tasks):
        worst = max(worst, float(np.max(np.abs(snapshot_logits(model, coef.snapshots[i], task.X_test) - coef.logits[i]))))
    stable = all(np.all(coef.accuracy[i:, i] == coef.accuracy[i, i]) for i in range(len(tasks)))
    record(3, worst == 0.0 and stable and len(tasks) == 3,
           f"tasks 1->2->3, max |restored - recorded logits| = {worst!r} (exactly 0), accuracy columns constant: {stable}")


def test_criterion_4_coefficient_adaptation_value(seed_runs):
    gaps = {s: r[3].average - r[4].average for s, r in seed_runs.items()}
    mean_gap = float(np.mean(list(gaps.values())))
    cfg, model = seed_runs[GAP_SEEDS[0]][:2]
    config = model.config
    expected = sum(len(mods) for mods in config.layout) * config.n_templates * config.n_sets
    task_params = param_accounting(config).task_params
    head = cfg.til.classes * cfg.recast.width + cfg.til.classes
    counted = trainable_params(model, cfg.til.classes, "coefficients+head") - head
    ok = mean_gap >= GAP_MIN and task_params == counted == expected and task_params < TASK_PARAMS_MAX
    per_seed = " ".join(f"{s}:{100 * g:+.1f}" for s, g in gaps.items())
    record(4, ok, f"mean gap {100 * mean_gap:.2f} points (>= {100 * GAP_MIN:.0f}) over seeds [{per_seed}]; "
                  f"task params {task_params} = sum M_l*n*K = {expected} (< {TASK_PARAMS_MAX})")


# 5 ------------------------------------------------------------------------------------
def _eig_singular_values(a):
    g = a.T @ a if a.shape[0] >= a.shape[1] else a @ a.T
    return np.sqrt(np.clip(np.linalg.eigvalsh(g)[::-1], 0, None))


def test_criterion_5_diagnostics_oracles():
    frob_err = sim_err = eig_err = id_err = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        ts = rng.normal(size=(rng.integers(2, 6), 4, 5))
        brute = sum(np.sqrt(np.sum((ts[i] - ts[j]) ** 2)) for i in range(len(ts)) for j in range(i + 1, len(ts)))
        frob_err = max(frob_err, abs(frobenius_diversity(ts) - brute / (len(ts) * (len(ts) - 1))))
        model = RecastModel.initialize(RecastConfig.uniform_fc(3, 3, 1, 2, 2, modules_per_layer=2), seed)
        S = coefficient_similarity(model, 0)
        vec = [np.concatenate([model.coefficients[(l, m)].values.data.ravel() for m in range(2)]) for l in range(3)]
        for i in range(3):
            for j in range(3):
                sim_err = max(sim_err, abs(S[i, j] - vec[i] @ vec[j] / np.sqrt((vec[i] @ vec[i]) * (vec[j] @ vec[j]))))
        w = rng.normal(size=(6, 6))
        eig_err = max(eig_err, float(np.max(np.abs(svd_small(w) - _eig_singular_values(w)))))
    for seed in range(100):
        rng = np.random.default_rng(1000 + seed)
        a = rng.normal(size=tuple(rng.integers(1, 13, size=2)))
        id_err = max(id_err, abs(np.sum(svd_small(a) ** 2) - np.sum(a ** 2)))
    ok = frob_err < ORACLE_TOL and sim_err < ORACLE_TOL and eig_err < EIG_TOL and id_err < FROB_ID_TOL
    record(5, ok, f"frobenius {frob_err:.1e}, similarity {sim_err:.1e} (< {ORACLE_TOL:g}); "
                  f"singular values vs eigen oracle {eig_err:.1e} (< {EIG_TOL:g}); "
                  f"Frobenius identity on 100 fixtures {id_err:.1e} (< {FROB_ID_TOL:g})")


# 6 ------------------------------------------------------------------------------------
ACCOUNTING = [(12, 2, 64, 6, 2, 2), (6, 1, 16, 3, 2, 2), (1, 1, 1, 1, 1, 1), (4, 3, 8, 2, 3, 1), (10, 1, 32, 5, 4, 3),
              (8, 2, 4, 8, 1, 1), (9, 1, 12, 3, 2, 5), (12, 4, 24, 4, 3, 2), (2, 2, 128, 1, 2, 2), (7, 3, 10, 7, 2, 4)]


def test_criterion_6_accounting_exactness():
    mismatches = []
    for L, M, d, G, n, K in ACCOUNTING:
        acc = param_accounting(RecastConfig.uniform_fc(L, d, G, n, K, modules_per_layer=M))
        if acc.savings != savings_closed_form(L, M, d, G, n, K) or acc.task_params != L * M * n * K:
            mismatches.append((L, M, d, G, n, K))
    worked = param_accounting(RecastConfig.uniform_fc(12, 64, 6, 2, 2, modules_per_layer=2)).savings
    record(6, not mismatches and worked == 49056,
           f"{len(ACCOUNTING) - len(mismatches)}/{len(ACCOUNTING)} fixtures exact; worked example S = {worked} (49056)")


# 7 ------------------------------------------------------------------------------------
def test_criterion_7_combinator_identities():
    identity_ok, dora_err, merge_err = True, 0.0, 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        W, B, A = rng.normal(size=(6, 5)), rng.normal(size=(6, 2)), rng.normal(size=(2, 5))
        S = (rng.random(W.shape) < 0.2).astype(float)
        Z = np.zeros_like(B)
        identity_ok &= np.array_equal(combine_lora(W, Z, A).data, W)
        identity_ok &= np.array_equal(combine_mask(W, np.ones_like(W)).data, W)
        identity_ok &= np.array_equal(combine_rosa(W, np.zeros_like(W), Z, A).data, W)
        identity_ok &= np.array_equal(combine_dora(W, Z, A).data, W)
        dora_err = max(dora_err, abs(np.linalg.norm(combine_dora(W, B, A).data) - np.linalg.norm(W)))
        x = rng.normal(size=(4, 5))
        composed = {
            "lora": x @ W.T + (x @ A.T) @ B.T,
            "rosa": x @ W.T + x @ (S * W).T + (x @ A.T) @ B.T,
            "mask": x @ (W * S).T,
        }
        merged = {"lora": merge(combine_lora(W, B, A)), "rosa": merge(combine_rosa(W, S, B, A)),
                  "mask": merge(combine_mask(W, S))}
        for k in composed:
            merge_err = max(merge_err, float(np.max(np.abs(x @ merged[k].T - composed[k]))))
    record(7, bool(identity_ok) and dora_err < DORA_TOL and merge_err < MERGE_TOL,
           f"identity elements bit-exact: {bool(identity_ok)}; DoRA norm error {dora_err:.1e} (< {DORA_TOL:g}); "
           f"merged vs composed forward {merge_err:.1e} (< {MERGE_TOL:g})")


# 8 ------------------------------------------------------------------------------------
def test_criterion_8_linearity_collapse():
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n, K = rng.integers(1, 5), rng.integers(1, 6)
        shape = tuple(rng.integers(1, 7, size=rng.integers(2, 5)))
        bank = TemplateBank(0, [Tensor(t) for t in rng.uniform(-1, 1, (n,) + shape)])
        C = rng.normal(size=(K, n))
        diff = generate_weight(bank, C).data - generate_weight(bank, C.mean(axis=0, keepdims=True)).data
        worst = max(worst, float(np.max(np.abs(diff))))
    record(8, worst < COLLAPSE_TOL, f"max |K-set - column-mean single set| over 100 fixtures {worst:.1e} (< {COLLAPSE_TOL:g})")


# 9 ------------------------------------------------------------------------------------
def _tree(root: Path):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_9_determinism(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("RECAST_THREADS", "1")
    cfg = str(DEFAULT_CONFIG)
    teacher = tmp_path / "teacher.rcst"
    assert cli_main(["pretrain", "--config", cfg, "--out", str(teacher)]) == 0
    outs = []
    for run in ("a", "b"):
        root = tmp_path / run
        rc1 = cli_main(["reconstruct", "--config", cfg, "--teacher", str(teacher), "--out", str(root / "recon")])
        rc2 = cli_main(["til", "--config", cfg, "--model", str(root / "recon" / "model.rcst"), "--out", str(root / "til")])
        assert (rc1, rc2) == (0, 0)
        outs.append(_tree(root))
    capsys.readouterr()
    same = outs[0] == outs[1]
    record(9, same and len(outs[0]) >= 7,
           f"reconstruct + til rerun: {len(outs[0])} files, byte-identical: {same}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
