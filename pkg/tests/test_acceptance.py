"""Acceptance criteria. Each test prints one ``ACCEPTANCE <n> ...: PASS|FAIL`` line.

Tolerances and run configurations are pinned here. Criteria 6 and 8 train the
default networks on 200 synthetic images several times and dominate the
runtime of the whole suite (roughly 50 minutes on one CPU core).
"""

import time

import numpy as np
import pytest
import torch

from crispedge.data import SynthConfig, generate_synthetic, split_dataset
from crispedge.gate import gate_combine, logical_gate, refine_gate
from crispedge.losses import LossConfig, bce_loss, focal_loss, hybrid_loss
from crispedge.metrics import (
    EvalConfig,
    MatchCounts,
    crispness_sweep,
    dice,
    diagonal,
    format_report,
    hausdorff,
    match_edges,
    ods,
    per_image_f,
    pr_f,
)
from crispedge.networks import NetConfig, build_edge_net, build_object_net, build_refine_net, edge_forward, refine_forward
from crispedge.training import TrainConfig, evaluate_run, train_phase1, train_phase2

from oracles import brute_force_matching, pairwise_hausdorff

GATE_ATOL = 1e-6
GRAD_RTOL = 1e-4
ODS_SLACK = 0.02
ABLATION_SEEDS = (0, 1, 2)


@pytest.fixture
def report(capsys):
    def emit(n, name, ok, detail=""):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n} {name}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip())
        assert ok, f"criterion {n} ({name}) failed: {detail}"

    return emit


def test_criterion_1_gate_algebra(report):
    start = time.perf_counter()
    rng = np.random.default_rng(100)
    worst = 0.0
    for _ in range(100):
        shape = (1, int(rng.integers(1, 4))) + tuple(rng.integers(3, 9, size=int(rng.integers(2, 4))))
        ones = (1, 1) + shape[2:]
        e = torch.tensor(rng.uniform(0, 1, size=shape))
        e2 = torch.tensor(rng.normal(size=shape))
        o = torch.tensor(rng.uniform(0, 1, size=ones))
        a, b = rng.normal(size=2)
        checks = [
            gate_combine(e, torch.zeros(ones, dtype=torch.float64)) - e,
            gate_combine(e, torch.ones(ones, dtype=torch.float64)) - 2 * e,
            gate_combine(a * e + b * e2, o) - (a * gate_combine(e, o) + b * gate_combine(e2, o)),
        ]
        eb = torch.tensor((rng.random(ones) < 0.4).astype(np.float64))
        ob = torch.maximum(eb, torch.tensor((rng.random(ones) < 0.5).astype(np.float64)))
        checks.append(gate_combine(eb, ob) - 2 * eb)
        worst = max([worst] + [c.abs().max().item() for c in checks])
        out = gate_combine(e, o)
        worst = max(worst, (e - out).clamp(min=0).max().item(), (out - 2 * e).clamp(min=0).max().item())
    elapsed = time.perf_counter() - start
    report(1, "gate algebra", worst <= GATE_ATOL and elapsed < 10,
           f"100 cases, max violation {worst:.2e} (tol {GATE_ATOL:g}), {elapsed:.2f}s")


def _gradcheck(fn, inputs):
    return torch.autograd.gradcheck(fn, inputs, eps=1e-6, atol=1e-8, rtol=GRAD_RTOL, raise_exception=False)


def test_criterion_2_gradients(report):
    start = time.perf_counter()
    g = torch.Generator().manual_seed(2)
    dbl = dict(generator=g, dtype=torch.float64)
    cfg = LossConfig(alpha_k=[1.0, 0.5])
    passed = dict.fromkeys(["logical_gate", "refine_gate", "bce", "focal", "hybrid"], 0)
    for _ in range(20):
        e = torch.randn(1, 2, 4, 4, **dbl).requires_grad_()
        o = (0.1 + 0.8 * torch.rand(1, 1, 4, 4, **dbl)).requires_grad_()
        w = torch.randn(2, 2, 3, 3, **dbl).requires_grad_()
        b = torch.randn(2, **dbl).requires_grad_()
        passed["logical_gate"] += _gradcheck(logical_gate, (e, o, w, b))

        f = torch.randn(1, 2, 4, 4, **dbl).requires_grad_()
        de = (0.1 + 0.8 * torch.rand(1, 1, 8, 8, **dbl)).requires_grad_()
        do = (0.1 + 0.8 * torch.rand(1, 1, 8, 8, **dbl)).requires_grad_()
        pw = torch.randn(2, 1, 1, 1, **dbl).requires_grad_()
        pb = torch.randn(2, **dbl).requires_grad_()
        passed["refine_gate"] += _gradcheck(refine_gate, (f, de, do, pw, pb, w, b))

        p = (0.05 + 0.9 * torch.rand(1, 1, 3, 3, **dbl)).requires_grad_()
        y = (torch.rand(1, 1, 3, 3, generator=g) < 0.3).double()
        passed["bce"] += _gradcheck(lambda q: bce_loss(q, y), (p,))
        passed["focal"] += _gradcheck(lambda q: focal_loss(q, y, cfg), (p,))
        passed["hybrid"] += _gradcheck(lambda q: hybrid_loss([q, q**2], y, cfg), (p,))
    elapsed = time.perf_counter() - start
    ok = all(v == 20 for v in passed.values()) and elapsed < 60
    detail = ", ".join(f"{k} {v}/20" for k, v in passed.items())
    report(2, "gradients", ok, f"{detail}; rtol {GRAD_RTOL:g} float64, {elapsed:.1f}s")


@torch.no_grad()
def _count_outputs(rank, size):
    cfg = NetConfig(rank=rank)
    x = torch.rand((1, 1) + (size,) * rank)
    d_o = build_object_net(cfg)(x)
    p1 = edge_forward(build_edge_net(cfg), x, d_o)
    p2 = refine_forward(build_refine_net(cfg), x, p1.edge_fused, d_o)
    shapes_ok = all(m.shape == x.shape for m in p1.edge_maps + p2.maps)
    return len(p1.edge_maps), len(p2.maps), shapes_ok


def test_criterion_3_structural_counts(report):
    got = {"2D 64^2": _count_outputs(2, 64), "3D 32^3": _count_outputs(3, 32)}
    ok = all(v == (6, 9, True) for v in got.values())
    report(3, "structural counts", ok, "; ".join(f"{k}: phase1 {a}, phase2 {b}" for k, (a, b, _) in got.items()))


def test_criterion_4_metric_oracles(report):
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    bad_match = bad_hd = 0
    for trial in range(500):
        rank = 2 if trial % 3 else 3
        n_p, n_g = rng.integers(0, 9, size=2)
        pred = np.unique(rng.integers(0, 5, size=(n_p, rank)), axis=0) if n_p else np.zeros((0, rank), int)
        gt = np.unique(rng.integers(0, 5, size=(n_g, rank)), axis=0) if n_g else np.zeros((0, rank), int)
        radius = float(rng.choice([0, 1, 1.5, 2, 3]))
        c = match_edges(pred, gt, radius)
        bad_match += not (c.tp_pred == c.tp_gt == brute_force_matching(pred, gt, radius))
        if len(pred) and len(gt):
            bad_hd += abs(hausdorff(pred, gt) - pairwise_hausdorff(pred, gt)) > 1e-12
    greedy = match_edges([(0, 0), (0, 1)], [(0, 1), (0, 2)], 1.0)
    a = np.zeros((4, 4), np.uint8)
    a[0, :2] = 1
    b = np.zeros((4, 4), np.uint8)
    b[0, 1:4] = 1
    dice_ok = dice(a, b) == pytest.approx(2 / 5) and dice(a, a) == 1.0 and dice(a, np.zeros_like(a)) == 0.0
    elapsed = time.perf_counter() - start
    ok = bad_match == 0 and bad_hd == 0 and greedy == MatchCounts(2, 2, 2, 2) and dice_ok and elapsed < 60
    report(4, "metric oracles", ok,
           f"500 trials: {bad_match} matching / {bad_hd} hausdorff mismatches; greedy case tp={greedy.tp_pred}; "
           f"dice {'ok' if dice_ok else 'wrong'}; {elapsed:.1f}s")


def _independent_f(preds, gts, t, d):
    total = MatchCounts()
    for p, g in zip(preds, gts):
        r = d * diagonal(g.shape)
        total = total + match_edges(np.argwhere(p >= t), np.argwhere(g > 0), r)
    return pr_f(total)[2]


def test_criterion_5_protocol_consistency(report):
    # "sweep F" is taken as the dataset-level ODS F plus every image's own best F;
    # pooled OIS counts are not monotone in d (see test_metrics)
    d_list = [0.1, 0.05, 0.02, 0.01]
    issues = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        gts = [(rng.random((32, 32)) < 0.08).astype(np.uint8) for _ in range(3)]
        preds = [np.clip(g * rng.uniform(0.2, 1.0) + rng.random((32, 32)) * rng.uniform(0, 0.8), 0, 1)
                 for g in gts]
        cfg = EvalConfig(d=0.05)
        t, _, _, f = ods(preds, gts, cfg)
        if abs(_independent_f(preds, gts, t, cfg.d) - f) > 1e-12:
            issues.append(f"seed {seed}: ODS recomputation")
        table = per_image_f(preds, gts, cfg)
        if not np.all(table.max(axis=1) >= table[:, cfg.thresholds.index(t)]):
            issues.append(f"seed {seed}: OIS below ODS per image")
        rows = crispness_sweep(preds, gts, d_list, cfg)
        if not all(x[1] >= y[1] for x, y in zip(rows, rows[1:])):
            issues.append(f"seed {seed}: sweep ODS rises")
        best = [per_image_f(preds, gts, EvalConfig(d=d)).max(axis=1) for d in d_list]
        if not all(np.all(x >= y) for x, y in zip(best, best[1:])):
            issues.append(f"seed {seed}: per-image best F rises")
    report(5, "protocol consistency", not issues, "; ".join(issues) or "10 prediction sets, 4 tolerances")


_RUNS = {}


def _desk_run(seed, gate=True, phase2=True):
    """Default-configuration run on 200 synthetic 64x64 images (memoized)."""
    key = (seed, gate, phase2)
    if key not in _RUNS:
        train, test = split_dataset(generate_synthetic(SynthConfig(seed=seed)), 0.2, seed)
        cfg = TrainConfig(seed=seed, gate_enabled=gate)
        net = NetConfig(gate_enabled=gate)
        p1 = train_phase1(train, cfg, net, cache_for=test)
        p2 = train_phase2(train, p1, cfg, net) if phase2 else None
        rows = evaluate_run(p1, p2, test)
        _RUNS[key] = (p1, p2, rows)
    return _RUNS[key]


def _f(rows, metric, phase):
    return next(r.f for r in rows if r.metric == metric and r.phase == phase)


def test_criterion_6_desk_scale_end_to_end(report):
    p1, p2, rows = _desk_run(0)
    descent = p1.epoch_losses[-1] < p1.epoch_losses[0] and p2.epoch_losses[-1] < p2.epoch_losses[0]
    f1, f2 = _f(rows, "ods", "phase1_fusion"), _f(rows, "ods", "phase2_fusion")
    refine_ok = f2 >= f1 - ODS_SLACK
    votes = []
    for seed in ABLATION_SEEDS:
        gated = _f(_desk_run(seed)[2], "ods", "phase1_fusion")
        plain = _f(_desk_run(seed, gate=False, phase2=False)[2], "ods", "phase1_fusion")
        votes.append((seed, gated, plain))
    wins = sum(g >= p for _, g, p in votes)
    ablation_ok = wins * 2 > len(votes)
    detail = (
        f"(a) loss {p1.epoch_losses[0]:.3f}->{p1.epoch_losses[-1]:.3f} / {p2.epoch_losses[0]:.3f}->"
        f"{p2.epoch_losses[-1]:.3f}; (b) ODS phase2 {f2:.4f} vs phase1 {f1:.4f} - {ODS_SLACK}; "
        f"(c) gate wins {wins}/{len(votes)}: "
        + ", ".join(f"seed {s} {g:.4f} vs {p:.4f}" for s, g, p in votes)
    )
    report(6, "desk-scale end-to-end", descent and refine_ok and ablation_ok, detail)


def test_criterion_7_three_d_smoke(report):
    # batch 4 instead of 8 keeps peak memory near 2 GB for 32^3 volumes at default width
    start = time.perf_counter()
    vols = generate_synthetic(SynthConfig(rank=3, n_samples=20, seed=0))
    train, test = split_dataset(vols, 0.2, 0)
    cfg = TrainConfig(seed=0, batch_size=4)
    net = NetConfig(rank=3)
    p1 = train_phase1(train, cfg, net, cache_for=test)
    p2 = train_phase2(train, p1, cfg, net)
    rows = evaluate_run(p1, p2, test)
    elapsed = time.perf_counter() - start
    phases = {r.phase for r in rows if r.metric == "ods"}
    expected = {"phase1_fusion", "phase2_fusion"} | {f"phase2_side{k}" for k in range(1, 9)}
    ok = (phases == expected and any(r.metric == "binary" for r in rows)
          and sum(r.metric == "sweep_ods" for r in rows) == 4 and all(np.isfinite(r.f) for r in rows)
          and elapsed < 1800)
    report(7, "3D smoke", ok, f"{len(train)}+{len(test)} volumes of 32^3, {len(rows)} rows, "
                              f"phase2 ODS {_f(rows, 'ods', 'phase2_fusion'):.4f}, {elapsed / 60:.1f} min")


def test_criterion_8_determinism(report):
    first = format_report(_desk_run(0)[2])
    _RUNS.pop((0, True, True))
    second = format_report(_desk_run(0)[2])
    report(8, "determinism", first == second, f"{len(first.splitlines()) - 1} rows, "
                                              f"{'byte-identical' if first == second else 'differ'}")
