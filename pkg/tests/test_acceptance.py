"""Acceptance suite: one PASS/FAIL line per criterion, tolerances pinned.

Reference budgets (parameters in millions, GFLOPs at 640x640):
  full 3.458M / 6.3 GFLOPs, base 1.710M, +EMA +0.039M, +AFPN +0.138M,
  +SPPFCSPC config 3.317M, SPPF variant 5.0 GFLOPs.
"""

import re
import time

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from oreyolo.afpn import asff_fuse, asff_weights
from oreyolo.cli import main
from oreyolo.config import ABLATIONS, ModelConfig, TrainConfig
from oreyolo.data import (
    AugmentPolicy,
    augment,
    crop,
    expand_dataset,
    generate_synthetic,
    reflect,
    rotate90,
    split_dataset,
    translate,
)
from oreyolo.ema import global_avg_pool2d
from oreyolo.head import nms_indices
from oreyolo.loss import mpdiou_loss
from oreyolo.metrics import MAP_THRESHOLDS, average_precision, map_range
from oreyolo.model import build_model, count_parameters
from oreyolo.profile import count_gflops
from oreyolo.spp import sppf_chain
from oreyolo.train import TrainSet, overfit_one_batch, train

from test_data import inside_unit, random_sample
from test_ema import loop_gap
from test_head import nms_reference, random_nms_instance
from test_loss import mpdiou_grad_rel_errors, mpdiou_ref
from test_metrics import ap_reference, map_reference, random_instance


def within(value, target, rel):
    return abs(value - target) <= rel * abs(target)


# ---------------------------------------------------------------- 1. parameter budget


def test_criterion_1_parameter_budget(acceptance, capsys):
    t0 = time.perf_counter()
    code = main(["profile"])
    elapsed = time.perf_counter() - t0
    out = capsys.readouterr().out
    params = int(re.search(r"param_count = (\d+)", out).group(1))
    ok = code == 0 and within(params / 1e6, 3.458, 0.05) and elapsed < 10.0
    acceptance(1, ok, f"full model {params / 1e6:.3f}M params (target 3.458M +-5%), profile took {elapsed:.2f}s (< 10s)")
    assert ok


# ---------------------------------------------------------------- 2. ablation deltas


def test_criterion_2_ablation_deltas(acceptance):
    p = {k: count_parameters(build_model(ABLATIONS[k])) / 1e6 for k in ("base", "ema", "afpn", "sppfcspc", "full")}
    d_ema, d_afpn = p["ema"] - p["base"], p["afpn"] - p["base"]
    checks = {
        "base": within(p["base"], 1.710, 0.05),
        "ema_delta": within(d_ema, 0.039, 0.30),
        "afpn_delta": within(d_afpn, 0.138, 0.30),
        "sppfcspc": within(p["sppfcspc"], 3.317, 0.05),
        "order": p["base"] < p["ema"] < p["afpn"] < p["sppfcspc"] < p["full"],
    }
    ok = all(checks.values())
    acceptance(2, ok, f"base {p['base']:.3f}M, +EMA {d_ema:+.3f}M, +AFPN {d_afpn:+.3f}M, "
                      f"+SPPFCSPC {p['sppfcspc']:.3f}M, full {p['full']:.3f}M, failed: {[k for k, v in checks.items() if not v]}")
    assert ok


# ---------------------------------------------------------------- 3. FLOP budget


def test_criterion_3_flop_budget(acceptance):
    full = count_gflops(build_model(ABLATIONS["full"]), 640)
    sppf = count_gflops(build_model(ABLATIONS["afpn_ema_sppf"]), 640)
    ok = within(full, 6.3, 0.15) and within(sppf, 5.0, 0.15)
    acceptance(3, ok, f"full {full:.3f} GFLOPs (6.3 +-15%), SPPF variant {sppf:.3f} GFLOPs (5.0 +-15%)")
    assert ok


# ---------------------------------------------------------------- 4. MPDIoU


def test_criterion_4_mpdiou(acceptance):
    cases = [
        ((0, 0, 2, 2), (0, 0, 2, 2), 5, 5, 0.0),
        ((0, 0, 1, 1), (1, 1, 2, 2), 2, 2, 1.5),
        ((0, 0, 2, 2), (1, 1, 3, 3), 4, 4, 1 - (1 / 7 - 4 / 32)),
    ]
    worst = 0.0
    for p, g, w, h, expected in cases:
        loss = mpdiou_loss(torch.tensor(p, dtype=torch.float64), torch.tensor(g, dtype=torch.float64), w, h).item()
        oracle = 1 - mpdiou_ref(p, g, w, h)
        worst = max(worst, abs(loss - oracle), abs(loss - expected))
    errs = mpdiou_grad_rel_errors(n_pairs=100, seed=0)
    ok = worst < 1e-9 and max(errs) < 1e-5 and len(errs) == 100
    acceptance(4, ok, f"worked examples max error {worst:.2e} (< 1e-9), gradient max rel error {max(errs):.2e} "
                      f"over {len(errs)} pairs (< 1e-5)")
    assert ok


# ---------------------------------------------------------------- 5. ASFF invariants


def test_criterion_5_asff(acceptance):
    g = torch.Generator().manual_seed(5)
    # 10 x 10 x 10 = 1000 positions, 3 levels, float32 as in the network
    xs = [torch.randn(10, 8, 10, 10, generator=g) * 3 for _ in range(3)]
    lam = [torch.randn(10, 1, 10, 10, generator=g) * 4 for _ in range(3)]
    w = asff_weights(lam)
    sum_err = (w.sum(1) - 1).abs().max().item()
    y = asff_fuse(xs, w)
    stack = torch.stack(xs)
    slack = 1e-5  # float32 rounding of the weighted sum
    envelope = bool(((y >= stack.min(0).values - slack) & (y <= stack.max(0).values + slack)).all())
    degen = 0.0
    for k in range(3):
        big = [torch.full((10, 1, 10, 10), 20.0 if i == k else -20.0) for i in range(3)]
        degen = max(degen, (asff_fuse(xs, asff_weights(big)) - xs[k]).abs().max().item())
    ok = sum_err < 1e-6 and envelope and degen < 1e-4
    acceptance(5, ok, f"weight sum error {sum_err:.1e} (< 1e-6), envelope holds: {envelope}, "
                      f"degenerate-lambda error {degen:.1e} (< 1e-4)")
    assert ok


# ---------------------------------------------------------------- 6. pooling


def test_criterion_6_pooling(acceptance):
    rng = np.random.default_rng(6)
    gap_err = 0.0
    for _ in range(10):
        x = rng.normal(size=(2, 3, int(rng.integers(1, 12)), int(rng.integers(1, 12)))).astype(np.float32)
        gap_err = max(gap_err, np.abs(global_avg_pool2d(torch.from_numpy(x)).numpy() - loop_gap(x)).max())
    exact = 0
    for _ in range(100):
        h, w = (int(v) for v in rng.integers(1, 40, 2))
        x = torch.from_numpy(rng.normal(size=(1, 2, h, w)).astype(np.float32))
        chained = sppf_chain(x)[:, -2:]
        exact += int(torch.equal(chained, F.max_pool2d(x, 13, 1, 6)))
    ok = gap_err < 1e-6 and exact == 100
    acceptance(6, ok, f"GAP vs loop oracle max error {gap_err:.1e} (< 1e-6), chained k5 == k13 on {exact}/100 maps")
    assert ok


# ---------------------------------------------------------------- 7. metrics and NMS


def test_criterion_7_metric_oracles(acceptance):
    worst = 0.0
    for seed in range(200):
        dets, gts = random_instance(np.random.default_rng(seed), max_boxes=6)
        for t in MAP_THRESHOLDS:
            for c in (None, 0, 1):
                worst = max(worst, abs(average_precision(dets, gts, t, c) - ap_reference(dets, gts, t, c)))
        r, ref = map_range(dets, gts), map_reference(dets, gts)
        assert sorted(r.per_class) == sorted(ref)
        for c, m in r.per_class.items():
            worst = max(worst, abs(m.precision - ref[c]["precision"]), abs(m.recall - ref[c]["recall"]),
                        abs(m.map50_95 - float(np.mean(ref[c]["aps"]))))
    nms_ok = 0
    for seed in range(200):
        boxes, scores, classes = random_nms_instance(np.random.default_rng(10_000 + seed), n=50)
        nms_ok += int(nms_indices(boxes, scores, classes, 0.45) == nms_reference(boxes, scores, classes, 0.45))
    ok = worst < 1e-9 and nms_ok == 200
    acceptance(7, ok, f"AP/mAP max deviation {worst:.1e} over 200 instances (< 1e-9), NMS exact on {nms_ok}/200")
    assert ok


# ---------------------------------------------------------------- 8. desk-scale training


@pytest.mark.slow
def test_criterion_8_desk_training(acceptance, tmp_path):
    samples = generate_synthetic(200, 0, 320)
    tr, va, _ = split_dataset(samples, (7, 2, 1), seed=0)
    cfg = TrainConfig(model=ModelConfig(input_size=320), epochs=30, batch_size=8)
    t0 = time.perf_counter()
    history = train(cfg, tr, va, out_dir=tmp_path)
    minutes = (time.perf_counter() - t0) / 60
    m50 = history[-1].val_map50

    t1 = time.perf_counter()
    trace = overfit_one_batch(TrainConfig(model=ModelConfig(input_size=320), batch_size=8),
                              generate_synthetic(8, 0, 320), steps=200)
    ratio = trace[-1] / trace[0]
    ok = m50 >= 0.5 and minutes < 30 and ratio < 0.05
    acceptance(8, ok, f"30 epochs at 320: val mAP50 {m50:.3f} (>= 0.50) in {minutes:.1f} min (< 30); "
                      f"overfit-one-batch final/initial loss {ratio:.4f} (< 0.05) in {time.perf_counter() - t1:.0f}s")
    assert ok


# ---------------------------------------------------------------- 9. determinism


def test_criterion_9_determinism(acceptance, tmp_path):
    samples = generate_synthetic(8, 9, 64)
    cfg = TrainConfig(model=ModelConfig(input_size=64), epochs=2, batch_size=4, seed=7)
    train(cfg, samples[:6], samples[6:], out_dir=tmp_path / "a")
    train(cfg, samples[:6], samples[6:], out_dir=tmp_path / "b")
    logs_equal = (tmp_path / "a" / "log.csv").read_bytes() == (tmp_path / "b" / "log.csv").read_bytes()

    a = expand_dataset(samples, AugmentPolicy(copies=2), seed=3)
    b = expand_dataset(samples, AugmentPolicy(copies=2), seed=3)
    aug_equal = all(np.array_equal(x.image, y.image) and x.labels == y.labels for x, y in zip(a, b))
    sa, sb = TrainSet(samples, 64, 0.5, 0.5, seed=7), TrainSet(samples, 64, 0.5, 0.5, seed=7)
    for epoch in range(3):
        for i in range(len(samples)):
            (ia, la), (ib, lb) = sa.get(i, epoch), sb.get(i, epoch)
            aug_equal &= np.array_equal(ia, ib) and la == lb
    ok = logs_equal and aug_equal
    acceptance(9, ok, f"seeded training loss logs identical: {logs_equal}, seeded augmentation passes identical: {aug_equal}")
    assert ok


# ---------------------------------------------------------------- 10. data pipeline


def test_criterion_10_data_pipeline(acceptance):
    sizes = tuple(len(s) for s in split_dataset(list(range(6090)), (7, 2, 1), seed=0))
    contained = 0
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        s = random_sample(rng)
        fw, fh = rng.uniform(0.3, 1.0, 2)
        x0, y0 = rng.uniform(0, 1 - fw), rng.uniform(0, 1 - fh)
        outs = [
            reflect(s, bool(rng.integers(2))),
            rotate90(s, int(rng.integers(4))),
            crop(s, x0, y0, x0 + fw, y0 + fh),
            translate(s, *rng.uniform(-0.5, 0.5, 2)),
            augment(s, AugmentPolicy(), rng),
        ]
        contained += int(all(inside_unit(o.labels) and len(o.labels) <= len(s.labels) for o in outs))
    composed = 0
    for seed in range(1000):
        rng = np.random.default_rng(50_000 + seed)
        s = random_sample(rng)
        k1, k2 = (int(v) for v in rng.integers(0, 4, 2))
        a, b = rotate90(rotate90(s, k1), k2), rotate90(s, k1 + k2)
        same = np.array_equal(a.image, b.image) and len(a.labels) == len(b.labels) and all(
            max(abs(u - v) for u, v in zip((p.cx, p.cy, p.w, p.h), (q.cx, q.cy, q.w, q.h))) < 1e-9
            for p, q in zip(a.labels, b.labels))
        composed += int(same)
    ok = sizes == (4263, 1218, 609) and contained == 1000 and composed == 1000
    acceptance(10, ok, f"6090-id split {sizes} (4263/1218/609), containment {contained}/1000, "
                       f"rotate-90 composition {composed}/1000")
    assert ok
