"""Acceptance suite: one test per top-level criterion, each at its stated tolerance.

Every test records a one-line PASS/FAIL verdict; the lines are printed together
at the end of the pytest run (see ``conftest.py``) and immediately with ``-s``.
The two training benchmarks take several minutes each on one CPU core.
"""
import time

import numpy as np
import pytest

from oracles import naive_conv2d
from seeaunet import gradcheck, ops
from seeaunet.autodiff import Tensor
from seeaunet.blocks import attention_coefficients, gating_signal, se_scales
from seeaunet.checkpoint import dumps, load_checkpoint, loads, restore_into, save_checkpoint
from seeaunet.data import synth_dataset, synth_split
from seeaunet.models import (
    ARCHS,
    ModelConfig,
    analytic_param_formula,
    build_model,
    canonical_config,
    count_parameters,
    scan_published,
)
from seeaunet.objectives import FocalLossConfig, JaccardConfig, binary_focal_loss, jaccard
from seeaunet.training import SYNTH_SEED_OFFSET, TrainConfig, compare_models, evaluate, train

VERDICTS: list[str] = []

BENCH_MODEL = dict(input_size=(64, 64), base_filters=16, depth=3, se_reduction=8)
BENCH_BATCH = 16


def verdict(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} -- {detail}"
    VERDICTS.append(line)
    print("\n" + line)
    assert ok, line


@pytest.fixture(scope="module")
def benchmark_data():
    return synth_split(200, 50, (64, 64), seed=0 + SYNTH_SEED_OFFSET)


def test_criterion_1_gradients():
    t0 = time.perf_counter()
    results = gradcheck.run_all()
    elapsed = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.max_rel_error)
    failed = [r.name for r in results if not r.passed]
    kinks = min(r.kink_distance for r in results)
    ok = not failed and elapsed < 120 and kinks >= gradcheck.KINK_MARGIN
    verdict(1, "finite-difference gradients", ok,
            f"{len(results)} ops/blocks, worst {worst.max_rel_error:.2e} ({worst.name}) < 1e-6, "
            f"min kink distance {kinks:.3f}, failed {failed or 'none'}, {elapsed:.1f}s < 120s")


def test_criterion_2_parameter_accounting():
    mismatches = []
    n_checked = 0
    for arch in ARCHS:
        for base, depth, layout, ratio in [(2, 1, "compact", 0.5), (4, 2, "reference", 1.0),
                                           (8, 3, "compact", 1.0), (4, 3, "reference", 0.5)]:
            cfg = ModelConfig(arch=arch, input_size=(2 ** depth * 2,) * 2, base_filters=base, depth=depth,
                              layout=layout, attention_f_int_ratio=ratio, se_reduction=2)
            n_checked += 1
            if count_parameters(build_model(cfg).params) != analytic_param_formula(cfg):
                mismatches.append(cfg)
    canon = {a: count_parameters(build_model(canonical_config(a)).params) for a in ARCHS}
    ordering = canon["attention_res_unet"].total > canon["seea_unet"].total > canon["attention_unet"].total > canon["unet"].total
    same_nt = canon["attention_unet"].non_trainable == canon["seea_unet"].non_trainable
    scan = scan_published()
    best = {a: scan[a][0] for a in ARCHS}
    se_delta = best["seea_unet"].counts.total - best["attention_unet"].counts.total
    closest = ", ".join(f"{a} {best[a].counts.total:,} (delta {best[a].delta_total:+d})" for a in ARCHS)
    ok = not mismatches and ordering and same_nt
    verdict(2, "parameter accounting", ok,
            f"enumeration == closed form on {n_checked} configs; canonical non-trainable "
            f"AttUNet {canon['attention_unet'].non_trainable:,} == SEEA {canon['seea_unet'].non_trainable:,}; "
            f"ordering AttRes > SEEA > Att > UNet {ordering}; scan closest: {closest}; "
            f"SE delta {se_delta:,} vs 20,480")


def test_criterion_3_conv_oracle():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    bad = []
    for i in range(200):
        n, c, o = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        h, w = rng.integers(1, 9), rng.integers(1, 9)
        k = int(rng.choice([1, 2, 3, 5]))
        stride = int(rng.choice([1, 2]))
        padding = "valid" if rng.random() < 0.3 and min(h, w) >= k else "same"
        x = rng.standard_normal((n, c, h, w))
        wt = rng.standard_normal((o, c, k, k))
        b = rng.standard_normal(o) if rng.random() < 0.8 else None
        got = ops.conv2d(Tensor(x), Tensor(wt), None if b is None else Tensor(b), stride, padding).data
        if not np.array_equal(got, naive_conv2d(x, wt, b, stride, padding)):
            bad.append(i)
    elapsed = time.perf_counter() - t0
    verdict(3, "conv oracle equivalence", not bad and elapsed < 60,
            f"200 random f64 shapes, bitwise mismatches: {len(bad)}, {elapsed:.1f}s < 60s")


def test_criterion_4_overfit():
    samples = synth_dataset(4, (64, 64), seed=7, empty_fraction=0.0)
    model = build_model(ModelConfig(arch="seea_unet", input_size=(64, 64), base_filters=16, depth=2, se_reduction=8), seed=0)
    t0 = time.perf_counter()
    cfg = TrainConfig(epochs=200, lr=1e-3, batch_size=4, seed=0)
    _, report = train(model, samples, samples, cfg)
    elapsed = time.perf_counter() - t0
    steps = len(report.step_losses)
    final = evaluate(model, samples, cfg.loss).loss
    ok = steps == 200 and final < 0.01 and elapsed < 300
    verdict(4, "overfit sanity", ok,
            f"{steps} Adam steps at lr 1e-3, train focal loss {final:.5f} < 0.01 "
            f"(last step {report.step_losses[-1]:.5f}), {elapsed:.0f}s < 300s")


def test_criterion_5_synthetic_benchmark(benchmark_data):
    train_s, val_s = benchmark_data
    model = build_model(ModelConfig(arch="seea_unet", **BENCH_MODEL), seed=0)
    t0 = time.perf_counter()
    _, report = train(model, train_s, val_s, TrainConfig(epochs=20, lr=0.01, batch_size=BENCH_BATCH, seed=0),
                      stop_when=lambda row: row.val_jaccard_hard >= 0.7)
    elapsed = time.perf_counter() - t0
    best = max(r.val_jaccard_hard for r in report.rows)
    hit = next((r.epoch for r in report.rows if r.val_jaccard_hard >= 0.7), None)
    verdict(5, "synthetic benchmark", best >= 0.7 and elapsed < 1800,
            f"hard val Jaccard {best:.4f} >= 0.7 at epoch {hit} of <= 20, {elapsed:.0f}s < 1800s")


def test_criterion_6_directional_comparison(benchmark_data):
    train_s, val_s = benchmark_data
    base = ModelConfig(arch="unet", **BENCH_MODEL)
    wins, lines, csv_ok = 0, [], True
    for seed in range(5):
        archs = ARCHS if seed == 0 else ("unet", "seea_unet")
        table = compare_models(archs, train_s, val_s, base, TrainConfig(lr=0.01, batch_size=BENCH_BATCH, seed=seed),
                               epochs=(3,))
        text = table.to_csv().splitlines()
        header = text[0].split(",")
        csv_ok &= header == ["model", "train_jaccard@3", "val_jaccard@3", "train_loss@3", "val_loss@3"]
        csv_ok &= [line.split(",")[0] for line in text[1:]] == list(archs)
        row = {r.model: r for r in table.rows}
        u, s = row["unet"].get("val_jaccard@3"), row["seea_unet"].get("val_jaccard@3")
        wins += s > u
        lines.append(f"seed {seed}: SEEA {s:.4f} vs UNet {u:.4f}")
    verdict(6, "directional comparison", wins >= 3 and csv_ok,
            f"SEEA val Jaccard > UNet on {wins}/5 seeds (need >= 3); CSV shape ok {csv_ok}; " + "; ".join(lines))


def test_criterion_7_closed_forms():
    focal = binary_focal_loss(Tensor([0.5]), np.array([1.0])).item()
    bce_like = binary_focal_loss(Tensor([0.5]), np.array([1.0]), FocalLossConfig(gamma=0.0, alpha=1.0)).item()
    rng = np.random.default_rng(0)
    p = rng.uniform(0.01, 0.99, 64)
    t = (rng.random(64) > 0.5).astype(float)
    bce = float(np.mean(-(t * np.log(p) + (1 - t) * np.log(1 - p))))
    focal_bce = binary_focal_loss(Tensor(p), t, FocalLossConfig(gamma=0.0, alpha=1.0)).item()
    j = jaccard(np.array([1, 1, 0, 0.0]), np.array([1, 0, 1, 0.0]), JaccardConfig())
    ok = abs(focal - 0.043321) <= 1e-6 and abs(bce_like - np.log(2)) <= 1e-9 and abs(focal_bce - bce) <= 1e-9 \
        and abs(j - 0.3333) <= 1e-3
    verdict(7, "loss/metric closed forms", ok,
            f"focal(0.5) = {focal:.7f} (0.043321 +- 1e-6); gamma=0,alpha=1 vs BCE diff "
            f"{max(abs(bce_like - np.log(2)), abs(focal_bce - bce)):.1e} <= 1e-9; Jaccard 1/3 example {j:.5f}")


def test_criterion_8_range_invariants():
    rng = np.random.default_rng(5)
    violations, checked = [], 0
    for arch in ARCHS:
        for layout in ("compact", "reference"):
            for depth, base in ((1, 4), (2, 8), (3, 4)):
                cfg = ModelConfig(arch=arch, layout=layout, input_size=(16, 16), base_filters=base, depth=depth,
                                  se_reduction=2)
                model = build_model(cfg, seed=depth)
                x = rng.random((2, 3, 16, 16)).astype(np.float32)
                for train_mode in (False, True):
                    out = model(x, train=train_mode).data
                    checked += 1
                    if out.shape != (2, 1, 16, 16) or not np.all((out > 0) & (out < 1)):
                        violations.append(f"{arch}/{layout}/d{depth} output")
                # intermediate ranges: SE scales and attention coefficients on every stage
                h = Tensor(x)
                for stage in model.encoder:
                    h = model._run_block(h, stage.block, False)
                    if stage.se is not None:
                        s = se_scales(h, stage.se).data
                        checked += 1
                        if not np.all((s > 0) & (s < 1)):
                            violations.append(f"{arch}/{layout}/d{depth} SE scales")
                    h = ops.maxpool2d(h, 2, 2)
                for stage in model.decoder:
                    if stage.gate is not None:
                        c_skip = stage.gate.wx.weight.shape[1]
                        c_gate = stage.gating.conv.weight.shape[1]
                        hw = x.shape[2] // 2 ** depth
                        xs = Tensor(rng.standard_normal((2, c_skip, 2 * hw, 2 * hw)).astype(np.float32))
                        g = Tensor(rng.standard_normal((2, c_gate, hw, hw)).astype(np.float32))
                        a = attention_coefficients(xs, gating_signal(g, stage.gating), stage.gate).data
                        checked += 1
                        if not np.all((a > 0) & (a < 1)):
                            violations.append(f"{arch}/{layout}/d{depth} attention")
    verdict(8, "range/shape invariants", not violations,
            f"{checked} output/SE/attention checks across 4 archs x 2 layouts x 3 sizes, violations: {violations or 'none'}")


def test_criterion_9_determinism_and_persistence(tmp_path):
    train_s, val_s = synth_split(12, 4, (32, 32), seed=SYNTH_SEED_OFFSET)
    cfg = ModelConfig(arch="seea_unet", input_size=(32, 32), base_filters=8, depth=2, se_reduction=4)
    tcfg = TrainConfig(epochs=2, lr=0.01, batch_size=4, seed=3)
    m1, m2 = build_model(cfg, seed=3), build_model(cfg, seed=3)
    _, r1 = train(m1, train_s, val_s, tcfg)
    _, r2 = train(m2, train_s, val_s, tcfg)
    same_report = r1.metrics_equal(r2)
    same_params = all(np.array_equal(a.tensor.data, b.tensor.data) for a, b in zip(m1.params, m2.params))
    path = save_checkpoint(m1.params, tmp_path / "a.ckpt", {"model": cfg.to_dict()})
    store, _ = load_checkpoint(path)
    fresh = build_model(cfg, seed=99)
    restore_into(fresh.params, store)
    x = np.stack([s.image for s in val_s])
    same_forward = fresh(x).data.tobytes() == m1(x).data.tobytes()
    blob = path.read_bytes()
    same_bytes = dumps(loads(blob)[0], loads(blob)[1]) == blob
    ok = same_report and same_params and same_forward and same_bytes
    verdict(9, "determinism & persistence", ok,
            f"identical TrainReport (timing excluded) {same_report}, identical parameters {same_params}, "
            f"reload forward bitwise {same_forward}, checkpoint bytes round-trip {same_bytes}")
