"""Acceptance criteria 1-10, one test each; every test records a PASS/FAIL line."""
import json
import time

import numpy as np

from bbtquant.calib import channel_scales, so2_eigenbasis, spectral_energy
from bbtquant.cli import main
from bbtquant.experiments import ALPHA_GRID, FixtureConfig, sweep
from bbtquant.fuzz import run_case
from bbtquant.layers import LinearLayer
from bbtquant.quant import (
    UnsupportedBitWidthError,
    dequantize,
    pack_codes,
    quantize_groupwise,
    reconstruction_objective,
    signround_refine,
    unpack_codes,
)
from bbtquant.reports import metrics_bytes
from bbtquant.synth import BlockSpec, build_block, collect_taps, forward, random_inputs, rel_err
from bbtquant.transform import (
    ATTN_ALLOWLIST,
    BUGGY_ATTN_ALLOWLIST,
    apply_input_hook,
    block_statistics,
    fold_spectral,
    invert_pair_pca,
    pair_pca,
    prepare_block,
)
from bbtquant.wht import fwht_normalized, sylvester_hadamard

RESULTS = []
N_SEEDS = 20


def record(n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def calibrated(spec):
    block = build_block(spec)
    x, pos = random_inputs(spec, 1000 + spec.seed, T=16, batch=8)
    return block, block_statistics(block, collect_taps(block, x, pos))


def test_criterion_01_wht_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for k in range(1, 11):
        d = 2**k
        H = sylvester_hadamard(d) / np.sqrt(d)
        V = rng.standard_normal((10, d))
        fast = fwht_normalized(V)
        ref = V @ H.T
        worst = max(worst,
                    np.abs(fast - ref).max() / np.abs(ref).max(),
                    np.abs(fwht_normalized(fast) - V).max() / np.abs(V).max(),
                    np.abs(np.linalg.norm(fast, axis=1) / np.linalg.norm(V, axis=1) - 1).max())
    elapsed = time.perf_counter() - t0
    record(1, worst <= 1e-12 and elapsed < 5.0, f"WHT oracle d=2..1024 max rel err {worst:.2e}, {elapsed:.2f}s")


def test_criterion_02_fold_identity_width_576():
    rng = np.random.default_rng(2)
    d_in, d_out = 576, 256
    W = rng.standard_normal((d_out, d_in)) / np.sqrt(d_in)
    calib = rng.standard_normal((512, d_in)) * np.linspace(0.1, 3.0, d_in)
    s = channel_scales(spectral_energy(calib), 0.5)
    X = rng.standard_normal((128, d_in)) * np.linspace(0.1, 3.0, d_in)

    errs = {}
    for label, store in (("32-bit", f32), ("64-bit", lambda a: a)):
        vanilla = LinearLayer(store(W))
        folded, rec = fold_spectral(vanilla, s)
        W_t = store(folded.weight)
        worst = 0.0
        for x in X:
            ref = x @ vanilla.weight.T
            worst = max(worst, rel_err(apply_input_hook(x, rec) @ W_t.T, ref))
        errs[label] = worst
    ok = errs["32-bit"] < 5e-7 and errs["64-bit"] <= 1e-12
    record(2, ok, f"width-576 fold over {len(X)} inputs, 32-bit {errs['32-bit']:.2e}, 64-bit {errs['64-bit']:.2e}")


def test_criterion_03_route_a():
    spec = BlockSpec(family="qwen3_qnorm", seed=3)
    good = run_case(spec, "spectral_pca", trials=20, precision="fp32")
    control = run_case(spec, "spectral_pca_symmetric", trials=20, precision="fp32")
    _, pos = random_inputs(spec, 0)
    distinct = len(set(np.asarray(pos).ravel().tolist())) > 1
    ok = good.max_rel_err <= 1e-5 and control.max_rel_err > 1e-2 and distinct
    record(3, ok, f"route A 32-bit {good.max_rel_err:.2e}, symmetric control {control.max_rel_err:.2e}")


def test_criterion_04_pair_pca():
    spec = BlockSpec(family="qwen2_bias", seed=4)
    good = run_case(spec, "spectral_pca_2d", trials=20, precision="fp32")

    block, stats = calibrated(spec)
    pairs = stats["cov.pair"]
    cov = {(g, p): pairs[g, p] for g in range(pairs.shape[0]) for p in range(pairs.shape[1])}
    rotated, rec = pair_pca(block, cov)
    broken = invert_pair_pca(rotated, rec, invert_bias=False)
    x, pos = random_inputs(spec, 0)
    omission = rel_err(forward(broken, x, pos), forward(block, x, pos))

    rng = np.random.default_rng(4)
    worst_det, min_det = 0.0, np.inf
    for a, b, c in rng.standard_normal((10_000, 3)) * np.exp(rng.uniform(-5, 5, (10_000, 1))):
        U = so2_eigenbasis(np.array([[a, b], [b, c]]))
        det = U[0, 0] * U[1, 1] - U[0, 1] * U[1, 0]
        worst_det, min_det = max(worst_det, abs(det - 1.0)), min(min_det, det)
    # cos^2 + sin^2 rounds; the sign is exact and the magnitude is 1 to a few ulp
    det_ok = min_det > 0 and worst_det <= 4 * np.finfo(np.float64).eps
    ok = good.max_rel_err <= 1e-6 and omission > 1e-2 and det_ok
    record(4, ok, f"pair-PCA 32-bit {good.max_rel_err:.2e}, bias omission {omission:.2e}, "
                  f"max |det-1| {worst_det:.1e} over 1e4")


def test_criterion_05_allowlist_bit_equivalence():
    details, ok = [], True
    for family in ("llama", "qwen2_bias", "qwen3_qnorm"):
        spec = BlockSpec(family=family, seed=5)
        block, stats = calibrated(spec)
        fixed, _ = prepare_block(block, "no_rotation", stats, allowlist=ATTN_ALLOWLIST)
        buggy, _ = prepare_block(block, "no_rotation", stats, allowlist=BUGGY_ATTN_ALLOWLIST)
        x, pos = random_inputs(spec, 5)
        delta = np.abs(forward(fixed, x, pos) - forward(buggy, x, pos)).max()
        ok &= delta == 0.0
        details.append(f"{family} max|d|={delta:g}")
    spec = BlockSpec(family="laguna_gate", seed=5)
    buggy = run_case(spec, "no_rotation_buggy", trials=20, precision="fp32")
    fixed = run_case(spec, "no_rotation", trials=20, precision="fp32")
    ok &= 1e-3 <= buggy.max_rel_err <= 1e-1 and fixed.max_rel_err <= 1e-6
    details.append(f"laguna buggy {buggy.max_rel_err:.2e} fixed {fixed.max_rel_err:.2e}")
    record(5, ok, ", ".join(details))


def test_criterion_06_moe_invariance():
    spec = BlockSpec(family="moe_fused")
    block, stats = calibrated(spec)
    _, bt = prepare_block(block, "no_rotation", stats)
    absorbed = set(bt.records["post_attn_norm"].absorbed_consumers)
    expected = {"mlp.router", "mlp.experts.gate_proj", "mlp.experts.up_proj",
                "mlp.shared.gate_proj", "mlp.shared.up_proj"}
    worst = max(run_case(BlockSpec(family="moe_fused", seed=s), "no_rotation", trials=3,
                         precision="fp64").max_rel_err for s in range(N_SEEDS))
    ok = absorbed == expected and worst <= 1e-10
    record(6, ok, f"MoE no_rotation 64-bit max rel err {worst:.2e} over {N_SEEDS} seeds")


def test_criterion_07_noise_budget_direction():
    rows = sweep("bits", (2, 4), range(N_SEEDS), alpha=0.5, cfg=FixtureConfig())
    w2, w4 = (r["median_rel_improvement"] for r in rows)
    record(7, w2 > w4, f"median rel improvement 2-bit {w2:.3f} vs 4-bit {w4:.3f} over {N_SEEDS} seeds")


def test_criterion_08_alpha_sweep_shape():
    rows = {r["alpha"]: r["median_bbt_mse"] for r in sweep("alpha", ALPHA_GRID, range(N_SEEDS), bits=2)}
    ends = min(rows[0.0], rows[1.0])
    ok = rows[0.25] <= ends and rows[0.5] <= ends
    record(8, ok, "median 2-bit MSE by alpha " + ", ".join(f"{a:g}:{m:.3e}" for a, m in rows.items()))


def test_criterion_09_quantizer_contracts():
    rng = np.random.default_rng(9)
    roundtrip = True
    for i in range(100_000):
        bits = 2 if i % 2 else 4
        codes = rng.integers(0, 2**bits, rng.integers(0, 40), dtype=np.uint8)
        roundtrip &= np.array_equal(unpack_codes(pack_codes(codes, bits), bits, codes.size), codes)

    bound, monotone = True, True
    for trial in range(20):
        W = rng.standard_normal((16, 200)) * rng.uniform(0.01, 5)
        X = rng.standard_normal((64, 200)) * rng.uniform(0.1, 3, 200)
        for bits in (2, 4):
            qt = quantize_groupwise(W, bits, 64)
            W_hat = dequantize(qt)
            scale = np.repeat(qt.scales.astype(np.float64), 64, axis=1)[:, :200]
            ulp = np.spacing(np.maximum(np.abs(W), np.abs(W_hat)))
            bound &= bool(np.all(np.abs(W_hat - W) <= scale / 2 + ulp))
            before = reconstruction_objective(W_hat, W, X)
            after = reconstruction_objective(dequantize(signround_refine(qt, W, X, 2)), W, X)
            monotone &= after <= before

    try:
        quantize_groupwise(np.ones((2, 8)), 3, 8)
        rejected = False
    except UnsupportedBitWidthError:
        rejected = True
    ok = roundtrip and bound and monotone and rejected
    record(9, ok, f"pack round trip x1e5 {roundtrip}, RTN bound {bound}, refine monotone {monotone}, "
                  f"3-bit rejected {rejected}")


def _pipeline(root, family="qwen2_bias", mode="spectral_pca_2d"):
    root.mkdir()

    def run(*argv):
        assert main([str(a) for a in argv] + ["--seed", "17"]) == 0

    run("build-model", "--family", family, "--out", root / "m.bbtt")
    run("make-data", root / "m.bbtt", "--out", root / "data.bbtt")
    run("calibrate", root / "m.bbtt", root / "data.bbtt", "--out", root / "stats.bbtt")
    run("transform", root / "m.bbtt", root / "stats.bbtt", "--mode", mode, "--out", root / "t.bbtt")
    run("quantize", root / "t.bbtt", "--record", root / "t.bbtt.record.json", "--refine", 1,
        "--data", root / "data.bbtt", "--out", root / "q.bbtq")
    run("verify", root / "m.bbtt", root / "t.bbtt", "--record", root / "t.bbtt.record.json",
        "--report", root / "verify.json")
    reports = {p: json.loads((root / p).read_text()) for p in
               ("stats.bbtt.report.json", "t.bbtt.report.json", "q.bbtq.report.json", "verify.json")}
    files = {p: (root / p).read_bytes() for p in ("stats.bbtt", "t.bbtt", "t.bbtt.record.json", "q.bbtq")}
    return {k: metrics_bytes(v) for k, v in reports.items()}, files


def test_criterion_10_determinism(tmp_path):
    m1, f1 = _pipeline(tmp_path / "a")
    m2, f2 = _pipeline(tmp_path / "b")
    ok = m1 == m2 and f1 == f2
    record(10, ok, f"{len(m1)} metric blocks and {len(f1)} checkpoints byte-identical across two runs")
