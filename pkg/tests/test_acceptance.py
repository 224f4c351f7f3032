"""Acceptance criteria, one test each.

Every test prints a single ``[PASS]``/``[FAIL]`` line (visible with ``-s``)
before asserting, so a run doubles as a report.
"""
import math
import time

import numpy as np
import pytest

from cgfdetr import tensor as T
from cgfdetr.assembly import AssemblyConfig, assembly_forward, count_flops, init_assembly
from cgfdetr.checks import F32_TRIAL, fusion_trial, run_gradchecks, suite_conv_oracle
from cgfdetr.flops import gcfc3_flops
from cgfdetr.gcfc3 import fuse_branches
from cgfdetr.harness import run_bench
from cgfdetr.oracle import dense_attention_naive
from cgfdetr.spga import _sparse_shsa, init_spga, sparse_shsa, spga_forward
from cgfdetr.xfa import XFAConfig, init_xfa_block, xfa_block_forward


def report(tag, ok, **details):
    info = " ".join(f"{k}={v}" for k, v in details.items())
    print(f"\n[{'PASS' if ok else 'FAIL'}] {tag} {info}")
    assert ok, f"{tag}: {info}"


def _tokens(t):
    return t.reshape(t.shape[0], -1).T


def _random_spga(rng, c, dim=None):
    p = init_spga(rng, c, dim)
    for a in p.named_arrays().values():
        a[...] = rng.normal(size=a.shape) * 0.7
    return p


def test_ac1_fusion_equivalence():
    rng = np.random.default_rng(1001)
    t0 = time.perf_counter()
    worst64 = max(fusion_trial(rng, np.float64) for _ in range(100))
    worst32 = max(fusion_trial(rng, np.float32, **F32_TRIAL) for _ in range(100))
    elapsed = time.perf_counter() - t0
    report("ac1.fusion_equivalence", worst64 <= 1e-10 and worst32 <= 2e-4 and elapsed < 30,
           trials=100, max_diff_f64=f"{worst64:.3e}", max_diff_f32=f"{worst32:.3e}", seconds=f"{elapsed:.1f}")


@pytest.mark.slow
def test_ac2_gradient_verification():
    t0 = time.perf_counter()
    results = run_gradchecks(seeds=(0, 1, 2), shapes=(0, 1), tol=1e-4, h=1e-5)
    elapsed = time.perf_counter() - t0
    blocks = {name for name, *_ in results}
    failed = [f"{name}/seed{s}/shape{si}:{r.param_name}" for name, s, si, reps in results for r in reps
              if not r.passed]
    worst = max(r.max_rel_err for *_, reps in results for r in reps)
    ok = not failed and blocks == {"xfa_block", "xfa_unit", "spga", "gcfc3"} and elapsed < 300
    report("ac2.gradient_verification", ok, cases=len(results), max_rel_err=f"{worst:.3e}",
           failed=",".join(failed) or "none", seconds=f"{elapsed:.1f}")


def _scalar_k(x, p):
    # global average pool, 1x1 projection and sigmoid written out in plain floats
    c = x.shape[1]
    pooled = [math.fsum(x[0, i].ravel().tolist()) / x[0, i].size for i in range(c)]
    w = p.gate_proj.weight.reshape(-1).tolist()
    logit = math.fsum(wi * gi for wi, gi in zip(w, pooled)) + float(p.gate_proj.bias[0])
    sig = 1.0 / (1.0 + math.exp(-logit)) if logit >= 0 else math.exp(logit) / (1.0 + math.exp(logit))
    n = x.shape[2] * x.shape[3]
    return max(1, min(n, math.floor(n * sig)))


def test_ac3_sparse_attention():
    rng = np.random.default_rng(1003)
    dense_diff = 0.0
    for _ in range(20):
        p = _random_spga(rng, 8, dim=int(rng.integers(1, 4)))
        xn = rng.normal(size=(1, 2, 3, 3))
        q, kk, v = (_tokens(T.conv2d(xn, c)[0]) for c in (p.q_proj, p.k_proj, p.v_proj))
        ref = dense_attention_naive(q, kk, v, 1 / math.sqrt(p.dim))
        dense_diff = max(dense_diff, float(np.abs(_tokens(sparse_shsa(xn, p, 9)[0]) - ref).max()))

    rows_ok, worst_sum = True, 0.0
    for _ in range(20):
        p = _random_spga(rng, 16)
        xn = rng.normal(size=(2, 4, 3, 4))
        ks = [int(v) for v in rng.integers(1, 13, size=2)]
        _, cache = _sparse_shsa(xn, p, ks)
        for k, alpha in zip(ks, cache[4]):
            rows_ok &= bool(np.all(np.count_nonzero(alpha, axis=1) == k))
            worst_sum = max(worst_sum, float(np.abs(alpha.sum(axis=1) - 1).max()))

    k_mismatch = 0
    for _ in range(50):
        p = _random_spga(rng, 16)
        p.gate_proj.bias[...] = rng.normal() * 2
        x = rng.normal(size=(1, 16, int(rng.integers(1, 6)), int(rng.integers(1, 6))))
        k_mismatch += spga_forward(x, p, return_trace=True)[1].k[0] != _scalar_k(x, p)

    ok = dense_diff <= 1e-10 and rows_ok and worst_sum <= 1e-6 and k_mismatch == 0
    report("ac3.sparse_attention", ok, dense_max_diff=f"{dense_diff:.3e}", rows_exact_k=rows_ok,
           row_sum_err=f"{worst_sum:.3e}", k_mismatches=f"{k_mismatch}/50")


def test_ac4_conv_oracle_grid():
    res = suite_conv_oracle(np.random.default_rng(1004), 1, full=True)
    worst = res.details["max_diff_f64"]
    report("ac4.conv_oracle", worst <= 1e-10, shapes=res.details["shapes"], max_diff_f64=f"{worst:.3e}")


def test_ac5_flop_direction():
    cfg = AssemblyConfig()
    params = init_assembly(cfg, np.random.default_rng(1005))
    h, w = cfg.height // 8, cfg.width // 8
    g_train = gcfc3_flops(params.neck[0], h, w).total
    g_deploy = gcfc3_flops(fuse_branches(params.neck[0]), h, w).total
    a_train, a_deploy = count_flops(cfg).total, count_flops(cfg, fused=True).total
    report("ac5.flop_direction", g_deploy < g_train and a_deploy < a_train,
           gcfc3=f"{g_train}->{g_deploy}", assembly=f"{a_train}->{a_deploy}")


@pytest.mark.slow
def test_ac6_latency_direction():
    t0 = time.perf_counter()
    res = {r.label: r.median_ns for r in run_bench(AssemblyConfig(), reps=100, blocks=("gcfc3",),
                                                   dtype=np.float32)}
    elapsed = time.perf_counter() - t0
    ratio = res["gcfc3.deploy"] / res["gcfc3.train"]
    report("ac6.latency_direction", ratio <= 0.98 and elapsed < 120, train_ns=int(res["gcfc3.train"]),
           deploy_ns=int(res["gcfc3.deploy"]), ratio=f"{ratio:.3f}", seconds=f"{elapsed:.1f}")


def test_ac7_determinism_and_shape():
    cfg = AssemblyConfig()
    params = init_assembly(cfg, np.random.default_rng(1007))
    img = np.random.default_rng(7).normal(size=(1, 3, 256, 256))
    p3, p4 = assembly_forward(img, cfg, params)
    q3, q4 = assembly_forward(img, cfg, params)
    same = p3.tobytes() == q3.tobytes() and p4.tobytes() == q4.tobytes()
    report("ac7.determinism_shape", p4.shape == (1, 256, 16, 16) and same,
           p4_shape="x".join(map(str, p4.shape)), bitwise_repeat=same)


def test_ac8_residual_identity():
    rng = np.random.default_rng(1008)
    worst = 0.0
    for c, heads in ((8, 2), (16, 4)):
        cfg = XFAConfig(c, heads=heads)
        p = init_xfa_block(rng, cfg)
        for a in p.named_arrays().values():
            a[...] = rng.normal(size=a.shape)
        for conv in (p.attn_out, p.ffn_out):
            conv.weight[...] = 0
            conv.bias[...] = 0
        x = rng.normal(size=(2, c, 6, 5))
        worst = max(worst, float(np.abs(xfa_block_forward(x, p, cfg) - x).max()))
    report("ac8.residual_identity", worst == 0.0, max_abs_diff=worst)
