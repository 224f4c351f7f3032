import numpy as np
import pytest

from cgfdetr.archive import ArchiveError, WeightArchive
from cgfdetr.assembly import AssemblyConfig, assembly_forward, init_assembly, load_assembly
from cgfdetr.checks import random_bn, random_conv
from cgfdetr.gcfc3 import CONV3X3_BN, BranchSpec, GCFC3Params, fold_bn
from cgfdetr.harness import BenchResult, bench_interleaved, fuse_archive, gcfc3_from_arrays, run_bench

SMALL = AssemblyConfig(height=32, width=32, stage_channels=(8, 16, 32), neck_out=12, xfa_heads=2)


def test_fuse_default_archive_diff_and_names():
    cfg = AssemblyConfig()
    arch = init_assembly(cfg, np.random.default_rng(0)).to_archive()
    out, diffs = fuse_archive(arch)
    assert list(diffs) == ["gcfc3.0"] and diffs["gcfc3.0"] <= 1e-10
    assert not any(".branch" in n for n in out)
    assert {"gcfc3.0.fused.weight", "gcfc3.0.fused.bias", "gcfc3.0.fuse.weight"} <= set(out)
    assert out["gcfc3.0.fused.weight"].shape == (192, 192, 3, 3)


def test_fuse_already_fused_rejected():
    arch = init_assembly(SMALL, np.random.default_rng(1)).to_archive()
    fused, _ = fuse_archive(arch)
    with pytest.raises(ArchiveError, match="no train-form branches found"):
        fuse_archive(fused)


def test_fuse_missing_tensor_named():
    arch = init_assembly(SMALL, np.random.default_rng(2)).to_archive()
    for missing in ("gcfc3.0.branch1.bn0.var", "gcfc3.0.fuse.weight"):
        broken = WeightArchive({k: v for k, v in arch.items() if k != missing})
        with pytest.raises(ArchiveError, match=missing.replace(".", r"\.")):
            fuse_archive(broken)


def test_fuse_single_3x3_equals_folded():
    rng = np.random.default_rng(3)
    conv, bn = random_conv(rng, 4, 4, 3), random_bn(rng, 4)
    p = GCFC3Params((4, 2), [BranchSpec(CONV3X3_BN, [conv], [bn])], random_conv(rng, 5, 6, 1))
    out, diffs = fuse_archive(WeightArchive(p.named_arrays("gcfc3.0.")))
    folded = fold_bn(conv, bn)
    np.testing.assert_array_equal(out["gcfc3.0.fused.weight"], folded.weight)
    np.testing.assert_array_equal(out["gcfc3.0.fused.bias"], folded.bias)
    assert diffs["gcfc3.0"] <= 1e-10


def test_rebuild_from_arrays_infers_kinds():
    p = init_assembly(SMALL, np.random.default_rng(4)).neck[0]
    q = gcfc3_from_arrays(p.named_arrays("gcfc3.0."), "gcfc3.0")
    assert [b.kind for b in q.branches] == [b.kind for b in p.branches] and q.split == p.split


def test_fused_archive_forward_matches(tmp_path):
    params = init_assembly(SMALL, np.random.default_rng(5))
    fused, _ = fuse_archive(params.to_archive())
    img = np.random.default_rng(6).normal(size=(1, 3, 32, 32))
    a, _ = assembly_forward(img, SMALL, params)
    b, _ = assembly_forward(img, SMALL, load_assembly(SMALL, fused, fused=True))
    assert np.abs(a - b).max() <= 1e-10


def test_bench_interleaved_guards_and_order():
    calls = []
    fns = {"a": lambda: calls.append("a"), "b": lambda: calls.append("b")}
    res = bench_interleaved(fns, {"a": (1,), "b": (2,)}, reps=30, warmup=5)
    assert calls[:10] == ["a"] * 5 + ["b"] * 5
    assert calls[10:16] == ["a", "b"] * 3
    for r in res:
        assert r.reps == 30 and r.p10_ns <= r.median_ns <= r.p90_ns
    with pytest.raises(ValueError):
        bench_interleaved(fns, {}, reps=29)
    with pytest.raises(ValueError):
        bench_interleaved(fns, {}, reps=30, warmup=4)


def test_run_bench_labels_and_dtype():
    res = run_bench(SMALL, reps=30, blocks=("gcfc3", "spga"))
    assert [r.label for r in res] == ["gcfc3.train", "gcfc3.deploy", "spga"]
    assert res[0].input_shape == (1, SMALL.neck_in, 4, 4)
    assert "reps=30" in res[0].line()
    only = run_bench(SMALL, reps=30, fused=True, blocks=("assembly",))
    assert [r.label for r in only] == ["assembly.deploy"]
    with pytest.raises(ValueError):
        run_bench(SMALL, blocks=("decoder",))


def test_bench_result_line():
    line = BenchResult("x", 10.4, 9.0, 12.0, 30, (1, 3, 8, 8)).line()
    assert line == "label=x median_ns=10 p10_ns=9 p90_ns=12 reps=30 input_shape=1x3x8x8"


def test_bench_medians_stable_across_runs():
    a = {r.label: r.median_ns for r in run_bench(AssemblyConfig(), reps=30, blocks=("gcfc3",))}
    b = {r.label: r.median_ns for r in run_bench(AssemblyConfig(), reps=30, blocks=("gcfc3",))}
    for label in a:
        assert abs(a[label] - b[label]) <= 0.25 * max(a[label], b[label])
