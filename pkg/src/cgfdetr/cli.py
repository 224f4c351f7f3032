"""``cgfdetr`` command line: check, gradcheck, fuse, bench, forward, flops, init.

Output is line-oriented ``key=value`` records. Exit status: 0 pass, 1 a
suite or gradient check failed, 2 usage or I/O error.
"""
from __future__ import annotations

import argparse
import hashlib
import sys
from typing import Optional, Sequence

import numpy as np

from .archive import ArchiveError, archive_read, archive_write
from .assembly import AssemblyConfig, assembly_forward, count_flops, fuse_assembly, init_assembly, load_assembly
from .tensor import ShapeError

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
DTYPES = {"f32": np.float32, "f64": np.float64}


def _config(args) -> AssemblyConfig:
    return AssemblyConfig.load(args.config) if args.config else AssemblyConfig()


def cmd_check(args) -> int:
    from .checks import perturb_fused_kernel, run_all

    fault = perturb_fused_kernel if args.inject_fault == "fusion" else None
    results = run_all(seed=args.seed, trials=args.trials, fault=fault)
    for r in results:
        print(r.line())
    failed = sum(not r.passed for r in results)
    print(f"summary suites={len(results)} failed={failed}")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import run_gradchecks

    seeds = tuple(args.seed + i for i in range(args.seeds))
    ok = True
    for block, seed, shape, reports in run_gradchecks(seeds=seeds, tol=args.tol, h=args.step):
        if args.block != "all" and block != args.block:
            continue
        for r in reports:
            ok &= r.passed
            print(f"block={block} seed={seed} shape={shape} {r.line()}")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_fuse(args) -> int:
    from .harness import fuse_archive

    out, diffs = fuse_archive(archive_read(args.input), np.random.default_rng(args.seed))
    archive_write(out, args.output)
    for block, diff in diffs.items():
        print(f"block={block} max_abs_diff={diff!r}")
    print(f"wrote={args.output} tensors={len(out)}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .harness import run_bench

    cfg = _config(args)
    fused = True if args.fused else None
    blocks = args.blocks.split(",") if args.blocks else None
    kwargs = {"blocks": blocks} if blocks else {}
    results = run_bench(cfg, reps=args.reps, fused=fused, seed=args.seed, dtype=DTYPES[args.dtype], **kwargs)
    for r in results:
        print(r.line())
    by_label = {r.label: r for r in results}
    for block in ("gcfc3", "assembly"):
        tr, dp = by_label.get(f"{block}.train"), by_label.get(f"{block}.deploy")
        if tr and dp:
            print(f"compare={block} deploy_over_train={dp.median_ns / tr.median_ns:.4f}")
    return EXIT_OK


def _checksum(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()[:16]


def cmd_forward(args) -> int:
    cfg = _config(args)
    dtype = DTYPES[args.dtype]
    if args.weights:
        archive = archive_read(args.weights)
        stored_fused = any(name.endswith(".fused.weight") for name in archive)
        params = load_assembly(cfg, archive, fused=stored_fused, dtype=dtype)
    else:
        params = init_assembly(cfg, np.random.default_rng(args.seed), dtype)
    if args.fused:
        params = fuse_assembly(params)
    rng = np.random.default_rng(args.seed)
    img = rng.normal(size=(args.batch, cfg.in_channels, cfg.height, cfg.width)).astype(dtype)
    p3, p4, trace = assembly_forward(img, cfg, params, return_trace=True)
    print(f"form={'deploy' if params.fused else 'train'} dtype={args.dtype}")
    for name, t in (("P3", p3), ("P4", p4)):
        print(f"output={name} shape={'x'.join(map(str, t.shape))} mean={float(t.mean())!r} "
              f"std={float(t.std())!r} sha256={_checksum(t)}")
    if args.trace:
        for line in trace.lines(max_rows=args.trace_rows):
            print(f"spga {line}")
    if args.save:
        np.savez(args.save, P3=p3, P4=p4)
    return EXIT_OK


def cmd_flops(args) -> int:
    cfg = _config(args)
    train, deploy = count_flops(cfg), count_flops(cfg, fused=True)
    for line in (deploy if args.fused else train).lines():
        print(line)
    print(f"total_train={train.total} total_deploy={deploy.total} "
          f"reduction={train.total - deploy.total}")
    return EXIT_OK


def cmd_init(args) -> int:
    cfg = _config(args)
    params = init_assembly(cfg, np.random.default_rng(args.seed), DTYPES[args.dtype])
    archive = params.to_archive()
    archive_write(archive, args.output)
    print(f"wrote={args.output} tensors={len(archive)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cgfdetr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        p.add_argument("--seed", type=int, default=0)
        if config:
            p.add_argument("--config", help="JSON file with AssemblyConfig fields")

    p = sub.add_parser("check", help="run every invariant suite")
    common(p, config=False)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--inject-fault", choices=["fusion"], help="perturb fused kernels to prove the suite bites")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    common(p, config=False)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--block", choices=["all", "xfa_block", "xfa_unit", "spga", "gcfc3"], default="all")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--step", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("fuse", help="rewrite train-form GCFC3 tensors into the fused form")
    common(p, config=False)
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("bench", help="fused vs unfused latency")
    common(p)
    p.add_argument("--reps", type=int, default=30)
    p.add_argument("--fused", action="store_true", help="time only the deploy form")
    p.add_argument("--dtype", choices=list(DTYPES), default="f32")
    p.add_argument("--blocks", help="comma-separated subset of gcfc3,xfa,spga,assembly")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("forward", help="run the assembly on a seeded random image")
    common(p)
    p.add_argument("--weights")
    p.add_argument("--fused", action="store_true")
    p.add_argument("--dtype", choices=list(DTYPES), default="f64")
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--trace", action="store_true", help="dump SPGA ratio, k and row supports")
    p.add_argument("--trace-rows", type=int, default=4)
    p.add_argument("--save", help="write P3/P4 to this .npz path")
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("flops", help="analytic per-layer FLOPs")
    common(p)
    p.add_argument("--fused", action="store_true")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("init", help="write a freshly initialized weight archive")
    common(p)
    p.add_argument("output")
    p.add_argument("--dtype", choices=list(DTYPES), default="f64")
    p.set_defaults(func=cmd_init)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "reps", 30) < 30:
        print("error: --reps must be >= 30", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (ArchiveError, OSError, KeyError, ShapeError, ValueError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
