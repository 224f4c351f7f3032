"""Archive-level fusion and latency benchmarking used by the CLI."""
from __future__ import annotations

import re
import time
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .archive import ArchiveError, WeightArchive
from .assembly import AssemblyConfig, assembly_forward, fuse_assembly, init_assembly
from .gcfc3 import (BRANCH_LAYOUT, BranchSpec, GCFC3Params, fuse_branches, gcfc3_forward_deploy,
                    gcfc3_forward_train)
from .spga import spga_forward
from .tensor import BNParams, ConvParams
from .xfa import xfa_unit_forward

_BRANCH_NAME = re.compile(r"^(?P<block>gcfc3\.\d+)\.branch(?P<i>\d+)\.(?P<kind>conv|bn)(?P<j>\d+)\.(?P<field>\w+)$")
_KIND_BY_KERNELS = {layout: kind for kind, layout in BRANCH_LAYOUT.items()}


def _require(arrays, name: str) -> np.ndarray:
    if name not in arrays:
        raise ArchiveError(f"missing tensor {name!r}")
    return np.asarray(arrays[name])


def gcfc3_blocks_in(arrays) -> list[str]:
    """Prefixes (``gcfc3.N``) of every train-form GCFC3 in ``arrays``, in order."""
    seen = []
    for name in arrays:
        m = _BRANCH_NAME.match(name)
        if m and m["block"] not in seen:
            seen.append(m["block"])
    return seen


def gcfc3_from_arrays(arrays, block: str, eps: float = 1e-5) -> GCFC3Params:
    """Rebuild a train-form GCFC3 from its archive names; branch kinds follow kernel shapes."""
    layout = defaultdict(set)
    for name in arrays:
        m = _BRANCH_NAME.match(name)
        if m and m["block"] == block:
            layout[int(m["i"])].add(int(m["j"]))
    if not layout:
        raise ArchiveError(f"no train-form branches found for {block}")
    branches = []
    for i in range(max(layout) + 1):
        pre = f"{block}.branch{i}"
        if i not in layout:
            raise ArchiveError(f"missing tensor {pre + '.conv0.weight'!r}")
        convs, bns = [], []
        for j in range(max(layout[i]) + 1):
            w = _require(arrays, f"{pre}.conv{j}.weight")
            bias = arrays[f"{pre}.conv{j}.bias"] if f"{pre}.conv{j}.bias" in arrays else None
            k = w.shape[-1]
            convs.append(ConvParams(w.copy(), None if bias is None else np.array(bias), 1, k // 2))
            bns.append(BNParams(*(_require(arrays, f"{pre}.bn{j}.{f}").copy()
                                  for f in ("gamma", "beta", "mean", "var")), eps=eps))
        kernels = tuple(c.kernel_size[0] for c in convs)
        if kernels not in _KIND_BY_KERNELS:
            raise ArchiveError(f"{pre}: unsupported branch layout with kernels {kernels}")
        branches.append(BranchSpec(_KIND_BY_KERNELS[kernels], convs, bns))
    fw = _require(arrays, f"{block}.fuse.weight")
    fb = arrays[f"{block}.fuse.bias"] if f"{block}.fuse.bias" in arrays else None
    fuse = ConvParams(fw.copy(), None if fb is None else np.array(fb))
    ct = branches[0].c_in
    return GCFC3Params((ct, fuse.c_in - ct), branches, fuse)


def fuse_archive(archive: WeightArchive, rng: Optional[np.random.Generator] = None,
                 probe_hw: tuple[int, int] = (8, 8)) -> tuple[WeightArchive, dict[str, float]]:
    """Rewrite every train-form GCFC3 into its fused deploy names.

    Returns the new archive and, per block, the max abs train/deploy difference
    on a random probe batch.
    """
    blocks = gcfc3_blocks_in(archive)
    if not blocks:
        raise ArchiveError("no train-form branches found")
    rng = rng if rng is not None else np.random.default_rng(0)
    fused_names, diffs = {}, {}
    for block in blocks:
        p = gcfc3_from_arrays(archive, block)
        f = fuse_branches(p)
        x = rng.normal(size=(2, p.c_in) + tuple(probe_hw)).astype(p.fuse.weight.dtype)
        diffs[block] = float(np.abs(gcfc3_forward_deploy(x, f) - gcfc3_forward_train(x, p)).max())
        fused_names[block] = f.named_arrays(block + ".")
    out = WeightArchive()
    emitted = set()
    for name, arr in archive.items():
        m = _BRANCH_NAME.match(name)
        block = m["block"] if m else next((b for b in blocks if name.startswith(b + ".fuse.")), None)
        if block is None:
            out[name] = arr
        elif block not in emitted:
            emitted.add(block)
            for fname, farr in fused_names[block].items():
                out[fname] = farr
    return out, diffs


# ---------------------------------------------------------------------------
# benchmarking


@dataclass
class BenchResult:
    label: str
    median_ns: float
    p10_ns: float
    p90_ns: float
    reps: int
    input_shape: tuple[int, ...]

    def line(self) -> str:
        return (f"label={self.label} median_ns={self.median_ns:.0f} p10_ns={self.p10_ns:.0f} "
                f"p90_ns={self.p90_ns:.0f} reps={self.reps} input_shape={'x'.join(map(str, self.input_shape))}")


def bench_interleaved(fns: dict[str, Callable[[], object]], shapes: dict[str, tuple], reps: int,
                      warmup: int = 5) -> list[BenchResult]:
    """Time each callable ``reps`` times, alternating between them so drift hits all equally."""
    if reps < 30:
        raise ValueError(f"reps must be >= 30, got {reps}")
    if warmup < 5:
        raise ValueError(f"warmup must be >= 5, got {warmup}")
    for fn in fns.values():
        for _ in range(warmup):
            fn()
    samples = {label: [] for label in fns}
    for _ in range(reps):
        for label, fn in fns.items():
            t0 = time.perf_counter_ns()
            fn()
            samples[label].append(time.perf_counter_ns() - t0)
    out = []
    for label, ts in samples.items():
        p10, med, p90 = np.percentile(np.asarray(ts, dtype=np.float64), [10, 50, 90])
        out.append(BenchResult(label, float(med), float(p10), float(p90), reps, tuple(shapes[label])))
    return out


BENCH_BLOCKS = ("gcfc3", "xfa", "spga", "assembly")


def run_bench(cfg: AssemblyConfig, reps: int = 30, fused: Optional[bool] = None,
              blocks: Sequence[str] = BENCH_BLOCKS, seed: int = 0, warmup: int = 5,
              dtype=np.float32) -> list[BenchResult]:
    """Benchmark blocks of the toy assembly on identical inputs.

    ``fused=None`` times both train and deploy forms of the GCFC3 neck and the
    assembly; ``True``/``False`` restricts to one form.
    """
    unknown = set(blocks) - set(BENCH_BLOCKS)
    if unknown:
        raise ValueError(f"unknown bench blocks {sorted(unknown)}")
    rng = np.random.default_rng(seed)
    params = init_assembly(cfg, rng, dtype)
    deploy = fuse_assembly(params)
    variants = {None: ("train", "deploy"), False: ("train",), True: ("deploy",)}[fused]
    h4, w4 = cfg.height // 4, cfg.width // 4
    fns, shapes = {}, {}

    def add(label, fn, shape):
        fns[label] = fn
        shapes[label] = shape

    if "gcfc3" in blocks:
        x = rng.normal(size=(1, cfg.neck_in, cfg.height // 8, cfg.width // 8)).astype(dtype)
        if "train" in variants:
            add("gcfc3.train", lambda: gcfc3_forward_train(x, params.neck[0]), x.shape)
        if "deploy" in variants:
            add("gcfc3.deploy", lambda: gcfc3_forward_deploy(x, deploy.neck[0]), x.shape)
    if "xfa" in blocks:
        xx = rng.normal(size=(1, cfg.stage_channels[0], h4, w4)).astype(dtype)
        add("xfa.0", lambda: xfa_unit_forward(xx, params.units[0], cfg.xfa_config(0)), xx.shape)
    if "spga" in blocks:
        xs = rng.normal(size=(1, cfg.stage_channels[2], cfg.height // 16, cfg.width // 16)).astype(dtype)
        add("spga", lambda: spga_forward(xs, params.spga), xs.shape)
    if "assembly" in blocks:
        img = rng.normal(size=(1, cfg.in_channels, cfg.height, cfg.width)).astype(dtype)
        if "train" in variants:
            add("assembly.train", lambda: assembly_forward(img, cfg, params), img.shape)
        if "deploy" in variants:
            add("assembly.deploy", lambda: assembly_forward(img, cfg, deploy), img.shape)
    return bench_interleaved(fns, shapes, reps, warmup)
