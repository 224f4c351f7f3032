"""Analytic FLOP counts, multiply-add counted as two operations.

Convolutions follow ``2 * k_h * k_w * (c_in / groups) * c_out * H_out * W_out``
(bias adds are not counted). Attention counts the logit and aggregation
products, ``2 * N^2 * d`` each. Elementwise work is counted only where it
differs between the training and deploy graphs: the BN layers inside the
re-parameterizable branches (2 per element) and the branch summation
(1 per element per extra branch).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

from .gcfc3 import FusedGCFC3, GCFC3Params
from .spga import SPGAParams
from .tensor import ConvParams
from .xfa import XFAUnitParams


@dataclass
class FlopReport:
    layers: list[tuple[str, int]] = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(f for _, f in self.layers)

    def add(self, name: str, flops: int) -> None:
        self.layers.append((name, int(flops)))

    def extend(self, other: "FlopReport") -> None:
        self.layers.extend(other.layers)

    def lines(self) -> list[str]:
        out = [f"layer={name} flops={f}" for name, f in self.layers]
        out.append(f"layer=total flops={self.total}")
        return out


def conv_out_hw(p: ConvParams, h: int, w: int) -> tuple[int, int]:
    kh, kw = p.kernel_size
    return ((h + 2 * p.padding - kh) // p.stride + 1, (w + 2 * p.padding - kw) // p.stride + 1)


def conv_flops(p: ConvParams, h: int, w: int) -> int:
    """FLOPs of one conv applied to an ``h x w`` input."""
    ho, wo = conv_out_hw(p, h, w)
    kh, kw = p.kernel_size
    return 2 * kh * kw * (p.c_in // p.groups) * p.c_out * ho * wo


def xfa_unit_flops(p: XFAUnitParams, h: int, w: int, prefix: str = "") -> FlopReport:
    r = FlopReport()
    r.add(prefix + "stem", conv_flops(p.stem, h, w))
    for i, blk in enumerate(p.blocks):
        for name in ("attn_dw", "attn_v", "attn_out", "ffn_in", "ffn_out"):
            r.add(f"{prefix}block{i}.{name}", conv_flops(getattr(blk, name), h, w))
    r.add(prefix + "merge", conv_flops(p.merge, h, w))
    return r


def spga_flops(p: SPGAParams, h: int, w: int, prefix: str = "") -> FlopReport:
    n_tok = h * w
    r = FlopReport()
    r.add(prefix + "gate_proj", conv_flops(p.gate_proj, 1, 1))
    for name in ("q_proj", "k_proj", "v_proj"):
        r.add(prefix + name, conv_flops(getattr(p, name), h, w))
    r.add(prefix + "attention", 2 * n_tok * n_tok * p.dim + 2 * n_tok * n_tok * p.v_proj.c_out)
    r.add(prefix + "out_proj", conv_flops(p.out_proj, h, w))
    return r


def gcfc3_flops(p: Union[GCFC3Params, FusedGCFC3], h: int, w: int, prefix: str = "") -> FlopReport:
    r = FlopReport()
    ct = p.split[0]
    if isinstance(p, FusedGCFC3):
        r.add(prefix + "fused", conv_flops(p.fused3x3, h, w))
    else:
        for i, b in enumerate(p.branches):
            for j, (conv, bn) in enumerate(zip(b.convs, b.bns)):
                r.add(f"{prefix}branch{i}.conv{j}", conv_flops(conv, h, w))
                r.add(f"{prefix}branch{i}.bn{j}", 2 * bn.channels * h * w)
        if len(p.branches) > 1:
            r.add(prefix + "branch_sum", (len(p.branches) - 1) * ct * h * w)
    r.add(prefix + "fuse", conv_flops(p.fuse, h, w))
    return r
