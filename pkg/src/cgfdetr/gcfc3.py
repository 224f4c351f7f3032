"""Multi-branch CSP conv block and its re-parameterization into one 3x3 conv.

Training form::

    x_c, x_r = split(x)
    T = sum_i branch_i(x_c)           # every branch is linear: conv/BN only
    y = SiLU(fuse(concat[T, x_r]))

Because each branch is a chain of stride-1 convolutions and frozen BNs, the
sum collapses to a single padded 3x3 convolution with bias (:func:`fuse_branches`).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import (BNParams, ConvParams, ShapeError, batchnorm_backward, batchnorm_infer,
                     channel_concat, channel_split, check_tensor4, conv2d, conv2d_backward,
                     init_conv, silu, silu_backward)

CONV1X1_BN = "conv1x1_bn"
CONV3X3_BN_THEN_CONV1X1_BN = "conv3x3_bn_then_conv1x1_bn"
CONV3X3_BN = "conv3x3_bn"

# kernel size of each conv in the chain, per kind
BRANCH_LAYOUT = {
    CONV1X1_BN: (1,),
    CONV3X3_BN_THEN_CONV1X1_BN: (3, 1),
    CONV3X3_BN: (3,),
}
DEFAULT_BRANCHES = (CONV1X1_BN, CONV3X3_BN_THEN_CONV1X1_BN)


@dataclass
class BranchSpec:
    kind: str
    convs: list[ConvParams]
    bns: list[BNParams]

    def __post_init__(self):
        if self.kind not in BRANCH_LAYOUT:
            raise ValueError(f"unsupported branch kind {self.kind!r}")
        layout = BRANCH_LAYOUT[self.kind]
        if len(self.convs) != len(layout) or len(self.bns) != len(layout):
            raise ShapeError(f"{self.kind} needs {len(layout)} conv/BN pairs")
        for conv, bn, k in zip(self.convs, self.bns, layout):
            if conv.kernel_size != (k, k) or conv.stride != 1 or conv.groups != 1 or conv.padding != k // 2:
                raise ShapeError(
                    f"{self.kind}: expected {k}x{k} conv, stride 1, pad {k // 2}, groups 1; got "
                    f"{conv.kernel_size}, stride {conv.stride}, pad {conv.padding}, groups {conv.groups}")
            if bn.channels != conv.c_out:
                raise ShapeError(f"{self.kind}: BN has {bn.channels} channels, conv emits {conv.c_out}")
        for a, b in zip(self.convs, self.convs[1:]):
            if a.c_out != b.c_in:
                raise ShapeError(f"{self.kind}: chained conv widths {a.c_out} -> {b.c_in} mismatch")

    @property
    def c_in(self) -> int:
        return self.convs[0].c_in

    @property
    def c_out(self) -> int:
        return self.convs[-1].c_out

    def named_arrays(self, prefix: str = "", trainable_only: bool = False) -> dict[str, np.ndarray]:
        out = {}
        for j, (conv, bn) in enumerate(zip(self.convs, self.bns)):
            out.update(conv.named_arrays(f"{prefix}conv{j}."))
            out.update(bn.named_arrays(f"{prefix}bn{j}.", trainable_only=trainable_only))
        return out


@dataclass
class GCFC3Params:
    split: tuple[int, int]
    branches: list[BranchSpec]
    fuse: ConvParams

    def __post_init__(self):
        ct, cb = self.split
        if ct < 1 or cb < 1:
            raise ShapeError(f"split {self.split} must have two positive parts")
        if not self.branches:
            raise ShapeError("GCFC3 needs at least one branch")
        for i, b in enumerate(self.branches):
            if b.c_in != ct or b.c_out != ct:
                raise ShapeError(f"branch {i} maps {b.c_in}->{b.c_out}, expected {ct}->{ct}")
        if self.fuse.kernel_size != (1, 1) or self.fuse.c_in != ct + cb:
            raise ShapeError(f"fuse conv must be 1x1 over {ct + cb} channels")

    @property
    def c_in(self) -> int:
        return sum(self.split)

    @property
    def c_out(self) -> int:
        return self.fuse.c_out

    def named_arrays(self, prefix: str = "", trainable_only: bool = False) -> dict[str, np.ndarray]:
        out = {}
        for i, b in enumerate(self.branches):
            out.update(b.named_arrays(f"{prefix}branch{i}.", trainable_only))
        out.update(self.fuse.named_arrays(prefix + "fuse."))
        return out


@dataclass
class FusedGCFC3:
    fused3x3: ConvParams
    fuse: ConvParams
    split: tuple[int, int] = field(default=(0, 0))

    @property
    def c_in(self) -> int:
        return sum(self.split)

    @property
    def c_out(self) -> int:
        return self.fuse.c_out

    def named_arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = self.fused3x3.named_arrays(prefix + "fused.")
        out.update(self.fuse.named_arrays(prefix + "fuse."))
        return out


def init_branch(rng: np.random.Generator, kind: str, channels: int, dtype=np.float64) -> BranchSpec:
    convs = [init_conv(rng, channels, channels, k, bias=False, dtype=dtype) for k in BRANCH_LAYOUT[kind]]
    bns = [BNParams.identity(channels, dtype=dtype) for _ in convs]
    return BranchSpec(kind, convs, bns)


def init_gcfc3(rng: np.random.Generator, c_in: int, c_out: int,
               kinds: Sequence[str] = DEFAULT_BRANCHES, transform_channels: int | None = None,
               dtype=np.float64) -> GCFC3Params:
    ct = c_in // 2 if transform_channels is None else transform_channels
    return GCFC3Params(
        split=(ct, c_in - ct),
        branches=[init_branch(rng, kind, ct, dtype) for kind in kinds],
        fuse=init_conv(rng, c_out, c_in, 1, dtype=dtype),
    )


# ---------------------------------------------------------------------------
# training graph


def _check_input(x, c_in, where):
    check_tensor4(x)
    if x.shape[1] != c_in:
        raise ShapeError(f"{where}: x has {x.shape[1]} channels, block expects {c_in}")


def branch_forward(x: np.ndarray, b: BranchSpec) -> np.ndarray:
    for conv, bn in zip(b.convs, b.bns):
        x = batchnorm_infer(conv2d(x, conv), bn)
    return x


def _branch_backward(x, b: BranchSpec, gy):
    inputs, pre_bn = [], []
    for conv, bn in zip(b.convs, b.bns):
        inputs.append(x)
        h = conv2d(x, conv)
        pre_bn.append(h)
        x = batchnorm_infer(h, bn)
    grads = {}
    for j in reversed(range(len(b.convs))):
        gy, grads[f"bn{j}.gamma"], grads[f"bn{j}.beta"] = batchnorm_backward(pre_bn[j], b.bns[j], gy)
        gy, gw, gb = conv2d_backward(inputs[j], b.convs[j], gy)
        grads[f"conv{j}.weight"] = gw
        if gb is not None:
            grads[f"conv{j}.bias"] = gb
    return gy, grads


def gcfc3_forward_train(x: np.ndarray, p: GCFC3Params) -> np.ndarray:
    _check_input(x, p.c_in, "gcfc3_forward_train")
    xc, xr = channel_split(x, list(p.split))
    t = branch_forward(xc, p.branches[0])
    for b in p.branches[1:]:
        t = t + branch_forward(xc, b)
    return silu(conv2d(channel_concat([t, xr]), p.fuse))


def gcfc3_backward(x: np.ndarray, p: GCFC3Params, grad_out: np.ndarray
                   ) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Gradients of the training graph with frozen BN statistics."""
    _check_input(x, p.c_in, "gcfc3_backward")
    xc, xr = channel_split(x, list(p.split))
    t = sum(branch_forward(xc, b) for b in p.branches)
    cat = channel_concat([t, xr])
    pre = conv2d(cat, p.fuse)
    gcat, gw, gb = conv2d_backward(cat, p.fuse, silu_backward(pre, grad_out))
    grads = {"fuse.weight": gw}
    if gb is not None:
        grads["fuse.bias"] = gb
    gt, gxr = channel_split(gcat, list(p.split))
    gxc = np.zeros_like(xc)
    for i, b in enumerate(p.branches):
        gi, bgrads = _branch_backward(xc, b, gt)
        gxc += gi
        grads.update({f"branch{i}.{k}": v for k, v in bgrads.items()})
    return channel_concat([gxc, gxr]), grads


# ---------------------------------------------------------------------------
# re-parameterization


def fold_bn(conv: ConvParams, bn: BNParams) -> ConvParams:
    """Absorb a frozen BN into the preceding conv's kernel and bias."""
    if bn.channels != conv.c_out:
        raise ShapeError(f"fold_bn: BN has {bn.channels} channels, conv emits {conv.c_out}")
    denom = bn.var + bn.eps
    if np.any(denom <= 0):
        raise ValueError("fold_bn: var + eps must be positive")
    scale = bn.gamma / np.sqrt(denom)
    b_old = conv.bias if conv.bias is not None else np.zeros_like(bn.beta)
    return ConvParams(conv.weight * scale[:, None, None, None], bn.beta + scale * (b_old - bn.mean),
                      conv.stride, conv.padding, conv.groups)


def embed_1x1_as_3x3(conv: ConvParams) -> ConvParams:
    if conv.kernel_size != (1, 1) or conv.stride != 1 or conv.padding != 0:
        raise ShapeError(f"embed_1x1_as_3x3: need a 1x1 stride-1 unpadded conv, got "
                         f"{conv.kernel_size} stride {conv.stride} pad {conv.padding}")
    w = np.zeros(conv.weight.shape[:2] + (3, 3), dtype=conv.weight.dtype)
    w[:, :, 1, 1] = conv.weight[:, :, 0, 0]
    bias = None if conv.bias is None else conv.bias.copy()
    return ConvParams(w, bias, 1, 1, conv.groups)


def compose_3x3_then_1x1(c1: ConvParams, c2: ConvParams) -> ConvParams:
    """Single 3x3 conv equivalent to applying ``c1`` (3x3, pad 1) then ``c2`` (1x1)."""
    if c1.kernel_size != (3, 3) or c1.padding != 1 or c1.stride != 1 or c1.groups != 1:
        raise ShapeError("compose_3x3_then_1x1: first conv must be 3x3, pad 1, stride 1, ungrouped")
    if c2.kernel_size != (1, 1) or c2.stride != 1 or c2.padding != 0 or c2.groups != 1:
        raise ShapeError("compose_3x3_then_1x1: second conv must be 1x1, stride 1, unpadded, ungrouped")
    if c1.c_out != c2.c_in:
        raise ShapeError(f"compose_3x3_then_1x1: {c1.c_out} channels into a conv expecting {c2.c_in}")
    mix = c2.weight[:, :, 0, 0]
    w = np.einsum("om,mikl->oikl", mix, c1.weight)
    b1 = c1.bias if c1.bias is not None else np.zeros(c1.c_out, c1.weight.dtype)
    b2 = c2.bias if c2.bias is not None else np.zeros(c2.c_out, c2.weight.dtype)
    return ConvParams(w, mix @ b1 + b2, 1, 1, 1)


def branch_to_3x3(b: BranchSpec) -> ConvParams:
    folded = [fold_bn(conv, bn) for conv, bn in zip(b.convs, b.bns)]
    if b.kind == CONV1X1_BN:
        return embed_1x1_as_3x3(folded[0])
    if b.kind == CONV3X3_BN_THEN_CONV1X1_BN:
        return compose_3x3_then_1x1(folded[0], folded[1])
    if b.kind == CONV3X3_BN:
        return folded[0]
    raise ValueError(f"unsupported branch kind {b.kind!r}")


def fuse_branches(p: GCFC3Params) -> FusedGCFC3:
    """Deploy form: one 3x3 conv (kernel and bias summed over branches) plus a copy of ``fuse``."""
    weight, bias = None, None
    for b in p.branches:
        c = branch_to_3x3(b)
        weight = c.weight.copy() if weight is None else weight + c.weight
        bias = c.bias.copy() if bias is None else bias + c.bias
    return FusedGCFC3(ConvParams(weight, bias, 1, 1, 1), p.fuse.copy(), tuple(p.split))


def gcfc3_forward_deploy(x: np.ndarray, f: FusedGCFC3) -> np.ndarray:
    _check_input(x, f.c_in, "gcfc3_forward_deploy")
    xc, xr = channel_split(x, list(f.split))
    return silu(conv2d(channel_concat([conv2d(xc, f.fused3x3), xr]), f.fuse))
