"""Toy-scale feature extractor wiring the three blocks together.

    img -> stem (3x3, stride 4) -> XFAUnit              -> c2 @ H/4
        -> down (3x3, stride 2) -> XFAUnit              -> c3 @ H/8
        -> down (3x3, stride 2) -> XFAUnit -> SPGA      -> P4 = c4 @ H/16
    P3 = GCFC3(concat[c3 map, upsample2x(P4)])          -> neck_out @ H/8

No detection head or decoder is attached.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .archive import WeightArchive
from .flops import FlopReport, conv_flops, conv_out_hw, gcfc3_flops, spga_flops, xfa_unit_flops
from .gcfc3 import (DEFAULT_BRANCHES, FusedGCFC3, GCFC3Params, fuse_branches, gcfc3_forward_deploy,
                    gcfc3_forward_train, init_gcfc3)
from .spga import SPGAParams, init_spga, spga_forward
from .tensor import (ConvParams, ShapeError, channel_concat, check_tensor4, conv2d, init_conv, silu,
                     upsample_nearest2x)
from .xfa import XFAConfig, XFAUnitParams, init_xfa_unit, xfa_unit_forward


@dataclass
class AssemblyConfig:
    in_channels: int = 3
    height: int = 256
    width: int = 256
    stage_channels: tuple[int, int, int] = (64, 128, 256)
    xfa_blocks: tuple[int, int, int] = (1, 1, 1)
    xfa_heads: int = 4
    ffn_ratio: float = 2.0
    spga_dim: Optional[int] = None
    spga_groups: int = 1
    neck_out: int = 128
    neck_branches: tuple[str, ...] = DEFAULT_BRANCHES
    neck_transform: Optional[int] = None
    neck_depth: int = 1

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.xfa_blocks = tuple(int(b) for b in self.xfa_blocks)
        self.neck_branches = tuple(self.neck_branches)
        self.validate()

    def validate(self) -> None:
        if self.height % 16 or self.width % 16 or self.height < 16 or self.width < 16:
            raise ShapeError(f"input {self.height}x{self.width} must be a positive multiple of 16")
        if len(self.stage_channels) != 3 or len(self.xfa_blocks) != 3:
            raise ShapeError("stage_channels and xfa_blocks need three entries (stages 2-4)")
        for c in self.stage_channels:
            if c < 2 or c % 2:
                raise ShapeError(f"stage channels must be even, got {self.stage_channels}")
            if (c // 2) % self.xfa_heads:
                raise ShapeError(f"CSP width {c // 2} not divisible by {self.xfa_heads} heads")
        if self.stage_channels[2] % 4:
            raise ShapeError(f"deepest stage width {self.stage_channels[2]} must be divisible by 4")
        q = self.stage_channels[2] // 4
        if q % self.spga_groups:
            raise ShapeError(f"spga_groups={self.spga_groups} must divide {q}")
        if any(b < 1 for b in self.xfa_blocks) or self.neck_depth < 1 or self.neck_out < 1:
            raise ValueError("block counts, neck depth and neck_out must be positive")
        if not self.neck_branches:
            raise ValueError("neck needs at least one branch kind")

    def xfa_config(self, stage: int) -> XFAConfig:
        return XFAConfig(self.stage_channels[stage], heads=self.xfa_heads, ffn_ratio=self.ffn_ratio,
                         n_blocks=self.xfa_blocks[stage])

    @property
    def neck_in(self) -> int:
        return self.stage_channels[1] + self.stage_channels[2]

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "AssemblyConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "AssemblyConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class AssemblyParams:
    stem: ConvParams
    downs: list[ConvParams]
    units: list[XFAUnitParams]
    spga: SPGAParams
    neck: list[Union[GCFC3Params, FusedGCFC3]] = field(default_factory=list)

    @property
    def fused(self) -> bool:
        return all(isinstance(n, FusedGCFC3) for n in self.neck)

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = self.stem.named_arrays("stem.")
        for i, d in enumerate(self.downs):
            out.update(d.named_arrays(f"down{i}."))
        for i, u in enumerate(self.units):
            out.update(u.named_arrays(f"xfa.{i}."))
        out.update(self.spga.named_arrays("spga."))
        for i, n in enumerate(self.neck):
            out.update(n.named_arrays(f"gcfc3.{i}."))
        return out

    def to_archive(self) -> WeightArchive:
        return WeightArchive(self.named_arrays())


def init_assembly(cfg: AssemblyConfig, rng: np.random.Generator, dtype=np.float64) -> AssemblyParams:
    c2, c3, c4 = cfg.stage_channels
    stem = init_conv(rng, c2, cfg.in_channels, 3, stride=4, padding=1, dtype=dtype)
    downs = [init_conv(rng, c3, c2, 3, stride=2, padding=1, dtype=dtype),
             init_conv(rng, c4, c3, 3, stride=2, padding=1, dtype=dtype)]
    units = [init_xfa_unit(rng, c, cfg.xfa_config(i), dtype) for i, c in enumerate(cfg.stage_channels)]
    spga = init_spga(rng, c4, cfg.spga_dim, cfg.spga_groups, dtype)
    neck = [init_gcfc3(rng, cfg.neck_in if i == 0 else cfg.neck_out, cfg.neck_out, cfg.neck_branches,
                       cfg.neck_transform if i == 0 else None, dtype)
            for i in range(cfg.neck_depth)]
    return AssemblyParams(stem, downs, units, spga, neck)


def fuse_assembly(p: AssemblyParams) -> AssemblyParams:
    """Copy of ``p`` with every GCFC3 replaced by its deploy form."""
    neck = [n if isinstance(n, FusedGCFC3) else fuse_branches(n) for n in p.neck]
    return AssemblyParams(p.stem, p.downs, p.units, p.spga, neck)


def load_assembly(cfg: AssemblyConfig, weights: Union[WeightArchive, dict], fused: bool = False,
                  dtype=None) -> AssemblyParams:
    """Build params for ``cfg`` and fill them from ``weights``; names must match exactly.

    ``dtype`` defaults to the dtype of the first archived tensor.
    """
    names = list(weights)
    if dtype is None:
        dtype = np.asarray(weights[names[0]]).dtype if names else np.float64
    skeleton = init_assembly(cfg, np.random.default_rng(0), dtype)
    if fused:
        skeleton = fuse_assembly(skeleton)
    slots = skeleton.named_arrays()
    missing = [n for n in slots if n not in weights]
    if missing:
        raise KeyError(f"missing tensor {missing[0]!r} ({len(missing)} missing in total)")
    extra = sorted(set(names) - set(slots))
    if extra:
        raise KeyError(f"unexpected tensor {extra[0]!r} for this config ({len(extra)} extra)")
    for name, slot in slots.items():
        src = np.asarray(weights[name])
        if src.shape != slot.shape:
            raise ShapeError(f"tensor {name!r}: archive shape {src.shape}, config expects {slot.shape}")
        slot[...] = src
    return skeleton


def assembly_forward(img: np.ndarray, cfg: AssemblyConfig, params: AssemblyParams,
                     return_trace: bool = False):
    """Returns ``(P3, P4)``, plus the SPGA trace when ``return_trace``."""
    check_tensor4(img, "img")
    n, c, h, w = img.shape
    if c != cfg.in_channels or h % 16 or w % 16:
        raise ShapeError(f"image {img.shape} incompatible with config "
                         f"({cfg.in_channels} channels, sides divisible by 16)")
    s = silu(conv2d(img, params.stem))
    s = xfa_unit_forward(s, params.units[0], cfg.xfa_config(0))
    s3 = silu(conv2d(s, params.downs[0]))
    s3 = xfa_unit_forward(s3, params.units[1], cfg.xfa_config(1))
    s4 = silu(conv2d(s3, params.downs[1]))
    s4 = xfa_unit_forward(s4, params.units[2], cfg.xfa_config(2))
    p4, trace = spga_forward(s4, params.spga, return_trace=True)
    p3 = channel_concat([s3, upsample_nearest2x(p4)])
    for block in params.neck:
        if isinstance(block, FusedGCFC3):
            p3 = gcfc3_forward_deploy(p3, block)
        else:
            p3 = gcfc3_forward_train(p3, block)
    return (p3, p4, trace) if return_trace else (p3, p4)


def count_flops(cfg: AssemblyConfig, fused: bool = False) -> FlopReport:
    """Per-layer FLOPs for one image at the configured resolution."""
    p = init_assembly(cfg, np.random.default_rng(0))
    if fused:
        p = fuse_assembly(p)
    return assembly_flops(p, cfg.height, cfg.width)


def assembly_flops(p: AssemblyParams, height: int, width: int) -> FlopReport:
    r = FlopReport()
    h, w = height, width
    r.add("stem", conv_flops(p.stem, h, w))
    h, w = conv_out_hw(p.stem, h, w)
    r.extend(xfa_unit_flops(p.units[0], h, w, "xfa.0."))
    for i, down in enumerate(p.downs):
        r.add(f"down{i}", conv_flops(down, h, w))
        h, w = conv_out_hw(down, h, w)
        r.extend(xfa_unit_flops(p.units[i + 1], h, w, f"xfa.{i + 1}."))
    r.extend(spga_flops(p.spga, h, w, "spga."))
    for i, block in enumerate(p.neck):
        r.extend(gcfc3_flops(block, 2 * h, 2 * w, f"gcfc3.{i}."))
    return r
