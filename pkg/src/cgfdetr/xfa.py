"""Convolutional-attention residual blocks and their CSP container.

A block is ``x' = x + DropPath(ConvAttention(x))`` followed by
``x'' = x' + DropPath(FFN(x'))``. The unit widens the input with a 1x1 stem,
splits it in two, chains blocks on the second half and merges every
intermediate map with a final 1x1 convolution.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .tensor import (ConvParams, ShapeError, channel_concat, channel_split, check_tensor4,
                     conv2d, conv2d_backward, depthwise_conv2d, init_conv, sigmoid,
                     sigmoid_backward, silu, silu_backward)


@dataclass
class XFAConfig:
    channels: int
    heads: int = 4
    ffn_ratio: float = 2.0
    drop_path_rate: float = 0.0
    n_blocks: int = 1
    csp_hidden: Optional[int] = None

    def __post_init__(self):
        if self.csp_hidden is None:
            self.csp_hidden = max(1, self.channels // 2)
        if self.heads < 1 or self.channels % self.heads:
            raise ShapeError(f"channels={self.channels} not divisible by heads={self.heads}")
        if self.n_blocks < 1 or self.csp_hidden < 1:
            raise ValueError("n_blocks and csp_hidden must be >= 1")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ValueError(f"drop_path_rate must lie in [0, 1), got {self.drop_path_rate}")
        if self.ffn_ratio <= 0:
            raise ValueError("ffn_ratio must be positive")

    @property
    def hidden(self) -> int:
        return max(1, int(round(self.channels * self.ffn_ratio)))

    def block_config(self) -> "XFAConfig":
        """Config of the blocks inside a unit, which run at ``csp_hidden`` width."""
        return replace(self, channels=self.csp_hidden, n_blocks=1, csp_hidden=None)


@dataclass
class XFABlockParams:
    attn_dw: ConvParams
    attn_v: ConvParams
    attn_out: ConvParams
    ffn_in: ConvParams
    ffn_out: ConvParams

    def named_arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for name in ("attn_dw", "attn_v", "attn_out", "ffn_in", "ffn_out"):
            out.update(getattr(self, name).named_arrays(f"{prefix}{name}."))
        return out


@dataclass
class XFAUnitParams:
    stem: ConvParams
    blocks: list[XFABlockParams] = field(default_factory=list)
    merge: Optional[ConvParams] = None

    def named_arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = self.stem.named_arrays(prefix + "stem.")
        for i, blk in enumerate(self.blocks):
            out.update(blk.named_arrays(f"{prefix}block{i}."))
        out.update(self.merge.named_arrays(prefix + "merge."))
        return out


def init_xfa_block(rng: np.random.Generator, cfg: XFAConfig, dtype=np.float64) -> XFABlockParams:
    c, hid = cfg.channels, cfg.hidden
    return XFABlockParams(
        attn_dw=init_conv(rng, c, c, 3, groups=c, dtype=dtype),
        attn_v=init_conv(rng, c, c, 1, dtype=dtype),
        attn_out=init_conv(rng, c, c, 1, dtype=dtype),
        ffn_in=init_conv(rng, hid, c, 1, dtype=dtype),
        ffn_out=init_conv(rng, c, hid, 1, dtype=dtype),
    )


def init_xfa_unit(rng: np.random.Generator, c_in: int, cfg: XFAConfig, dtype=np.float64) -> XFAUnitParams:
    hid = cfg.csp_hidden
    bcfg = cfg.block_config()
    return XFAUnitParams(
        stem=init_conv(rng, 2 * hid, c_in, 1, dtype=dtype),
        blocks=[init_xfa_block(rng, bcfg, dtype) for _ in range(cfg.n_blocks)],
        merge=init_conv(rng, cfg.channels, (2 + cfg.n_blocks) * hid, 1, dtype=dtype),
    )


# ---------------------------------------------------------------------------
# ConvAttention


def _conv_attention(x, p: XFABlockParams, heads: int):
    check_tensor4(x)
    n, c, h, w = x.shape
    if c % heads:
        raise ShapeError(f"conv_attention: {c} channels not divisible by {heads} heads")
    if p.attn_dw.c_out != c:
        raise ShapeError(f"conv_attention: input has {c} channels, block built for {p.attn_dw.c_out}")
    logits = depthwise_conv2d(x, p.attn_dw)
    # one spatial gate per head: mean of that head's depthwise responses
    gate = sigmoid(logits.reshape(n, heads, c // heads, h, w).mean(axis=2))
    v = conv2d(x, p.attn_v)
    gv = (v.reshape(n, heads, c // heads, h, w) * gate[:, :, None]).reshape(n, c, h, w)
    out = conv2d(gv, p.attn_out)
    return out, (x, heads, gate, v, gv)


def conv_attention(x: np.ndarray, p: XFABlockParams, cfg: XFAConfig) -> np.ndarray:
    if x.ndim == 4 and x.shape[1] != cfg.channels:
        raise ShapeError(f"conv_attention: x has {x.shape[1]} channels, config says {cfg.channels}")
    return _conv_attention(x, p, cfg.heads)[0]


def _conv_attention_backward(cache, p: XFABlockParams, gy):
    x, heads, gate, v, gv = cache
    n, c, h, w = x.shape
    ggv, gw_out, gb_out = conv2d_backward(gv, p.attn_out, gy)
    ggv5 = ggv.reshape(n, heads, c // heads, h, w)
    gv_ = (ggv5 * gate[:, :, None]).reshape(x.shape)
    ggate = (ggv5 * v.reshape(n, heads, c // heads, h, w)).sum(axis=2)
    glogit_head = sigmoid_backward(gate, ggate) / (c // heads)
    glogits = np.broadcast_to(glogit_head[:, :, None], (n, heads, c // heads, h, w)).reshape(x.shape)
    gx1, gw_dw, gb_dw = conv2d_backward(x, p.attn_dw, glogits)
    gx2, gw_v, gb_v = conv2d_backward(x, p.attn_v, gv_)
    grads = {}
    for name, gw_, gb_ in (("attn_dw", gw_dw, gb_dw), ("attn_v", gw_v, gb_v),
                           ("attn_out", gw_out, gb_out)):
        grads[f"{name}.weight"] = gw_
        if gb_ is not None:
            grads[f"{name}.bias"] = gb_
    return gx1 + gx2, grads


# ---------------------------------------------------------------------------
# XFABlock


def _drop_path_scale(n: int, rate: float, training: bool, rng, dtype):
    if not training or rate == 0.0:
        return None
    rng = rng if rng is not None else np.random.default_rng()
    keep = (rng.random(n) >= rate).astype(dtype)
    return (keep / (1.0 - rate))[:, None, None, None]


def _xfa_block(x, p: XFABlockParams, cfg: XFAConfig, training: bool = False, rng=None):
    ca, ca_cache = _conv_attention(x, p, cfg.heads)
    m1 = _drop_path_scale(x.shape[0], cfg.drop_path_rate, training, rng, x.dtype)
    m2 = _drop_path_scale(x.shape[0], cfg.drop_path_rate, training, rng, x.dtype)
    x1 = x + (ca if m1 is None else ca * m1)
    hid = conv2d(x1, p.ffn_in)
    f = conv2d(silu(hid), p.ffn_out)
    out = x1 + (f if m2 is None else f * m2)
    return out, (ca_cache, m1, m2, x1, hid)


def xfa_block_forward(x: np.ndarray, p: XFABlockParams, cfg: XFAConfig, training: bool = False,
                      rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """One residual attention + FFN block; DropPath is active only when ``training``."""
    if x.ndim == 4 and x.shape[1] != cfg.channels:
        raise ShapeError(f"xfa_block_forward: x has {x.shape[1]} channels, config says {cfg.channels}")
    return _xfa_block(x, p, cfg, training, rng)[0]


def _xfa_block_backward(cache, p: XFABlockParams, gy):
    ca_cache, m1, m2, x1, hid = cache
    gf = gy if m2 is None else gy * m2
    ga, gw, gb = conv2d_backward(silu(hid), p.ffn_out, gf)
    grads = {"ffn_out.weight": gw}
    if gb is not None:
        grads["ffn_out.bias"] = gb
    gx1_ffn, gw, gb = conv2d_backward(x1, p.ffn_in, silu_backward(hid, ga))
    grads["ffn_in.weight"] = gw
    if gb is not None:
        grads["ffn_in.bias"] = gb
    gx1 = gy + gx1_ffn
    gca = gx1 if m1 is None else gx1 * m1
    gx_ca, ca_grads = _conv_attention_backward(ca_cache, p, gca)
    grads.update(ca_grads)
    return gx1 + gx_ca, grads


def xfa_block_backward(x: np.ndarray, p: XFABlockParams, cfg: XFAConfig, grad_out: np.ndarray
                       ) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Gradients of the inference-mode block (no DropPath) w.r.t. input and parameters."""
    _, cache = _xfa_block(x, p, cfg)
    return _xfa_block_backward(cache, p, grad_out)


# ---------------------------------------------------------------------------
# XFAUnit


def _xfa_unit(x, p: XFAUnitParams, cfg: XFAConfig, training: bool = False, rng=None):
    check_tensor4(x)
    if x.shape[1] != p.stem.c_in:
        raise ShapeError(f"xfa_unit_forward: x has {x.shape[1]} channels, stem expects {p.stem.c_in}")
    if len(p.blocks) != cfg.n_blocks:
        raise ShapeError(f"xfa_unit_forward: {len(p.blocks)} blocks, config says {cfg.n_blocks}")
    bcfg = cfg.block_config()
    s = conv2d(x, p.stem)
    ys = channel_split(s, [cfg.csp_hidden, cfg.csp_hidden])
    caches = []
    for blk in p.blocks:
        y, cache = _xfa_block(ys[-1], blk, bcfg, training, rng)
        ys.append(y)
        caches.append(cache)
    cat = channel_concat(ys)
    return conv2d(cat, p.merge), (x, cat, caches)


def xfa_unit_forward(x: np.ndarray, p: XFAUnitParams, cfg: XFAConfig, training: bool = False,
                     rng: Optional[np.random.Generator] = None) -> np.ndarray:
    return _xfa_unit(x, p, cfg, training, rng)[0]


def xfa_unit_backward(x: np.ndarray, p: XFAUnitParams, cfg: XFAConfig, grad_out: np.ndarray
                      ) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    _, (x, cat, caches) = _xfa_unit(x, p, cfg)
    hid = cfg.csp_hidden
    gcat, gw, gb = conv2d_backward(cat, p.merge, grad_out)
    grads = {"merge.weight": gw}
    if gb is not None:
        grads["merge.bias"] = gb
    gys = channel_split(gcat, [hid] * (2 + len(p.blocks)))
    g = gys[-1]
    for i in reversed(range(len(p.blocks))):
        gin, bgrads = _xfa_block_backward(caches[i], p.blocks[i], g)
        grads.update({f"block{i}.{k}": v for k, v in bgrads.items()})
        g = gys[i + 1] + gin
    gx, gw, gb = conv2d_backward(x, p.stem, channel_concat([gys[0], g]))
    grads["stem.weight"] = gw
    if gb is not None:
        grads["stem.bias"] = gb
    return gx, grads
