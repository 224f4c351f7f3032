"""Split-path gated attention.

The input is split into a narrow quarter that goes through group norm and a
single-head self-attention whose per-query support is limited to the top-k
keys, and a wide three-quarter bypass. ``k`` is set per batch item from a
sigmoid gate over the globally pooled input. Both halves are concatenated
and projected by a 1x1 convolution followed by SiLU.

Backward treats ``k`` as a constant: floor and top-k selection have no
useful derivative, so ``gate_proj`` always receives a zero gradient.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .tensor import (ConvParams, ShapeError, channel_concat, channel_split, check_tensor4,
                     conv2d, conv2d_backward, global_avg_pool, group_norm, group_norm_backward,
                     init_conv, sigmoid, silu, silu_backward, softmax_masked_rows,
                     softmax_rows_backward, top_k_mask)


@dataclass
class SPGAParams:
    gn_gamma: np.ndarray
    gn_beta: np.ndarray
    q_proj: ConvParams
    k_proj: ConvParams
    v_proj: ConvParams
    gate_proj: ConvParams
    out_proj: ConvParams
    num_groups: int = 1
    gn_eps: float = 1e-5

    def __post_init__(self):
        c = self.out_proj.c_out
        if c % 4:
            raise ShapeError(f"SPGA channels must be divisible by 4, got {c}")
        q = c // 4
        if self.gn_gamma.shape != (q,) or self.gn_beta.shape != (q,):
            raise ShapeError(f"group-norm affine must have {q} entries")
        if self.num_groups < 1 or q % self.num_groups:
            raise ShapeError(f"num_groups={self.num_groups} must divide C/4={q}")
        for name in ("q_proj", "k_proj", "v_proj"):
            if getattr(self, name).c_in != q:
                raise ShapeError(f"{name} must read C/4={q} channels")
        if self.q_proj.c_out != self.k_proj.c_out:
            raise ShapeError("q_proj and k_proj must share the projection dim")
        if self.v_proj.c_out != q:
            raise ShapeError(f"v_proj must produce C/4={q} channels to refill the split")
        if self.gate_proj.c_out != 1 or self.gate_proj.c_in != c:
            raise ShapeError(f"gate_proj must map {c} channels to 1")
        if self.out_proj.c_in != c:
            raise ShapeError(f"out_proj must map {c} channels to {c}")

    @property
    def channels(self) -> int:
        return self.out_proj.c_out

    @property
    def dim(self) -> int:
        return self.q_proj.c_out

    def named_arrays(self, prefix: str = "", include_gate: bool = True) -> dict[str, np.ndarray]:
        out = {prefix + "gn.weight": self.gn_gamma, prefix + "gn.bias": self.gn_beta}
        names = ["q_proj", "k_proj", "v_proj"] + (["gate_proj"] if include_gate else []) + ["out_proj"]
        for name in names:
            out.update(getattr(self, name).named_arrays(f"{prefix}{name}."))
        return out


@dataclass
class SPGATrace:
    ratio: np.ndarray
    k: list[int]
    attn_weights: list[np.ndarray] = field(default_factory=list)

    def lines(self, max_rows: Optional[int] = None) -> list[str]:
        out = []
        for b, (r, k) in enumerate(zip(self.ratio, self.k)):
            out.append(f"item={b} ratio={float(r)!r} k={k}")
            if self.attn_weights:
                a = self.attn_weights[b]
                rows = a.shape[0] if max_rows is None else min(max_rows, a.shape[0])
                for row in range(rows):
                    support = ",".join(str(i) for i in np.flatnonzero(a[row]))
                    out.append(f"item={b} row={row} support={support}")
        return out


def init_spga(rng: np.random.Generator, channels: int, dim: Optional[int] = None,
              num_groups: int = 1, dtype=np.float64) -> SPGAParams:
    if channels % 4:
        raise ShapeError(f"SPGA channels must be divisible by 4, got {channels}")
    q = channels // 4
    d = q if dim is None else dim
    return SPGAParams(
        gn_gamma=np.ones(q, dtype), gn_beta=np.zeros(q, dtype),
        q_proj=init_conv(rng, d, q, 1, dtype=dtype),
        k_proj=init_conv(rng, d, q, 1, dtype=dtype),
        v_proj=init_conv(rng, q, q, 1, dtype=dtype),
        gate_proj=init_conv(rng, 1, channels, 1, dtype=dtype),
        out_proj=init_conv(rng, channels, channels, 1, dtype=dtype),
        num_groups=num_groups,
    )


def k_from_ratio(ratio: float, n_tokens: int) -> int:
    """floor(N * ratio) clamped to [1, N]; the lower clamp keeps softmax defined."""
    return max(1, min(n_tokens, int(math.floor(n_tokens * float(ratio)))))


def gate_ratio(x: np.ndarray, p: SPGAParams) -> np.ndarray:
    """Per-item sparsity ratio sigma(G(x)) with G = global pool -> 1x1 conv."""
    check_tensor4(x)
    if x.shape[1] != p.channels:
        raise ShapeError(f"gate_ratio: x has {x.shape[1]} channels, SPGA built for {p.channels}")
    return sigmoid(conv2d(global_avg_pool(x), p.gate_proj)).reshape(x.shape[0])


# ---------------------------------------------------------------------------
# sparse single-head attention


def _per_item_k(k: Union[int, Sequence[int]], n_items: int, n_tokens: int) -> list[int]:
    ks = [int(k)] * n_items if np.isscalar(k) else [int(v) for v in k]
    if len(ks) != n_items:
        raise ValueError(f"got {len(ks)} k values for {n_items} batch items")
    for v in ks:
        if not 1 <= v <= n_tokens:
            raise ValueError(f"k={v} outside [1, N={n_tokens}]")
    return ks


def _tokens(t: np.ndarray) -> np.ndarray:
    # (c, h, w) -> (h*w, c)
    return t.reshape(t.shape[0], -1).T


def _sparse_shsa(xn, p: SPGAParams, ks: list[int]):
    n, q_ch, h, w = xn.shape
    q = conv2d(xn, p.q_proj)
    kk = conv2d(xn, p.k_proj)
    v = conv2d(xn, p.v_proj)
    scale = 1.0 / math.sqrt(p.dim)
    out = np.empty((n, p.v_proj.c_out, h, w), dtype=np.result_type(xn, p.v_proj.weight))
    alphas = []
    for b in range(n):
        Q, K, V = _tokens(q[b]), _tokens(kk[b]), _tokens(v[b])
        scores = Q @ K.T
        alpha = softmax_masked_rows(scores * scale, top_k_mask(scores, ks[b]))
        out[b] = (alpha @ V).T.reshape(-1, h, w)
        alphas.append(alpha)
    return out, (xn, q, kk, v, alphas, scale)


def sparse_shsa(x1_normed: np.ndarray, p: SPGAParams, k: Union[int, Sequence[int]]) -> np.ndarray:
    """Top-k masked single-head attention over the flattened spatial grid."""
    check_tensor4(x1_normed)
    n, c, h, w = x1_normed.shape
    if c != p.channels // 4:
        raise ShapeError(f"sparse_shsa: expected {p.channels // 4} channels, got {c}")
    return _sparse_shsa(x1_normed, p, _per_item_k(k, n, h * w))[0]


def _sparse_shsa_backward(cache, p: SPGAParams, gy):
    xn, q, kk, v, alphas, scale = cache
    n, _, h, w = xn.shape
    gq, gk, gv = np.empty_like(q), np.empty_like(kk), np.empty_like(v)
    glogits = []
    for b in range(n):
        Q, K, V = _tokens(q[b]), _tokens(kk[b]), _tokens(v[b])
        alpha = alphas[b]
        gY = _tokens(gy[b])
        gv[b] = (alpha.T @ gY).T.reshape(-1, h, w)
        gl = softmax_rows_backward(alpha, gY @ V.T)
        glogits.append(gl)
        gs = gl * scale
        gq[b] = (gs @ K).T.reshape(-1, h, w)
        gk[b] = (gs.T @ Q).T.reshape(-1, h, w)
    grads = {}
    gx = np.zeros_like(xn)
    for name, g in (("q_proj", gq), ("k_proj", gk), ("v_proj", gv)):
        gxi, gw, gb = conv2d_backward(xn, getattr(p, name), g)
        gx += gxi
        grads[f"{name}.weight"] = gw
        if gb is not None:
            grads[f"{name}.bias"] = gb
    return gx, grads, glogits, gv


def sparse_shsa_backward(x1_normed: np.ndarray, p: SPGAParams, k: Union[int, Sequence[int]],
                         grad_out: np.ndarray):
    """Returns ``(grad_x, grads, grad_logits, grad_v)``.

    ``grad_logits`` holds one N x N matrix per item; ``grad_v`` is the gradient
    w.r.t. the value projection output, shaped like it.
    """
    n, _, h, w = x1_normed.shape
    _, cache = _sparse_shsa(x1_normed, p, _per_item_k(k, n, h * w))
    return _sparse_shsa_backward(cache, p, grad_out)


# ---------------------------------------------------------------------------
# full block


def _spga(x, p: SPGAParams, k=None):
    check_tensor4(x)
    n, c, h, w = x.shape
    if c % 4:
        raise ShapeError(f"spga_forward: channel count {c} is not divisible by 4")
    if c != p.channels:
        raise ShapeError(f"spga_forward: x has {c} channels, SPGA built for {p.channels}")
    ratio = gate_ratio(x, p)
    ks = [k_from_ratio(r, h * w) for r in ratio] if k is None else _per_item_k(k, n, h * w)
    x1, x2 = channel_split(x, [c // 4, c - c // 4])
    xn = group_norm(x1, p.gn_gamma, p.gn_beta, p.num_groups, p.gn_eps)
    att, att_cache = _sparse_shsa(xn, p, ks)
    cat = channel_concat([att, x2])
    pre = conv2d(cat, p.out_proj)
    trace = SPGATrace(ratio, ks, att_cache[4])
    return silu(pre), (x1, cat, pre, att_cache, trace)


def spga_forward(x: np.ndarray, p: SPGAParams, *, k: Union[None, int, Sequence[int]] = None,
                 return_trace: bool = False):
    """Shape-preserving SPGA. Pass ``k`` to freeze the per-item top-k budget."""
    out, cache = _spga(x, p, k)
    return (out, cache[-1]) if return_trace else out


def spga_backward(x: np.ndarray, p: SPGAParams, grad_out: np.ndarray,
                  *, k: Union[None, int, Sequence[int]] = None) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Gradients with the top-k budget held constant.

    The gate only reaches the output through floor/top-k, so ``gate_proj``
    gets zero gradient and the gate's dependence on ``x`` is not propagated.
    """
    _, (x1, cat, pre, att_cache, trace) = _spga(x, p, k)
    c = x.shape[1]
    gcat, gw, gb = conv2d_backward(cat, p.out_proj, silu_backward(pre, grad_out))
    grads = {"out_proj.weight": gw}
    if gb is not None:
        grads["out_proj.bias"] = gb
    gatt, gx2 = channel_split(gcat, [c // 4, c - c // 4])
    gxn, att_grads, _, _ = _sparse_shsa_backward(att_cache, p, gatt)
    grads.update(att_grads)
    gx1, grads["gn.weight"], grads["gn.bias"] = group_norm_backward(
        x1, p.gn_gamma, p.num_groups, gxn, p.gn_eps)
    grads["gate_proj.weight"] = np.zeros_like(p.gate_proj.weight)
    if p.gate_proj.bias is not None:
        grads["gate_proj.bias"] = np.zeros_like(p.gate_proj.bias)
    return channel_concat([gx1, gx2]), grads
