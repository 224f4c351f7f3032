"""Dense NCHW kernels shared by every block.

Tensors are plain ``numpy.ndarray`` values of rank 4 (batch, channels,
height, width) in float32 or float64. Every function here is pure: inputs
are never written to. Backward helpers take the forward inputs plus the
upstream gradient and return gradients for each differentiable argument.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Raised when tensor or parameter dimensions are inconsistent."""


def check_tensor4(x: np.ndarray, name: str = "x") -> np.ndarray:
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        shape = getattr(x, "shape", None)
        raise ShapeError(f"{name}: expected rank-4 NCHW array, got shape {shape}")
    if x.dtype.type not in FLOAT_DTYPES:
        raise ShapeError(f"{name}: dtype must be float32 or float64, got {x.dtype}")
    return x


@dataclass
class ConvParams:
    """Kernel ``(c_out, c_in // groups, k_h, k_w)`` plus optional bias."""

    weight: np.ndarray
    bias: Optional[np.ndarray] = None
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ShapeError(f"conv weight must be rank 4, got shape {self.weight.shape}")
        if self.stride < 1:
            raise ShapeError(f"stride must be >= 1, got {self.stride}")
        if self.groups < 1:
            raise ShapeError(f"groups must be >= 1, got {self.groups}")
        if self.padding < 0:
            raise ShapeError(f"padding must be >= 0, got {self.padding}")
        if self.weight.shape[0] % self.groups:
            raise ShapeError(
                f"c_out={self.weight.shape[0]} not divisible by groups={self.groups}")
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match c_out={self.weight.shape[0]}")

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]

    def named_arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {prefix + "weight": self.weight}
        if self.bias is not None:
            out[prefix + "bias"] = self.bias
        return out

    def copy(self) -> "ConvParams":
        return ConvParams(self.weight.copy(), None if self.bias is None else self.bias.copy(),
                          self.stride, self.padding, self.groups)


@dataclass
class BNParams:
    """Frozen batch-norm statistics and affine terms, one entry per channel."""

    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        c = self.gamma.shape
        for field in ("beta", "mean", "var"):
            if getattr(self, field).shape != c:
                raise ShapeError(f"BN {field} shape {getattr(self, field).shape} != gamma shape {c}")
        if self.eps <= 0:
            raise ValueError(f"BN eps must be positive, got {self.eps}")
        if np.any(self.var < 0):
            raise ValueError("BN running_var must be non-negative")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def named_arrays(self, prefix: str = "", trainable_only: bool = False) -> dict[str, np.ndarray]:
        out = {prefix + "gamma": self.gamma, prefix + "beta": self.beta}
        if not trainable_only:
            out[prefix + "mean"] = self.mean
            out[prefix + "var"] = self.var
        return out

    def copy(self) -> "BNParams":
        return BNParams(self.gamma.copy(), self.beta.copy(), self.mean.copy(),
                        self.var.copy(), self.eps)

    @classmethod
    def identity(cls, channels: int, eps: float = 1e-5, dtype=np.float64) -> "BNParams":
        return cls(np.ones(channels, dtype), np.zeros(channels, dtype),
                   np.zeros(channels, dtype), np.full(channels, 1.0 - eps, dtype), eps)


# ---------------------------------------------------------------------------
# convolution


def _conv_geometry(x: np.ndarray, p: ConvParams) -> tuple[int, int]:
    check_tensor4(x)
    n, c, h, w = x.shape
    if c != p.c_in:
        raise ShapeError(
            f"conv2d: input has {c} channels but kernel {tuple(p.weight.shape)} with "
            f"groups={p.groups} expects c_in={p.c_in} (input shape {x.shape})")
    kh, kw = p.kernel_size
    ho = (h + 2 * p.padding - kh) // p.stride + 1
    wo = (w + 2 * p.padding - kw) // p.stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d: input {h}x{w} with pad={p.padding} too small for kernel {kh}x{kw}")
    return ho, wo


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _tap(xp: np.ndarray, i: int, j: int, s: int, ho: int, wo: int) -> np.ndarray:
    return xp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]


def _is_depthwise(p: ConvParams) -> bool:
    return p.groups > 1 and p.weight.shape[1] == 1 and p.c_out == p.groups


def _tap_weights(weight: np.ndarray, groups: int) -> np.ndarray:
    # (c_out, cig, kh, kw) -> (kh, kw, groups, c_out // groups, cig)
    c_out, cig, kh, kw = weight.shape
    return np.ascontiguousarray(weight.reshape(groups, c_out // groups, cig, kh, kw).transpose(3, 4, 0, 1, 2))


def conv2d(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Zero-padded cross-correlation, accumulated one kernel tap at a time."""
    ho, wo = _conv_geometry(x, p)
    n = x.shape[0]
    kh, kw = p.kernel_size
    s, g = p.stride, p.groups
    xp = _pad(x, p.padding)
    dtype = np.result_type(x, p.weight)
    if _is_depthwise(p):
        out = np.zeros((n, p.c_out, ho, wo), dtype)
        for i in range(kh):
            for j in range(kw):
                out += _tap(xp, i, j, s, ho, wo) * p.weight[None, :, 0, i, j, None, None]
    else:
        cig, cog = p.weight.shape[1], p.c_out // g
        # contiguous per-tap matrices; strided operands make matmul skip BLAS
        taps = _tap_weights(p.weight, g)
        out = np.zeros((n, g, cog, ho * wo), dtype)
        for i in range(kh):
            for j in range(kw):
                xs = _tap(xp, i, j, s, ho, wo).reshape(n, g, cig, ho * wo)
                out += taps[i, j] @ xs
        out = out.reshape(n, p.c_out, ho, wo)
    if p.bias is not None:
        out += p.bias[None, :, None, None]
    return out


def conv2d_backward(x: np.ndarray, p: ConvParams, grad_out: np.ndarray
                    ) -> tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """Return ``(grad_x, grad_weight, grad_bias)``; grad_bias is None without bias."""
    ho, wo = _conv_geometry(x, p)
    n, _, h, w = x.shape
    kh, kw = p.kernel_size
    s, g, pad = p.stride, p.groups, p.padding
    xp = _pad(x, pad)
    gxp = np.zeros(xp.shape, np.result_type(x, grad_out))
    gw = np.zeros(p.weight.shape, np.result_type(p.weight, grad_out))
    if _is_depthwise(p):
        for i in range(kh):
            for j in range(kw):
                sl = (slice(None), slice(None),
                      slice(i, i + s * (ho - 1) + 1, s), slice(j, j + s * (wo - 1) + 1, s))
                gw[:, 0, i, j] = np.einsum("nchw,nchw->c", grad_out, xp[sl])
                gxp[sl] += grad_out * p.weight[None, :, 0, i, j, None, None]
    else:
        cig, cog = p.weight.shape[1], p.c_out // g
        taps_t = np.ascontiguousarray(np.swapaxes(_tap_weights(p.weight, g), -1, -2))
        gy = np.ascontiguousarray(grad_out).reshape(n, g, cog, ho * wo)
        gwg = gw.reshape(g, cog, cig, kh, kw)
        for i in range(kh):
            for j in range(kw):
                sl = (slice(None), slice(None),
                      slice(i, i + s * (ho - 1) + 1, s), slice(j, j + s * (wo - 1) + 1, s))
                xs = xp[sl].reshape(n, g, cig, ho * wo)
                gwg[:, :, :, i, j] = (gy @ xs.transpose(0, 1, 3, 2)).sum(axis=0)
                gxs = taps_t[i, j] @ gy
                gxp[sl] += gxs.reshape(n, g * cig, ho, wo)
    gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
    gb = grad_out.sum(axis=(0, 2, 3)) if p.bias is not None else None
    return np.ascontiguousarray(gx), gw, gb


def depthwise_conv2d(x: np.ndarray, p: ConvParams) -> np.ndarray:
    check_tensor4(x)
    c = x.shape[1]
    if not (p.groups == c == p.c_out) or p.weight.shape[1] != 1:
        raise ShapeError(
            f"depthwise_conv2d: need groups == c_in == c_out == {c}, got groups={p.groups}, "
            f"kernel {tuple(p.weight.shape)}")
    if p.kernel_size != (3, 3):
        raise ShapeError(f"depthwise_conv2d: kernel must be 3x3, got {p.kernel_size}")
    return conv2d(x, p)


# ---------------------------------------------------------------------------
# normalization


def batchnorm_infer(x: np.ndarray, p: BNParams) -> np.ndarray:
    check_tensor4(x)
    if p.channels != x.shape[1]:
        raise ShapeError(f"batchnorm: {p.channels} statistics for {x.shape[1]} channels")
    inv = p.gamma / np.sqrt(p.var + p.eps)
    return (x - p.mean[None, :, None, None]) * inv[None, :, None, None] + p.beta[None, :, None, None]


def batchnorm_backward(x: np.ndarray, p: BNParams, grad_out: np.ndarray
                       ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients ``(grad_x, grad_gamma, grad_beta)`` with statistics held fixed."""
    std = np.sqrt(p.var + p.eps)
    xhat = (x - p.mean[None, :, None, None]) / std[None, :, None, None]
    gx = grad_out * (p.gamma / std)[None, :, None, None]
    return gx, (grad_out * xhat).sum(axis=(0, 2, 3)), grad_out.sum(axis=(0, 2, 3))


def group_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, num_groups: int,
               eps: float = 1e-5) -> np.ndarray:
    check_tensor4(x)
    n, c, h, w = x.shape
    if c % num_groups or gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm: {c} channels, {num_groups} groups, "
                         f"gamma {gamma.shape}, beta {beta.shape}")
    xg = x.reshape(n, num_groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    xhat = ((xg - mu) / np.sqrt(var + eps)).reshape(x.shape)
    return xhat * gamma[None, :, None, None] + beta[None, :, None, None]


def group_norm_backward(x: np.ndarray, gamma: np.ndarray, num_groups: int, grad_out: np.ndarray,
                        eps: float = 1e-5) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n, c, h, w = x.shape
    xg = x.reshape(n, num_groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    rstd = 1.0 / np.sqrt(xg.var(axis=2, keepdims=True) + eps)
    xhat = (xg - mu) * rstd
    ggamma = (grad_out * xhat.reshape(x.shape)).sum(axis=(0, 2, 3))
    gbeta = grad_out.sum(axis=(0, 2, 3))
    gxhat = (grad_out * gamma[None, :, None, None]).reshape(n, num_groups, -1)
    gx = rstd * (gxhat - gxhat.mean(axis=2, keepdims=True)
                 - xhat * (gxhat * xhat).mean(axis=2, keepdims=True))
    return gx.reshape(x.shape), ggamma, gbeta


# ---------------------------------------------------------------------------
# activations


def sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(x)


def sigmoid_backward(y: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Takes the sigmoid *output* ``y``."""
    return grad_out * y * (1.0 - y)


def silu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    s = sigmoid(x)
    return grad_out * (s * (1.0 + x * (1.0 - s)))


# ---------------------------------------------------------------------------
# attention helpers (2-D matrices)


def softmax_masked_rows(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row softmax over ``mask == True`` entries; masked entries are exactly 0."""
    if logits.shape != mask.shape or logits.ndim < 2:
        raise ShapeError(f"softmax: logits {logits.shape} vs mask {mask.shape}")
    if not np.all(mask.any(axis=-1)):
        raise ValueError("softmax_masked_rows: every row needs at least one unmasked entry")
    z = np.where(mask, logits, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_backward(alpha: np.ndarray, grad_alpha: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. logits; zero wherever ``alpha`` is zero (masked)."""
    return alpha * (grad_alpha - (grad_alpha * alpha).sum(axis=-1, keepdims=True))


def top_k_indices(row: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries, ties resolved toward the lower index."""
    row = np.asarray(row)
    n = row.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"top_k_indices: k={k} outside [1, {n}]")
    # stable sort of the negation keeps equal values in index order
    return np.sort(np.argsort(-row, kind="stable")[:k])


def top_k_mask(logits: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask keeping the top-``k`` entries of every row of a 2-D matrix."""
    n = logits.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"top_k_mask: k={k} outside [1, {n}]")
    idx = np.argsort(-logits, axis=-1, kind="stable")[..., :k]
    mask = np.zeros(logits.shape, dtype=bool)
    np.put_along_axis(mask, idx, True, axis=-1)
    return mask


# ---------------------------------------------------------------------------
# pooling, resampling, channel plumbing


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    check_tensor4(x)
    return x.mean(axis=(2, 3), keepdims=True)


def global_avg_pool_backward(x_shape: Sequence[int], grad_out: np.ndarray) -> np.ndarray:
    h, w = x_shape[2], x_shape[3]
    return np.broadcast_to(grad_out / (h * w), tuple(x_shape)).copy()


def upsample_nearest2x(x: np.ndarray) -> np.ndarray:
    check_tensor4(x)
    return x.repeat(2, axis=2).repeat(2, axis=3)


def channel_split(x: np.ndarray, sizes: Sequence[int]) -> list[np.ndarray]:
    check_tensor4(x)
    if any(s < 1 for s in sizes) or sum(sizes) != x.shape[1]:
        raise ShapeError(f"channel_split: sizes {list(sizes)} do not partition {x.shape[1]} channels")
    bounds = np.cumsum(sizes)[:-1]
    return [np.ascontiguousarray(part) for part in np.split(x, bounds, axis=1)]


def channel_concat(xs: Sequence[np.ndarray]) -> np.ndarray:
    if not xs:
        raise ShapeError("channel_concat: empty input list")
    ref = xs[0].shape
    for t in xs:
        check_tensor4(t)
        if (t.shape[0], t.shape[2], t.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError(f"channel_concat: shape {t.shape} incompatible with {ref}")
    return np.concatenate(xs, axis=1)


# ---------------------------------------------------------------------------
# initialization


def init_conv(rng: np.random.Generator, c_out: int, c_in: int, k: int = 1, *, stride: int = 1,
              padding: Optional[int] = None, groups: int = 1, bias: bool = True,
              dtype=np.float64) -> ConvParams:
    """Fan-in scaled uniform kernel (unit variance after scaling), zero bias."""
    fan_in = (c_in // groups) * k * k
    lim = np.sqrt(3.0 / fan_in)
    w = rng.uniform(-lim, lim, size=(c_out, c_in // groups, k, k)).astype(dtype)
    b = np.zeros(c_out, dtype) if bias else None
    return ConvParams(w, b, stride, k // 2 if padding is None else padding, groups)
