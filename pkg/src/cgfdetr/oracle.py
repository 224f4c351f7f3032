"""Reference implementations used to cross-check the fast kernels.

Nothing in this module imports from :mod:`cgfdetr.tensor`; the loops here are
written out longhand so that a bug in the vectorized path cannot be mirrored.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Optional

import numpy as np


def conv2d_naive(x, weight, bias=None, stride: int = 1, padding: int = 0, groups: int = 1):
    """Seven nested loops over (n, c_out, y, x, c_in, ky, kx).

    Accepts either raw arrays or a params object exposing ``weight``, ``bias``,
    ``stride``, ``padding`` and ``groups``.
    """
    if hasattr(weight, "weight"):
        p = weight
        weight, bias, stride, padding, groups = p.weight, p.bias, p.stride, p.padding, p.groups
    x = np.asarray(x)
    weight = np.asarray(weight)
    n, c_in, h, w = x.shape
    c_out, cig, kh, kw = weight.shape
    if stride < 1 or groups < 1:
        raise ValueError("stride and groups must be >= 1")
    if cig * groups != c_in or c_out % groups:
        raise ValueError(f"input {x.shape} incompatible with kernel {weight.shape}, groups={groups}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError("output would be empty")
    cog = c_out // groups
    xl = x.tolist()
    wl = weight.tolist()
    out = np.zeros((n, c_out, ho, wo), dtype=np.float64)
    for b in range(n):
        for o in range(c_out):
            g = o // cog
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0 if bias is None else float(bias[o])
                    for ci in range(cig):
                        plane = xl[b][g * cig + ci]
                        kern = wl[o][ci]
                        for ky in range(kh):
                            iy = oy * stride + ky - padding
                            if iy < 0 or iy >= h:
                                continue
                            for kx in range(kw):
                                ix = ox * stride + kx - padding
                                if 0 <= ix < w:
                                    acc += plane[iy][ix] * kern[ky][kx]
                    out[b, o, oy, ox] = acc
    return out.astype(np.result_type(x.dtype, weight.dtype))


def dense_attention_naive(q, k, v, scale: float):
    """softmax(q k^T * scale) v with every sum accumulated exactly via ``math.fsum``.

    ``q``: (N, d), ``k``: (N, d), ``v``: (N, d_v); returns (N, d_v) float64.
    """
    q, k, v = (np.asarray(a, dtype=np.float64).tolist() for a in (q, k, v))
    n = len(q)
    if len(k) != n or len(v) != n:
        raise ValueError("token counts differ")
    dv = len(v[0])
    out = np.zeros((n, dv))
    for a in range(n):
        logits = [math.fsum(qi * ki for qi, ki in zip(q[a], k[b])) * scale for b in range(n)]
        top = max(logits)
        weights = [math.exp(z - top) for z in logits]
        total = math.fsum(weights)
        for c in range(dv):
            out[a, c] = math.fsum(weights[b] * v[b][c] for b in range(n)) / total
    return out


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradReport:
    param_name: str
    max_rel_err: float
    max_abs_err: float
    worst_index: tuple
    passed: bool

    def line(self) -> str:
        return (f"param={self.param_name} max_rel_err={self.max_rel_err:.3e} "
                f"max_abs_err={self.max_abs_err:.3e} worst_index={','.join(map(str, self.worst_index))} "
                f"passed={str(self.passed).lower()}")


def grad_check(forward: Callable[[np.ndarray], np.ndarray],
               backward: Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, Mapping[str, np.ndarray]]],
               params: Mapping[str, np.ndarray], x: np.ndarray, *, seed: int = 0, h: float = 1e-5,
               tol: float = 1e-4, abs_floor: float = 1e-7, max_elements: Optional[int] = None,
               check_input: bool = True) -> list[GradReport]:
    """Compare analytic gradients of ``sum(forward(x))`` with central differences.

    ``params`` maps names to the arrays ``forward`` reads; they are perturbed in
    place and restored. ``backward(x, grad_y)`` returns ``(grad_x, grads)`` with
    ``grads`` keyed like ``params``. With ``max_elements`` set, each tensor is
    checked on a seeded random subset of its entries. ``max_rel_err`` is taken
    over entries whose absolute error exceeds ``abs_floor``.
    """
    if x.dtype != np.float64 or any(a.dtype != np.float64 for a in params.values()):
        raise TypeError("grad_check requires float64 inputs and parameters")
    rng = np.random.default_rng(seed)
    y = forward(x)
    grad_x, grads = backward(x, np.ones_like(y))

    def loss(name: str) -> float:
        val = float(np.sum(forward(x)))
        if not math.isfinite(val):
            raise FloatingPointError(f"non-finite loss while perturbing {name}")
        return val

    targets = [(name, arr, grads.get(name)) for name, arr in params.items()]
    if check_input:
        targets.append(("input", x, grad_x))
    reports = []
    for name, arr, analytic in targets:
        if analytic is None:
            raise KeyError(f"backward produced no gradient for {name}")
        if not arr.flags.c_contiguous:
            raise ValueError(f"{name}: array must be C-contiguous so it can be perturbed in place")
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        ana_flat = np.asarray(analytic).reshape(-1)
        worst_rel, worst_abs, worst_i = 0.0, 0.0, int(idx[0]) if idx.size else 0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = loss(name)
            flat[i] = orig - h
            down = loss(name)
            flat[i] = orig
            num = (up - down) / (2 * h)
            ana = float(ana_flat[i])
            abs_err = abs(ana - num)
            # relative error is only meaningful above the absolute floor
            rel_err = abs_err / max(abs(ana), abs(num), 1e-8) if abs_err > abs_floor else 0.0
            if rel_err > worst_rel or (worst_rel == 0.0 and abs_err > worst_abs):
                worst_i = int(i)
            worst_rel = max(worst_rel, rel_err)
            worst_abs = max(worst_abs, abs_err)
        ok = worst_rel <= tol or worst_abs <= abs_floor
        reports.append(GradReport(name, worst_rel, worst_abs,
                                  tuple(int(v) for v in np.unravel_index(worst_i, arr.shape)), ok))
    return reports
