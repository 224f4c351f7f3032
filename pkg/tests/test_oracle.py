import ast
from pathlib import Path

import numpy as np
import pytest

import cgfdetr.oracle as oracle_mod
from cgfdetr import tensor as T
from cgfdetr.oracle import GradReport, conv2d_naive, dense_attention_naive, grad_check
from cgfdetr.tensor import BNParams, ConvParams


def test_oracle_shares_no_code_with_tensor_core():
    tree = ast.parse(Path(oracle_mod.__file__).read_text())
    imported = set()
    for node in ast.walk(tree):
        if isinstance(node, ast.ImportFrom):
            imported.add(node.module or "")
        elif isinstance(node, ast.Import):
            imported.update(a.name for a in node.names)
    assert not any("tensor" in m or m.startswith("cgfdetr") for m in imported), imported


def test_naive_conv_trivial_examples():
    x = np.ones((1, 1, 3, 3))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1
    np.testing.assert_array_equal(conv2d_naive(x, w, None, 1, 1), x)
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    np.testing.assert_array_equal(conv2d_naive(x, np.full((1, 1, 1, 1), 2.0), np.array([1.0]))[0, 0],
                                  [[3, 5], [7, 9]])


def test_naive_conv_accepts_params_object():
    rng = np.random.default_rng(0)
    p = ConvParams(rng.normal(size=(2, 3, 3, 3)), rng.normal(size=2), stride=2, padding=1)
    x = rng.normal(size=(1, 3, 5, 5))
    np.testing.assert_array_equal(conv2d_naive(x, p), conv2d_naive(x, p.weight, p.bias, 2, 1))


def test_dense_attention_trivial_cases():
    rng = np.random.default_rng(1)
    v = rng.normal(size=(1, 3))
    np.testing.assert_allclose(dense_attention_naive(rng.normal(size=(1, 2)), rng.normal(size=(1, 2)), v, 0.7), v)
    v = rng.normal(size=(5, 3))
    out = dense_attention_naive(np.ones((5, 2)), np.ones((5, 2)), v, 0.5)
    np.testing.assert_allclose(out, np.broadcast_to(v.mean(axis=0), (5, 3)), atol=1e-15)


def _wrap_conv(p):
    return (lambda x: T.conv2d(x, p),
            lambda x, g: (lambda gx, gw, gb: (gx, {"weight": gw, "bias": gb}))(*T.conv2d_backward(x, p, g)))


def test_grad_check_pointwise_conv_tight():
    rng = np.random.default_rng(2)
    p = ConvParams(rng.normal(size=(3, 4, 1, 1)), rng.normal(size=3))
    fwd, bwd = _wrap_conv(p)
    reports = grad_check(fwd, bwd, p.named_arrays(), rng.normal(size=(2, 4, 3, 3)))
    assert [r.param_name for r in reports] == ["weight", "bias", "input"]
    for r in reports:
        assert r.passed and r.max_rel_err <= 1e-6


def test_grad_check_frozen_bn_gamma_closed_form():
    rng = np.random.default_rng(3)
    bn = BNParams(rng.normal(size=3), rng.normal(size=3), rng.normal(size=3), rng.uniform(0.5, 2, 3))
    x = rng.normal(size=(2, 3, 4, 4))

    def bwd(x, g):
        gx, gg, gb = T.batchnorm_backward(x, bn, g)
        return gx, {"gamma": gg, "beta": gb}

    reports = grad_check(lambda x: T.batchnorm_infer(x, bn), bwd, bn.named_arrays(trainable_only=True), x)
    assert all(r.passed and r.max_rel_err <= 1e-6 for r in reports)
    xhat = (x - bn.mean[None, :, None, None]) / np.sqrt(bn.var + bn.eps)[None, :, None, None]
    np.testing.assert_allclose(bwd(x, np.ones_like(x))[1]["gamma"], xhat.sum(axis=(0, 2, 3)), rtol=1e-12)


def test_grad_check_detects_wrong_gradient():
    rng = np.random.default_rng(4)
    p = ConvParams(rng.normal(size=(2, 2, 1, 1)), rng.normal(size=2))
    fwd, bwd = _wrap_conv(p)

    def bad(x, g):
        gx, grads = bwd(x, g)
        grads["weight"] = grads["weight"] * 1.01
        return gx, grads

    reports = {r.param_name: r for r in grad_check(fwd, bad, p.named_arrays(), rng.normal(size=(1, 2, 2, 2)))}
    assert not reports["weight"].passed and reports["bias"].passed


def test_grad_check_restores_params():
    rng = np.random.default_rng(5)
    p = ConvParams(rng.normal(size=(2, 2, 3, 3)), rng.normal(size=2), padding=1)
    before = p.weight.copy()
    grad_check(*_wrap_conv(p), p.named_arrays(), rng.normal(size=(1, 2, 3, 3)))
    np.testing.assert_array_equal(p.weight, before)


def test_grad_check_rejects_f32_and_non_finite():
    p = ConvParams(np.ones((1, 1, 1, 1), np.float32))
    with pytest.raises(TypeError):
        grad_check(*_wrap_conv(p), p.named_arrays(), np.ones((1, 1, 1, 1), np.float32))
    w = np.ones((1, 1, 1, 1))

    def fwd(x):
        return np.exp(w * 1e3) * x

    with pytest.raises(FloatingPointError, match="weight"):
        with np.errstate(over="ignore"):
            grad_check(fwd, lambda x, g: (g, {"weight": g}), {"weight": w}, np.ones((1, 1, 1, 1)))


def test_grad_check_subsampling_is_seeded():
    rng = np.random.default_rng(6)
    p = ConvParams(rng.normal(size=(4, 4, 3, 3)), padding=1)
    x = rng.normal(size=(1, 4, 3, 3))
    a = grad_check(*_wrap_conv(p), p.named_arrays(), x, seed=9, max_elements=10)
    b = grad_check(*_wrap_conv(p), p.named_arrays(), x, seed=9, max_elements=10)
    assert [r.line() for r in a] == [r.line() for r in b]


def test_grad_report_pass_rule():
    for rel, ab in [(1e-5, 1.0), (1.0, 1e-8)]:
        assert GradReport("w", rel, ab, (0,), rel <= 1e-4 or ab <= 1e-7).passed
    line = GradReport("w", 1e-3, 2e-3, (1, 2), False).line()
    assert line.startswith("param=w ") and "worst_index=1,2" in line and line.endswith("passed=false")
