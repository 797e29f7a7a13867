"""Finite-difference verification suite over every differentiable operator
and a tiny end-to-end model.

All checks run in 64-bit mode with central differences; the per-coordinate
error is |analytic - numeric| / max(1, |analytic|). The registry is shared by
the CLI command and the test suite. Every constant an op closure captures is
drawn once at build time so the checked function is fixed.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import ops
from .model import ModelConfig, TransClawUNet
from .tensor import (Tensor, concat, finite_diff_check, mul, precision,
                     reduce_max, reduce_mean, reduce_sum, reshape, scalar_add,
                     scalar_mul, slice_axis, transpose)

TOLERANCE = 1e-4

# builder(rng) -> (scalar-valued f, probe tensor); built under 64-bit mode
Builder = Callable[[np.random.Generator], tuple[Callable[[Tensor], Tensor], Tensor]]


def _t(rng, *shape) -> Tensor:
    return Tensor(rng.normal(size=shape), dtype=np.float64)


def _spaced(rng, *shape) -> Tensor:
    # well-separated values so argmax routing cannot flip inside the FD step
    n = int(np.prod(shape))
    vals = rng.permutation(n) * 0.1 + rng.uniform(-1e-3, 1e-3, n)
    return Tensor(vals.reshape(shape), dtype=np.float64)


def _away_from_zero(rng, *shape) -> Tensor:
    mag = rng.uniform(0.2, 1.0, size=shape)
    sign = rng.choice([-1.0, 1.0], size=shape)
    return Tensor(mag * sign, dtype=np.float64)


def _scalarized(rng, op: Callable[[Tensor], Tensor], probe: Tensor):
    """Turn op into a scalar function through a fixed random projection."""
    w = _t(rng, *op(probe).shape)
    return (lambda x: reduce_sum(mul(op(x), w))), probe


def _build_registry() -> list[tuple[str, Builder]]:
    reg: list[tuple[str, Builder]] = []

    def add(name: str, builder: Builder):
        reg.append((name, builder))

    def matmul_a(rng):
        b = _t(rng, 4, 5)
        return _scalarized(rng, lambda a: a @ b, _t(rng, 3, 4))

    def matmul_b(rng):
        a = _t(rng, 3, 4)
        return _scalarized(rng, lambda b: a @ b, _t(rng, 4, 5))

    def matmul_batched(rng):
        b = _t(rng, 2, 3, 4, 5)
        return _scalarized(rng, lambda a: a @ b, _t(rng, 2, 3, 5, 4))

    def ew_add(rng):
        b = _t(rng, 3, 4)
        return _scalarized(rng, lambda a: a + b, _t(rng, 3, 4))

    def ew_sub(rng):
        b = _t(rng, 3, 4)
        return _scalarized(rng, lambda a: b - a, _t(rng, 3, 4))

    def ew_mul(rng):
        b = _t(rng, 3, 4)
        return _scalarized(rng, lambda a: a * b, _t(rng, 3, 4))

    add("matmul.a", matmul_a)
    add("matmul.b", matmul_b)
    add("matmul.batched", matmul_batched)
    add("add", ew_add)
    add("sub", ew_sub)
    add("mul", ew_mul)
    add("scalar_mul", lambda rng: _scalarized(
        rng, lambda a: scalar_mul(a, 2.5), _t(rng, 3, 4)))
    add("scalar_add", lambda rng: _scalarized(
        rng, lambda a: scalar_add(a, -1.5), _t(rng, 3, 4)))
    add("sum.all", lambda rng: ((lambda x: reduce_sum(mul(x, x))), _t(rng, 3, 4)))
    add("sum.axis", lambda rng: _scalarized(
        rng, lambda a: reduce_sum(a, axis=1), _t(rng, 3, 4, 2)))
    add("mean.all", lambda rng: ((lambda x: reduce_mean(mul(x, x))), _t(rng, 3, 4)))
    add("mean.axis", lambda rng: _scalarized(
        rng, lambda a: reduce_mean(a, axis=0), _t(rng, 3, 4)))
    add("max.all", lambda rng: ((lambda x: reduce_max(x)), _spaced(rng, 3, 4)))
    add("max.axis", lambda rng: _scalarized(
        rng, lambda a: reduce_max(a, axis=1), _spaced(rng, 3, 5)))
    add("reshape", lambda rng: _scalarized(
        rng, lambda a: reshape(a, (6, 2)), _t(rng, 3, 4)))
    add("transpose", lambda rng: _scalarized(
        rng, lambda a: transpose(a, (2, 0, 1)), _t(rng, 2, 3, 4)))

    def cat(rng):
        other = _t(rng, 3, 2)
        return _scalarized(rng, lambda a: concat([a, other, a], axis=1), _t(rng, 3, 2))

    add("concat", cat)
    add("slice", lambda rng: _scalarized(
        rng, lambda a: slice_axis(a, 1, 1, 3), _t(rng, 3, 4)))

    def chan_affine_x(rng):
        gamma, beta = _t(rng, 3), _t(rng, 3)
        return _scalarized(rng, lambda x: ops.channel_affine(x, gamma, beta),
                           _t(rng, 2, 3, 4, 4))

    def chan_affine_gamma(rng):
        x, beta = _t(rng, 2, 3, 4, 4), _t(rng, 3)
        return _scalarized(rng, lambda gm: ops.channel_affine(x, gm, beta), _t(rng, 3))

    def chan_affine_beta(rng):
        x, gamma = _t(rng, 2, 3, 4, 4), _t(rng, 3)
        return _scalarized(rng, lambda bt: ops.channel_affine(x, gamma, bt), _t(rng, 3))

    add("channel_affine.x", chan_affine_x)
    add("channel_affine.gamma", chan_affine_gamma)
    add("channel_affine.beta", chan_affine_beta)

    def bias_add_bias(rng):
        x = _t(rng, 2, 5, 3)
        return _scalarized(rng, lambda b: ops.bias_add(x, b), _t(rng, 5, 3))

    add("bias_add.bias", bias_add_bias)

    # nn-ops
    def conv_x(rng):
        w, b = _t(rng, 4, 3, 3, 3), _t(rng, 4)
        return _scalarized(rng, lambda x: ops.conv2d(x, w, b, 1, 1), _t(rng, 2, 3, 5, 5))

    def conv_w(rng):
        x, b = _t(rng, 2, 3, 5, 5), _t(rng, 4)
        return _scalarized(rng, lambda w: ops.conv2d(x, w, b, 1, 1), _t(rng, 4, 3, 3, 3))

    def conv_b(rng):
        x, w = _t(rng, 2, 3, 5, 5), _t(rng, 4, 3, 3, 3)
        return _scalarized(rng, lambda b: ops.conv2d(x, w, b, 1, 1), _t(rng, 4))

    def conv_strided(rng):
        w, b = _t(rng, 2, 3, 3, 3), _t(rng, 2)
        return _scalarized(rng, lambda x: ops.conv2d(x, w, b, 2, 0), _t(rng, 1, 3, 7, 7))

    add("conv2d.x", conv_x)
    add("conv2d.weight", conv_w)
    add("conv2d.bias", conv_b)
    add("conv2d.strided", conv_strided)
    add("maxpool2d", lambda rng: _scalarized(
        rng, ops.maxpool2d, _spaced(rng, 2, 2, 4, 4)))
    add("avgpool2d", lambda rng: _scalarized(
        rng, lambda x: ops.avgpool2d(x, 2), _t(rng, 2, 2, 4, 4)))
    add("upsample.bilinear", lambda rng: _scalarized(
        rng, lambda x: ops.upsample2x(x, "bilinear"), _t(rng, 2, 2, 3, 3)))
    add("upsample.nearest", lambda rng: _scalarized(
        rng, lambda x: ops.upsample2x(x, "nearest"), _t(rng, 2, 2, 3, 3)))

    def bn_case(rng, training, probe_role):
        C = 3
        gamma, beta = _t(rng, C), _t(rng, C)
        rm = Tensor(rng.normal(size=C), dtype=np.float64)
        rv = Tensor(rng.uniform(0.5, 1.5, size=C), dtype=np.float64)
        x = _t(rng, 2, C, 4, 4)

        if probe_role == "x":
            op = lambda t: ops.batch_norm2d(t, gamma, beta, rm, rv, training=training)
            return _scalarized(rng, op, x)
        if probe_role == "gamma":
            op = lambda t: ops.batch_norm2d(x, t, beta, rm, rv, training=training)
            return _scalarized(rng, op, gamma)
        op = lambda t: ops.batch_norm2d(x, gamma, t, rm, rv, training=training)
        return _scalarized(rng, op, beta)

    add("batch_norm.train.x", lambda rng: bn_case(rng, True, "x"))
    add("batch_norm.train.gamma", lambda rng: bn_case(rng, True, "gamma"))
    add("batch_norm.train.beta", lambda rng: bn_case(rng, True, "beta"))
    add("batch_norm.eval.x", lambda rng: bn_case(rng, False, "x"))

    def ln_case(rng, probe_role):
        D = 6
        gamma, beta = _t(rng, D), _t(rng, D)
        x = _t(rng, 2, 5, D)
        if probe_role == "x":
            return _scalarized(rng, lambda t: ops.layer_norm(t, gamma, beta), x)
        if probe_role == "gamma":
            return _scalarized(rng, lambda t: ops.layer_norm(x, t, beta), gamma)
        return _scalarized(rng, lambda t: ops.layer_norm(x, gamma, t), beta)

    add("layer_norm.x", lambda rng: ln_case(rng, "x"))
    add("layer_norm.gamma", lambda rng: ln_case(rng, "gamma"))
    add("layer_norm.beta", lambda rng: ln_case(rng, "beta"))

    def linear_case(rng, probe_role):
        x, w, b = _t(rng, 2, 5, 6), _t(rng, 6, 4), _t(rng, 4)
        if probe_role == "x":
            return _scalarized(rng, lambda t: ops.linear(t, w, b), x)
        if probe_role == "weight":
            return _scalarized(rng, lambda t: ops.linear(x, t, b), w)
        return _scalarized(rng, lambda t: ops.linear(x, w, t), b)

    add("linear.x", lambda rng: linear_case(rng, "x"))
    add("linear.weight", lambda rng: linear_case(rng, "weight"))
    add("linear.bias", lambda rng: linear_case(rng, "bias"))
    add("relu", lambda rng: _scalarized(rng, ops.relu, _away_from_zero(rng, 3, 4)))
    add("gelu", lambda rng: _scalarized(rng, ops.gelu, _t(rng, 3, 4)))
    add("softmax", lambda rng: _scalarized(rng, ops.softmax, _t(rng, 3, 5)))

    def ce_case(rng):
        target = rng.integers(0, 3, size=(2, 4, 4))
        return (lambda x: ops.cross_entropy(x, target)), _t(rng, 2, 3, 4, 4)

    add("cross_entropy", ce_case)
    return reg


OP_CHECKS = _build_registry()


def run_op_suite(seeds=range(3), eps: float = 1e-5) -> list[tuple[str, float]]:
    """Max finite-difference error per operator over the given seeds."""
    results = []
    with precision("f64"):
        for name, builder in OP_CHECKS:
            worst = 0.0
            for seed in seeds:
                rng = np.random.default_rng([seed, 17])
                f, probe = builder(rng)
                worst = max(worst, finite_diff_check(f, probe, eps))
            results.append((name, worst))
    return results


def tiny_model_config() -> ModelConfig:
    return ModelConfig(height=16, width=16, in_channels=1, num_classes=3,
                       conv_levels=3, base_channels=4, patch_size=1,
                       transformer_layers=1, heads=2, d_model=16, d_mlp=32,
                       skip_budget=3)


def _assign(root, dotted: str, tensor: Tensor) -> None:
    parts = dotted.split(".")
    obj = root
    for p in parts[:-1]:
        if isinstance(obj, (list, tuple)):
            obj = obj[int(p)]
        elif isinstance(obj, dict):
            obj = obj[p]
        else:
            obj = getattr(obj, p)
    setattr(obj, parts[-1], tensor)


def run_model_suite(seed: int = 0, eps: float = 1e-5, max_coords: int = 6
                    ) -> list[tuple[str, float]]:
    """End-to-end check: cross-entropy of a tiny model, probing the input and
    a sampled subset of coordinates in every parameter tensor."""
    results = []
    with precision("f64"):
        cfg = tiny_model_config()
        model = TransClawUNet(cfg, seed=seed)
        model.train()
        rng = np.random.default_rng([seed, 23])
        x_data = rng.normal(size=(1, cfg.in_channels, cfg.height, cfg.width))
        target = rng.integers(0, cfg.num_classes, size=(1, cfg.height, cfg.width))
        x_const = Tensor(x_data, dtype=np.float64)

        def loss_for_input(t: Tensor) -> Tensor:
            return ops.cross_entropy(model(t), target)

        results.append(("model.input",
                        finite_diff_check(loss_for_input, x_const, eps)))

        for name, param in list(model.named_parameters()):
            def loss_for_param(t: Tensor, _name=name) -> Tensor:
                _assign(model, _name, t)
                return ops.cross_entropy(model(x_const), target)

            err = finite_diff_check(loss_for_param, param, eps,
                                    max_coords=max_coords,
                                    rng=np.random.default_rng([seed, 29]))
            _assign(model, name, param)  # restore the original tensor
            results.append((f"model.{name}", err))
    return results


def run_all(op_seeds=range(3), model_seed: int = 0, eps: float = 1e-5
            ) -> list[tuple[str, float]]:
    return run_op_suite(op_seeds, eps) + run_model_suite(model_seed, eps)
