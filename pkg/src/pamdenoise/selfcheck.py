"""Finite-difference gradient checks over every differentiable op, block and network."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import losses
from .model import Discriminator, GCBlock, Generator, StandardUnitBlock, gc_ratio_for, parse_scale
from .tensor import RunningStats, Tensor, grad_check, ops

TOLERANCE = 1e-4


def _weighted(fn: Callable, r: np.ndarray) -> Callable:
    # random projection so every output element contributes to the scalar
    return lambda t: ops.sum(ops.mul(fn(t), r))


def cases(scale="1/8", size: int = 16, seed: int = 0) -> dict:
    """name -> (scalar function of one tensor, probe point)."""
    rng = np.random.default_rng(seed)
    T = Tensor
    x4 = T(rng.standard_normal((2, 3, 4, 4)))
    wc = T(rng.standard_normal((2, 3, 3, 3)))
    wt = T(rng.standard_normal((3, 2, 2, 2)))
    gl = T(rng.uniform(0.5, 2.0, (3, 4, 4)))
    wl, bl = T(rng.standard_normal((5, 6))), T(rng.standard_normal(5))
    sc = parse_scale(scale)

    elementwise = {
        "add": (lambda t: ops.add(t, ops.square(t)), x4),
        "sub": (lambda t: ops.sub(ops.square(t), t), x4),
        "mul": (lambda t: ops.mul(t, ops.sigmoid(t)), x4),
        "square": (ops.square, x4),
        "log": (ops.log, T(rng.uniform(0.5, 2.0, (2, 3, 4, 4)))),
        "clip": (lambda t: ops.clip(t, -0.5, 0.5), T(rng.choice([-1.0, 1.0], (2, 3, 4, 4)) * rng.uniform(0.1, 0.4, (2, 3, 4, 4)))),
        "relu": (ops.relu, x4),
        "leaky_relu": (lambda t: ops.leaky_relu(t, 0.2), x4),
        "sigmoid": (ops.sigmoid, x4),
        "softmax": (lambda t: ops.softmax(t, axis=-1), x4),
        "sum": (lambda t: ops.sum(t, axis=1), x4),
        "mean": (lambda t: ops.mean(t, axis=(2, 3)), x4),
        "reshape": (lambda t: ops.reshape(ops.square(t), (2, 48)), x4),
        "concat": (lambda t: ops.concat([t, ops.square(t)], axis=1), x4),
        "global_avg_pool": (ops.global_avg_pool, x4),
        "linear": (lambda t: ops.linear(t, wl, bl), T(rng.standard_normal((3, 6)))),
        "conv2d": (lambda t: ops.conv2d(t, wc, T([0.1, -0.2]), 1, 1), x4),
        "conv2d_weight": (lambda w: ops.conv2d(x4, w, None, 1, 1), T(rng.standard_normal((2, 3, 3, 3)))),
        "conv2d_stride2": (lambda t: ops.conv2d(t, wc, T([0.1, -0.2]), 2, "same"), x4),
        "conv2d_transpose": (lambda t: ops.conv2d_transpose(t, wt, T([0.3, 0.1])), x4),
        "maxpool2d": (ops.maxpool2d, x4),
        "instance_norm": (lambda t: ops.instance_norm(t, T([1.0, 2.0, 0.5]), T([0.0, 1.0, 0.0])), x4),
        "layer_norm": (lambda t: ops.layer_norm(t, gl, T(np.zeros((3, 4, 4)))), x4),
        "batch_norm": (lambda t: ops.batch_norm(t, T([1.0, 2.0, 0.5]), T([0.0, 1.0, 0.0]), RunningStats(3)), x4),
        "smooth_l1": (lambda t: ops.smooth_l1(t, np.zeros(t.shape)), T(rng.uniform(-3.0, 3.0, (2, 1, 4, 4)))),
    }
    out = {}
    for name, (fn, x) in elementwise.items():
        probe = fn(x)
        out[name] = (_weighted(fn, rng.standard_normal(probe.shape)) if probe.ndim else fn, x)

    unit = StandardUnitBlock(np.random.default_rng(seed + 1), 2, 4)
    gc = GCBlock(np.random.default_rng(seed + 2), 8, gc_ratio_for(8))
    g = Generator(seed + 3, sc)
    d = Discriminator(seed + 4, sc)
    ext = losses.PerceptualExtractor(seed=seed + 5, stages=((4, 3, True),))
    img = T(rng.uniform(0.0, 1.0, (1, 1, size, size)))
    pair = T(rng.uniform(0.0, 1.0, (4, 1, size, size)))
    clean = rng.uniform(0.0, 1.0, (1, 1, 8, 8))
    scores = T(rng.uniform(0.05, 0.95, (4, 1)))
    blocks = {
        "standard_unit_block": (unit, T(rng.standard_normal((1, 2, 8, 8)))),
        "gc_block": (gc, T(rng.standard_normal((1, 8, 4, 4)))),
        "generator": (g, img),
        "discriminator": (lambda t: d(t, True), pair),
    }
    for name, (fn, x) in blocks.items():
        out[name] = (_weighted(fn, rng.standard_normal(fn(x).shape)), x)
    out["perceptual_loss"] = (lambda t: losses.perceptual_loss(t, Tensor(clean), ext), T(rng.uniform(0.0, 1.0, (1, 1, 8, 8))))
    out["generator_adv_loss"] = (losses.generator_adv_loss, scores)
    out["discriminator_loss"] = (lambda t: losses.discriminator_loss(t, ops.sub(1.0, t)), scores)
    return out


def run(scale="1/8", size: int = 16, seed: int = 0, h: float = 1e-6) -> list[tuple[str, float]]:
    return [(name, grad_check(fn, x, h)) for name, (fn, x) in cases(scale, size, seed).items()]
