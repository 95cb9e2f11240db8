"""Training objectives: perceptual, smooth-L1 and adversarial terms and their weighting schedule."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .tensor import DimensionError, Tensor, load_tns, no_grad, ops

SCORE_EPS = 1e-7
K3_MAX = 1e-3


@dataclass(frozen=True)
class LossWeights:
    k1: float  # perceptual
    k2: float  # smooth L1
    k3: float  # adversarial

    def as_tuple(self) -> tuple:
        return (self.k1, self.k2, self.k3)


class PerceptualExtractor:
    """Frozen conv (3x3 by default) + ReLU (+ 2x max pool) feature stack.

    ``stages`` lists ``(out_channels, kernel, pool)``. Weights come from a
    seeded He-uniform draw or from ``.tns`` files; they never receive
    gradients.
    """

    def __init__(self, seed: int = 1234, stages: Sequence[tuple] = ((8, 3, True), (16, 3, True)),
                 weights: Optional[list[tuple[np.ndarray, np.ndarray]]] = None, source: str = "seeded"):
        self.stages = [tuple(s) for s in stages]
        self.seed = seed
        self.source = source
        if weights is None:
            rng = np.random.default_rng(seed)
            weights = []
            in_c = 1
            for out_c, k, _ in self.stages:
                fan_in = in_c * k * k
                bound = np.sqrt(6.0 / fan_in)
                weights.append((rng.uniform(-bound, bound, (out_c, in_c, k, k)), np.zeros(out_c)))
                in_c = out_c
        if len(weights) != len(self.stages):
            raise DimensionError(f"{len(weights)} weight sets for {len(self.stages)} stages")
        self.weights = [(Tensor(w), Tensor(b)) for w, b in weights]

    @classmethod
    def from_tns(cls, paths: Sequence[str], pool: Sequence[bool]) -> "PerceptualExtractor":
        """``paths`` alternate weight, bias files per stage."""
        arrays = [load_tns(p) for p in paths]
        pairs = list(zip(arrays[0::2], arrays[1::2]))
        stages = [(w.shape[0], w.shape[2], bool(p)) for (w, _), p in zip(pairs, pool)]
        return cls(stages=stages, weights=pairs, source="external:" + ",".join(map(str, paths)))

    def features(self, x: Tensor) -> Tensor:
        for (w, b), (_, k, pool) in zip(self.weights, self.stages):
            x = ops.relu(ops.conv2d(x, w, b, 1, (k - 1) // 2))
            if pool:
                x = ops.maxpool2d(x)
        return x

    __call__ = features

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for w, b in self.weights:
            h.update(w.data.tobytes())
            h.update(b.data.tobytes())
        return h.hexdigest()

    def provenance(self) -> dict:
        return {"source": self.source, "seed": self.seed, "stages": self.stages, "sha256": self.fingerprint()}


def _check_same(a, b, name):
    if tuple(a.shape) != tuple(b.shape):
        raise DimensionError(f"{name}: shapes differ {tuple(a.shape)} vs {tuple(b.shape)}")


def perceptual_loss(denoised: Tensor, clean: Tensor, ext: PerceptualExtractor) -> Tensor:
    """Mean squared feature difference (sum over H'W'C' divided by H'W'C', averaged over the batch)."""
    _check_same(denoised, clean, "perceptual_loss")
    fa = ext(denoised)
    fb = ext(clean)
    return ops.mean(ops.square(ops.sub(fa, fb)))


def smooth_l1_loss(denoised: Tensor, clean) -> Tensor:
    _check_same(denoised, clean, "smooth_l1_loss")
    return ops.smooth_l1(denoised, clean)


def generator_adv_loss(d_scores: Tensor) -> Tensor:
    """Batch sum of -log D(G(x)), scores clamped to [1e-7, 1 - 1e-7]."""
    return ops.mul(ops.sum(ops.log(ops.clip(d_scores, SCORE_EPS, 1.0 - SCORE_EPS))), -1.0)


def discriminator_loss(real_scores: Tensor, fake_scores: Tensor) -> Tensor:
    """-sum log D(real) - sum log(1 - D(fake))."""
    real = ops.log(ops.clip(real_scores, SCORE_EPS, 1.0 - SCORE_EPS))
    fake = ops.log(ops.sub(1.0, ops.clip(fake_scores, SCORE_EPS, 1.0 - SCORE_EPS)))
    return ops.mul(ops.add(ops.sum(real), ops.sum(fake)), -1.0)


def combined_loss(denoised: Tensor, clean, d_scores: Optional[Tensor], w: LossWeights,
                  ext: PerceptualExtractor) -> tuple[Tensor, dict]:
    """k1 * perceptual + k2 * smooth-L1 + k3 * adversarial.

    Terms whose weight is zero are evaluated for logging but left out of the
    differentiable sum. Returns (loss, {"L_perc", "L_sl1", "L_adv_g"}).
    """
    clean_t = clean if isinstance(clean, Tensor) else Tensor(clean)
    terms = {
        "L_perc": (w.k1, lambda: perceptual_loss(denoised, clean_t, ext)),
        "L_sl1": (w.k2, lambda: smooth_l1_loss(denoised, clean_t)),
        "L_adv_g": (w.k3, lambda: generator_adv_loss(d_scores)),
    }
    total: Optional[Tensor] = None
    values = {}
    for name, (k, fn) in terms.items():
        if name == "L_adv_g" and d_scores is None:
            values[name] = None
            continue
        if k == 0:
            with no_grad():
                values[name] = fn().item()
            continue
        term = fn()
        values[name] = term.item()
        scaled = ops.mul(term, k)
        total = scaled if total is None else ops.add(total, scaled)
    if total is None:
        total = Tensor(0.0)
    return total, values


def schedule_weights(step: int, total_steps: int) -> LossWeights:
    """Linear ramp: k1 0 -> 1, k2 1 -> 0, k3 0 -> 1e-3 over ``total_steps``."""
    if total_steps <= 0:
        raise ValueError(f"total_steps must be positive, got {total_steps}")
    if step < 0 or step > total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    t = step / total_steps
    return LossWeights(t, 1.0 - t, K3_MAX * t)
