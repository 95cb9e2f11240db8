"""Adversarial training loop, Adam, and checkpoints."""

from __future__ import annotations

import contextlib
import copy
import json
import logging
import math
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import io as pio
from .losses import LossWeights, PerceptualExtractor, combined_loss, discriminator_loss, schedule_weights
from .model import Discriminator, Generator, Module, as_image_batch, parse_scale
from .tensor import Tape, TnsFormatError, backward, load_tns, save_tns

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "pamdenoise-checkpoint/1"


class NonFiniteGradientError(FloatingPointError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, **hyper) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], **hyper)

    def hyper(self) -> dict:
        return {"t": self.t, "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}


def adam_step(params, grads, state: AdamState) -> None:
    """Bias-corrected Adam, in place on ``params`` (Tensors) and ``state``.

    A parameter whose gradient is None or identically zero is left untouched
    (its moments are not decayed either). Non-finite gradients abort the whole
    step before anything is modified.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("adam_step: params, grads and state lengths differ")
    for i, g in enumerate(grads):
        if g is not None:
            if g.shape != params[i].shape:
                raise ValueError(f"adam_step: grad {i} shape {g.shape} != param shape {params[i].shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(f"adam_step: non-finite gradient for parameter {i}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None or not g.any():
            continue
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------- config / data


@dataclass
class TrainConfig:
    data: str = ""
    out: str = "run"
    total_steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    scale: str = "1/8"
    checkpoint_interval: int = 500
    d_steps_per_g_step: int = 1
    perceptual_seed: int = 1234
    fixed_weights: Optional[tuple] = None

    def validate(self) -> None:
        if self.total_steps <= 0:
            raise ValueError(f"total_steps must be > 0, got {self.total_steps}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.d_steps_per_g_step < 0:
            raise ValueError("d_steps_per_g_step must be >= 0")
        if self.checkpoint_interval <= 0:
            raise ValueError("checkpoint_interval must be > 0")
        parse_scale(self.scale)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fixed_weights"] = list(self.fixed_weights) if self.fixed_weights is not None else None
        return d


def schedule_horizon(total_steps: int) -> int:
    """Iterations are numbered 0..total_steps-1; the last one sits on the schedule endpoint."""
    return max(total_steps - 1, 1)


def load_pairs(manifest_path) -> tuple[np.ndarray, np.ndarray, list]:
    rows = pio.read_dataset_manifest(manifest_path)
    if not rows:
        raise pio.ManifestError(f"{manifest_path}: no pairs")
    noisy, clean = [], []
    for i, row in enumerate(rows):
        if not row.get("clean_path"):
            raise pio.ManifestError(f"{manifest_path}: row {i} has no clean_path (needed for training)")
        noisy.append(pio.read_pgm(row["noisy_path"]))
        clean.append(pio.read_pgm(row["clean_path"]))
    shapes = {a.shape for a in noisy + clean}
    if len(shapes) != 1:
        raise pio.ManifestError(f"{manifest_path}: images have differing shapes {sorted(shapes)}")
    (h, w), = shapes
    if h % 16 or w % 16:
        raise pio.ManifestError(f"{manifest_path}: image size {h}x{w} not divisible by 16")
    return np.stack(noisy), np.stack(clean), rows


class BatchSampler:
    """Uniform shuffle per pseudo-epoch from a dedicated seeded stream."""

    def __init__(self, n: int, batch_size: int, seed: int):
        if n < batch_size:
            raise ValueError(f"dataset has {n} pairs, fewer than batch size {batch_size}")
        self.n, self.batch_size = n, batch_size
        self.rng = np.random.default_rng(seed)
        self.perm = self.rng.permutation(n)
        self.pos = 0

    def next(self) -> np.ndarray:
        if self.pos + self.batch_size > self.n:
            self.perm = self.rng.permutation(self.n)
            self.pos = 0
        idx = self.perm[self.pos : self.pos + self.batch_size]
        self.pos += self.batch_size
        return idx

    def state(self) -> dict:
        return {"rng": self.rng.bit_generator.state, "perm": self.perm.tolist(), "pos": self.pos}

    def restore(self, st: dict) -> None:
        self.rng.bit_generator.state = st["rng"]
        self.perm = np.asarray(st["perm"], dtype=np.int64)
        self.pos = int(st["pos"])


def derive_seeds(seed: int) -> dict:
    g, d, s = (int(x) for x in np.random.SeedSequence(seed).generate_state(3))
    return {"generator": g, "discriminator": d, "sampler": s}


# ---------------------------------------------------------------- step


@contextlib.contextmanager
def frozen(m: Module):
    """Temporarily stop gradient flow into ``m``'s parameters (inputs still get gradients)."""
    params = m.parameters()
    prev = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, r in zip(params, prev):
            p.requires_grad = r


def _finite(x: float) -> bool:
    return x is None or math.isfinite(x)


def train_step(
    g: Generator,
    d: Discriminator,
    batch: tuple,
    step: int,
    cfg: TrainConfig,
    g_opt: AdamState,
    d_opt: AdamState,
    ext: PerceptualExtractor,
    weights: Optional[LossWeights] = None,
) -> dict:
    """One D-then-G iteration. Returns the losses record for the log."""
    noisy, clean = batch
    noisy_t, clean_t = as_image_batch(noisy), as_image_batch(clean)
    if weights is None:
        if cfg.fixed_weights is not None:
            weights = LossWeights(*cfg.fixed_weights)
        else:
            weights = schedule_weights(step, schedule_horizon(cfg.total_steps))

    l_d = None
    if cfg.d_steps_per_g_step > 0:
        fake = g(noisy_t).detach()  # no tape: G gets nothing from the D update
        d_params = d.parameters()
        for _ in range(cfg.d_steps_per_g_step):
            with Tape() as tape:
                loss_d = discriminator_loss(d(clean_t, True), d(fake, True))
            l_d = loss_d.item()
            if not math.isfinite(l_d):
                raise TrainingDiverged(f"discriminator loss is {l_d} at step {step}")
            d.zero_grad()
            backward(loss_d, tape)
            adam_step(d_params, [p.grad for p in d_params], d_opt)

    use_d = weights.k3 != 0 or cfg.d_steps_per_g_step > 0
    g_params = g.parameters()
    with frozen(d):
        with Tape() as tape:
            den = g(noisy_t)
            scores = d(den, True) if use_d else None
            loss_g, vals = combined_loss(den, clean_t, scores, weights, ext)
        total = loss_g.item()
        if not math.isfinite(total) or not all(_finite(v) for v in vals.values()):
            raise TrainingDiverged(f"generator loss is {total} at step {step}")
        g.zero_grad()
        if tape.nodes:
            backward(loss_g, tape)  # D is still frozen, so only G collects gradients
    adam_step(g_params, [p.grad for p in g_params], g_opt)

    rec = {"step": int(step), "k1": weights.k1, "k2": weights.k2, "k3": weights.k3, "L_d": l_d}
    rec.update(vals)
    return rec


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    g: Generator
    d: Discriminator
    g_opt: AdamState
    d_opt: AdamState
    step: int
    manifest: dict = field(default_factory=dict)


def _save_state(dirpath: Path, state: dict) -> list[str]:
    dirpath.mkdir(parents=True, exist_ok=True)
    names = sorted(state)
    for name in names:
        save_tns(dirpath / f"{name}.tns", state[name])
    return names


def _load_state(dirpath: Path, names) -> dict:
    out = {}
    for name in names:
        p = dirpath / f"{name}.tns"
        try:
            out[name] = load_tns(p)
        except FileNotFoundError as exc:
            raise CheckpointError(f"checkpoint file {p} missing") from exc
        except TnsFormatError as exc:
            raise CheckpointError(f"checkpoint load failed: {exc}") from exc
    return out


def _adam_state_dict(model: Module, opt: AdamState) -> dict:
    out = {}
    for (name, _), m, v in zip(model.named_parameters(), opt.m, opt.v):
        out[f"m.{name}"] = m
        out[f"v.{name}"] = v
    return out


def save_checkpoint(g: Generator, d: Discriminator, g_opt: AdamState, d_opt: AdamState, step: int,
                    path, extra: Optional[dict] = None) -> Path:
    """Directory of ``.tns`` files plus ``manifest.json``; written to a temp dir then renamed."""
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    if tmp.exists():
        shutil.rmtree(tmp)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "scale": str(g.scale),
        "seed": (extra or {}).get("seed"),
        "generator_seed": g.seed,
        "discriminator_seed": d.seed,
        "step": int(step),
        "generator": _save_state(tmp / "generator", g.state_dict()),
        "discriminator": _save_state(tmp / "discriminator", d.state_dict()),
        "adam_generator": {"hyper": g_opt.hyper(), "files": _save_state(tmp / "adam_generator", _adam_state_dict(g, g_opt))},
        "adam_discriminator": {"hyper": d_opt.hyper(), "files": _save_state(tmp / "adam_discriminator", _adam_state_dict(d, d_opt))},
    }
    if extra:
        manifest.update({k: v for k, v in extra.items() if k != "seed"})
    pio.dump_json(tmp / "manifest.json", manifest)
    if path.exists():
        shutil.rmtree(path)
    tmp.rename(path)
    return path


def read_checkpoint_manifest(path) -> dict:
    mpath = Path(path) / "manifest.json"
    if not mpath.is_file():
        raise CheckpointError(f"{path}: no manifest.json (not a checkpoint directory)")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{mpath}: unknown checkpoint format {manifest.get('format')!r}")
    return manifest


def load_checkpoint(path, expect_scale=None) -> Checkpoint:
    path = Path(path)
    manifest = read_checkpoint_manifest(path)
    if expect_scale is not None and parse_scale(expect_scale) != parse_scale(manifest["scale"]):
        raise CheckpointError(
            f"{path}: architecture scale mismatch (checkpoint {manifest['scale']}, requested {parse_scale(expect_scale)})"
        )
    g = Generator(manifest["generator_seed"], manifest["scale"])
    d = Discriminator(manifest["discriminator_seed"], manifest["scale"])
    for model, key in ((g, "generator"), (d, "discriminator")):
        state = _load_state(path / key, manifest[key])
        try:
            model.load_state_dict(state)
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"{path / key}: {exc}") from exc
    opts = []
    for model, key in ((g, "adam_generator"), (d, "adam_discriminator")):
        hyper = manifest[key]["hyper"]
        arrays = _load_state(path / key, manifest[key]["files"])
        names = [n for n, _ in model.named_parameters()]
        try:
            m = [arrays[f"m.{n}"] for n in names]
            v = [arrays[f"v.{n}"] for n in names]
        except KeyError as exc:
            raise CheckpointError(f"{path / key}: missing moment {exc}") from exc
        opts.append(AdamState(m, v, **hyper))
    return Checkpoint(g, d, opts[0], opts[1], int(manifest["step"]), manifest)


# ---------------------------------------------------------------- full run


def _write_log(path: Path, records: list) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_log(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def init_head_bias(g: Generator, clean: np.ndarray) -> None:
    """Start the sigmoid output at the mean clean intensity instead of 0.5."""
    m = float(np.clip(np.mean(clean), 1e-3, 1 - 1e-3))
    g.head.bias.data = np.full_like(g.head.bias.data, math.log(m / (1 - m)))


def train(cfg: TrainConfig, resume: Optional[str] = None) -> dict:
    """Run ``cfg.total_steps`` iterations; returns {"checkpoint", "log", "records"}.

    Writes ``<out>/train_log.jsonl``, ``<out>/checkpoints/step_XXXXXXX`` every
    ``checkpoint_interval`` iterations and ``<out>/checkpoint`` (final).
    """
    cfg.validate()
    noisy, clean, _ = load_pairs(cfg.data)
    seeds = derive_seeds(cfg.seed)
    sampler = BatchSampler(len(noisy), cfg.batch_size, seeds["sampler"])
    ext = PerceptualExtractor(seed=cfg.perceptual_seed)
    hyper = {"lr": cfg.lr, "beta1": cfg.beta1, "beta2": cfg.beta2, "eps": cfg.eps}

    out = Path(cfg.out)
    records: list = []
    if resume:
        ck = load_checkpoint(resume, expect_scale=cfg.scale)
        meta = ck.manifest
        if meta.get("total_steps") != cfg.total_steps:
            raise CheckpointError(
                f"{resume}: checkpoint was made for total_steps={meta.get('total_steps')}, not {cfg.total_steps}"
            )
        g, d, g_opt, d_opt, start = ck.g, ck.d, ck.g_opt, ck.d_opt, ck.step
        sampler.restore(meta["sampler"])
        prev_log = out / "train_log.jsonl"
        if prev_log.is_file():
            records = [r for r in read_log(prev_log) if r["step"] < start]
    else:
        g = Generator(seeds["generator"], cfg.scale)
        init_head_bias(g, clean)
        d = Discriminator(seeds["discriminator"], cfg.scale)
        g_opt = AdamState.for_params(g.parameters(), **hyper)
        d_opt = AdamState.for_params(d.parameters(), **hyper)
        start = 0
    out.mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(exist_ok=True)

    def extra() -> dict:
        return {
            "seed": cfg.seed,
            "total_steps": cfg.total_steps,
            "sampler": sampler.state(),
            "config": cfg.to_dict(),
            "perceptual": ext.provenance(),
        }

    log_path = out / "train_log.jsonl"
    _write_log(log_path, records)
    with open(log_path, "a") as fh:
        for step in range(start, cfg.total_steps):
            sampler_before = sampler.state()
            # D may already be updated when G's loss turns non-finite
            snapshot = copy.deepcopy((g, d, g_opt, d_opt))
            idx = sampler.next()
            try:
                rec = train_step(g, d, (noisy[idx], clean[idx]), step, cfg, g_opt, d_opt, ext)
            except FloatingPointError as exc:
                sampler.restore(sampler_before)
                last_good = save_checkpoint(*snapshot, step, out / "last_good", extra())
                raise TrainingDiverged(f"{exc}; last good state saved to {last_good}") from exc
            records.append(rec)
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            done = step + 1
            if done % cfg.checkpoint_interval == 0 or done == cfg.total_steps:
                save_checkpoint(g, d, g_opt, d_opt, done, out / "checkpoints" / f"step_{done:07d}", extra())
    final = save_checkpoint(g, d, g_opt, d_opt, cfg.total_steps, out / "checkpoint", extra())
    return {"checkpoint": str(final), "log": str(log_path), "records": records}
