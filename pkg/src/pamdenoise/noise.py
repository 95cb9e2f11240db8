"""Synthetic clean/noisy PAM image pairs.

Clean phantoms are lifted into A-line volumes (one Gaussian pulse per
lateral pixel), corrupted with Poisson, Gaussian and Rayleigh noise on the
A-line samples, and projected back to 2-D by maximum amplitude projection.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import ndimage


class Level(str, Enum):
    LOW = "low"
    MID = "mid"
    HIGH = "high"


LEVELS = (Level.LOW, Level.MID, Level.HIGH)

# normalized amplitude units; Poisson scale is counts per unit amplitude
GAUSSIAN_BANDS = {Level.LOW: (0.02, 0.06), Level.MID: (0.06, 0.15), Level.HIGH: (0.15, 0.35)}
RAYLEIGH_BANDS = {k: (lo / 4, hi / 4) for k, (lo, hi) in GAUSSIAN_BANDS.items()}
POISSON_BANDS = {Level.LOW: (1000.0, 2000.0), Level.MID: (500.0, 1000.0), Level.HIGH: (200.0, 500.0)}

DEFAULT_DEPTH = 32
DEFAULT_PULSE_SIGMA = 1.5
RENORM_PERCENTILE = 99.9


@dataclass(frozen=True)
class NoiseSpec:
    gaussian_sigma: float = 0.0
    poisson_scale: float = 0.0
    rayleigh_sigma: float = 0.0
    level: Level = Level.LOW

    def __post_init__(self):
        for name in ("gaussian_sigma", "poisson_scale", "rayleigh_sigma"):
            v = getattr(self, name)
            if not (v >= 0 and np.isfinite(v)):
                raise ValueError(f"NoiseSpec.{name} must be finite and >= 0, got {v}")
        object.__setattr__(self, "level", Level(self.level))

    @property
    def is_zero(self) -> bool:
        return self.gaussian_sigma == 0 and self.poisson_scale == 0 and self.rayleigh_sigma == 0

    def to_dict(self) -> dict:
        return {
            "gaussian_sigma": self.gaussian_sigma,
            "poisson_scale": self.poisson_scale,
            "rayleigh_sigma": self.rayleigh_sigma,
            "level": self.level.value,
        }


# heading random-walk std (radians per pixel step) by phantom kind
KIND_WANDER = {"veins": 0.08, "vessels": 0.25}


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    kind: str = "veins"
    size: tuple = (64, 64)
    branch_count: tuple = (2, 5)
    wander: float | None = None
    thickness: tuple = (1.5, 3.5)
    seed: int = 0

    def resolved_wander(self) -> float:
        if self.wander is not None:
            return float(self.wander)
        if self.kind not in KIND_WANDER:
            raise PhantomError(f"unknown phantom kind {self.kind!r}")
        return KIND_WANDER[self.kind]


def _stamp_disc(canvas: np.ndarray, cy: float, cx: float, radius: float, value: float) -> None:
    h, w = canvas.shape
    reach = radius + 1.0
    y0, y1 = max(int(np.floor(cy - reach)), 0), min(int(np.ceil(cy + reach)) + 1, h)
    x0, x1 = max(int(np.floor(cx - reach)), 0), min(int(np.ceil(cx + reach)) + 1, w)
    if y0 >= y1 or x0 >= x1:
        return
    dy = np.arange(y0, y1)[:, None] - cy
    dx = np.arange(x0, x1)[None, :] - cx
    dist = np.sqrt(dy * dy + dx * dx)
    # one-pixel soft edge
    cover = np.clip(radius + 0.5 - dist, 0.0, 1.0)
    np.maximum(canvas[y0:y1, x0:x1], value * cover, out=canvas[y0:y1, x0:x1])


def _walk(canvas, rng, y, x, heading, length, width, wander, intensity, depth, out_branches):
    h, w = canvas.shape
    n = max(int(length), 2)
    for k in range(n):
        frac = k / n
        radius = 0.5 * width * (1.0 - 0.6 * frac)
        _stamp_disc(canvas, y, x, radius, intensity * (1.0 - 0.2 * frac))
        heading += rng.normal(0.0, wander)
        y += np.sin(heading)
        x += np.cos(heading)
        if not (-2 <= y < h + 2 and -2 <= x < w + 2):
            break
        if depth < 2 and width > 1.2 and rng.random() < 0.035:
            side = heading + rng.choice((-1.0, 1.0)) * rng.uniform(0.5, 1.2)
            out_branches.append((y, x, side, length * rng.uniform(0.3, 0.6), width * 0.6, depth + 1))


def gen_phantom(spec: PhantomSpec) -> np.ndarray:
    """Branching curvilinear structures on a zero background, values in [0, 1]."""
    h, w = spec.size
    if h < 32 or w < 32:
        raise PhantomError(f"phantom size {h}x{w} below minimum 32x32")
    wander = spec.resolved_wander()
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.branch_count
    count = int(rng.integers(lo, hi + 1)) if hi > 0 else 0
    canvas = np.zeros((h, w), dtype=np.float64)
    for _ in range(count):
        # main stems start inside the frame and grow in both directions
        y, x = rng.uniform(0.2 * h, 0.8 * h), rng.uniform(0.2 * w, 0.8 * w)
        heading = rng.uniform(0.0, 2.0 * np.pi)
        width = rng.uniform(*spec.thickness)
        intensity = rng.uniform(0.6, 1.0)
        half = max(h, w) * rng.uniform(0.35, 0.7)
        pending = [(y, x, heading, half, width, 0), (y, x, heading + np.pi, half, width, 0)]
        while pending:
            by, bx, bh, blen, bw, depth = pending.pop(0)
            jitter = intensity * rng.uniform(0.75, 1.0)
            _walk(canvas, rng, by, bx, bh, blen, bw, wander, jitter, depth, pending)
    np.clip(canvas, 0.0, 1.0, out=canvas)
    if np.mean(canvas > 0.1) < 0.01:
        raise PhantomError("phantom has (almost) no foreground: fewer than 1% of pixels exceed 0.1")
    return canvas


def _depth_map(shape, depth: int, pulse_sigma: float, rng: np.random.Generator) -> np.ndarray:
    margin = int(np.ceil(3.0 * pulse_sigma))
    lo, hi = margin, depth - 1 - margin
    field_ = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=4.0, mode="reflect")
    span = field_.max() - field_.min()
    u = (field_ - field_.min()) / span if span > 0 else np.full(shape, 0.5)
    return np.rint(lo + u * (hi - lo)).astype(np.int64)


def lift_to_volume(
    img: np.ndarray, depth: int = DEFAULT_DEPTH, pulse_sigma: float = DEFAULT_PULSE_SIGMA, seed: int = 0
) -> np.ndarray:
    """Return an (H, W, depth) A-line volume whose MAP equals ``img``.

    Each pixel of value v gets a pulse ``v * exp(-(z - d)^2 / (2 sigma^2))``
    peaking at an integer depth d drawn from a smooth random depth map.
    """
    img = np.asarray(img, dtype=np.float64)
    if depth < 4:
        raise ValueError(f"depth {depth} < 4")
    if not pulse_sigma > 0:
        raise ValueError("pulse_sigma must be positive")
    if 2 * int(np.ceil(3.0 * pulse_sigma)) > depth - 1:
        raise ValueError(f"pulse sigma {pulse_sigma} too wide for a depth window of {depth} samples")
    rng = np.random.default_rng(seed)
    d = _depth_map(img.shape, depth, pulse_sigma, rng)
    z = np.arange(depth, dtype=np.float64)
    pulse = np.exp(-((z[None, None, :] - d[..., None]) ** 2) / (2.0 * pulse_sigma**2))
    return img[..., None] * pulse


def add_noise(vol: np.ndarray, spec: NoiseSpec, seed: int = 0) -> np.ndarray:
    """Poisson on the non-negative part (if enabled), then additive Gaussian and Rayleigh."""
    out = np.array(vol, dtype=np.float64)
    if spec.is_zero:
        return out
    rng = np.random.default_rng(seed)
    s = spec.poisson_scale
    if s > 0:
        pos = np.maximum(out, 0.0)
        out = rng.poisson(pos * s) / s + np.minimum(out, 0.0)
    if spec.gaussian_sigma > 0:
        out += rng.normal(0.0, spec.gaussian_sigma, size=out.shape)
    if spec.rayleigh_sigma > 0:
        out += rng.rayleigh(spec.rayleigh_sigma, size=out.shape)
    return out


def map_project(vol: np.ndarray, scale: float = 1.0, clip: bool = True) -> np.ndarray:
    """Maximum amplitude projection along the last (axial) axis, divided by ``scale``."""
    out = np.abs(np.asarray(vol, dtype=np.float64)).max(axis=-1) / scale
    return np.clip(out, 0.0, 1.0) if clip else out


def dataset_scale(raw_maps) -> float:
    """Renormalization divisor: the 99.9th-percentile amplitude, never below 1."""
    flat = np.concatenate([np.ravel(m) for m in raw_maps])
    return max(1.0, float(np.percentile(flat, RENORM_PERCENTILE)))


def make_pair(
    clean: np.ndarray,
    spec: NoiseSpec,
    seed: int = 0,
    depth: int = DEFAULT_DEPTH,
    pulse_sigma: float = DEFAULT_PULSE_SIGMA,
    clip: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """(noisy, clean). Lifting and noise use independent streams derived from ``seed``."""
    clean = np.asarray(clean, dtype=np.float64)
    if clean.min() < 0 or clean.max() > 1:
        raise ValueError("clean image must lie in [0, 1]")
    lift_seed, noise_seed = np.random.SeedSequence(seed).generate_state(2)
    vol = lift_to_volume(clean, depth, pulse_sigma, int(lift_seed))
    noisy = map_project(add_noise(vol, spec, int(noise_seed)), clip=clip)
    return noisy, clean


def sample_noise_spec(level, seed: int = 0) -> NoiseSpec:
    level = Level(level)
    rng = np.random.default_rng(seed)
    g = rng.uniform(*GAUSSIAN_BANDS[level])
    lo, hi = POISSON_BANDS[level]
    s = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
    r = rng.uniform(*RAYLEIGH_BANDS[level])
    return NoiseSpec(float(g), s, float(r), level)
