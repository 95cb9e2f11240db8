"""Generator (U-Net with global-context attention) and discriminator networks."""

from __future__ import annotations

from fractions import Fraction
from typing import Iterator, Optional

import numpy as np

from .tensor import ConfigurationError, DimensionError, RunningStats, StateError, Tensor, ops

LRELU_SLOPE = 0.2
NORM_EPS = 1e-5
GC_RATIO = 8

GENERATOR_FILTERS = (32, 64, 128, 256, 512, 256, 128, 64, 32)
DISCRIMINATOR_FILTERS = (64, 64, 128, 128, 256, 256, 512, 512)
DISCRIMINATOR_STRIDES = (1, 2, 1, 2, 1, 2, 1, 2)
FC_HIDDEN = 1024
ALLOWED_SCALES = (Fraction(1), Fraction(1, 2), Fraction(1, 4), Fraction(1, 8))


def parse_scale(scale) -> Fraction:
    """Accept 1, 0.125, "1/8", Fraction(1, 8), ..."""
    try:
        frac = Fraction(str(scale)) if isinstance(scale, str) else Fraction(scale).limit_denominator(64)
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigurationError(f"unparseable scale {scale!r}") from exc
    if frac not in ALLOWED_SCALES:
        raise ConfigurationError(f"scale {frac} not in {{1, 1/2, 1/4, 1/8}}")
    return frac


def scaled(counts, scale: Fraction) -> list[int]:
    out = []
    for c in counts:
        v = c * scale
        if v.denominator != 1 or v < 1:
            raise ConfigurationError(f"scale {scale} gives non-integer channel count {v} from {c}")
        out.append(int(v))
    return out


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / ((1.0 + LRELU_SLOPE**2) * fan_in))
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------- parameter containers


class Module:
    """Minimal parameter container: attributes that are Tensors, RunningStats or Modules."""

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, val in self.__dict__.items():
            if isinstance(val, (Tensor, Module, RunningStats)):
                yield name, val
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, val in self._children():
            if isinstance(val, Tensor):
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_running_stats(self, prefix: str = "") -> Iterator[tuple[str, RunningStats]]:
        for name, val in self._children():
            if isinstance(val, RunningStats):
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_running_stats(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, val in self._children():
            if isinstance(val, Module):
                yield from val.modules()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        """Parameters plus populated running statistics, keyed by dotted name."""
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, s in self.named_running_stats():
            if s.populated:
                state[f"{name}.mean"] = s.mean.copy()
                state[f"{name}.var"] = s.var.copy()
        return state

    def load_state_dict(self, state: dict) -> None:
        for name, p in self.named_parameters():
            if name not in state:
                raise KeyError(f"missing parameter {name}")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: stored shape {arr.shape} != model shape {p.shape}")
            p.data = arr.copy()
        for name, s in self.named_running_stats():
            if f"{name}.mean" in state:
                s.mean = np.array(state[f"{name}.mean"], dtype=np.float64)
                s.var = np.array(state[f"{name}.var"], dtype=np.float64)
            else:
                s.mean = s.var = None


class Conv2d(Module):
    def __init__(self, rng, in_c: int, out_c: int, k: int, stride: int = 1, padding=0):
        self.weight = Tensor(_he_uniform(rng, (out_c, in_c, k, k), in_c * k * k), requires_grad=True)
        self.bias = Tensor(np.zeros(out_c), requires_grad=True)
        self.stride, self.padding = stride, padding

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, rng, in_c: int, out_c: int, stride: int = 2):
        self.weight = Tensor(_he_uniform(rng, (in_c, out_c, stride, stride), in_c), requires_grad=True)
        self.bias = Tensor(np.zeros(out_c), requires_grad=True)
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d_transpose(x, self.weight, self.bias, self.stride)


class Linear(Module):
    def __init__(self, rng, in_f: int, out_f: int):
        self.weight = Tensor(_he_uniform(rng, (out_f, in_f), in_f), requires_grad=True)
        self.bias = Tensor(np.zeros(out_f), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class InstanceNorm2d(Module):
    def __init__(self, c: int):
        self.gamma = Tensor(np.ones(c), requires_grad=True)
        self.beta = Tensor(np.zeros(c), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.instance_norm(x, self.gamma, self.beta, NORM_EPS)


class BatchNorm2d(Module):
    def __init__(self, c: int, momentum: float = 0.1):
        self.gamma = Tensor(np.ones(c), requires_grad=True)
        self.beta = Tensor(np.zeros(c), requires_grad=True)
        self.stats = RunningStats(c)
        self.momentum = momentum

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.stats, self.momentum, NORM_EPS, training)


class LayerNorm(Module):
    def __init__(self, shape: tuple):
        self.gamma = Tensor(np.ones(shape), requires_grad=True)
        self.beta = Tensor(np.zeros(shape), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, NORM_EPS)


# ---------------------------------------------------------------- generator


class StandardUnitBlock(Module):
    """Two (3x3 conv -> instance norm -> LReLU) stages, shape preserving."""

    def __init__(self, rng, in_c: int, filters: int, alpha: float = LRELU_SLOPE):
        self.conv1 = Conv2d(rng, in_c, filters, 3, 1, 1)
        self.norm1 = InstanceNorm2d(filters)
        self.conv2 = Conv2d(rng, filters, filters, 3, 1, 1)
        self.norm2 = InstanceNorm2d(filters)
        self.alpha = alpha

    @property
    def filters(self) -> int:
        return self.conv2.out_channels

    def __call__(self, x: Tensor) -> Tensor:
        x = ops.leaky_relu(self.norm1(self.conv1(x)), self.alpha)
        return ops.leaky_relu(self.norm2(self.conv2(x)), self.alpha)


def gc_ratio_for(channels: int, ratio: int = GC_RATIO) -> int:
    """Bottleneck ratio actually used: ``ratio``, capped so the bottleneck keeps >= 2 channels."""
    r = ratio
    while r > 1 and (channels % r or channels // r < 2):
        r //= 2
    return r


class GCBlock(Module):
    """Global-context attention: softmax-pooled context -> bottleneck transform -> broadcast add."""

    def __init__(self, rng, channels: int, r: int):
        if r < 1 or channels % r:
            raise ConfigurationError(f"GC block: channels {channels} not divisible by ratio {r}")
        hidden = channels // r
        self.r = r
        self.context_conv = Conv2d(rng, channels, 1, 1)
        self.reduce_conv = Conv2d(rng, channels, hidden, 1)
        self.norm = LayerNorm((hidden, 1, 1))
        self.expand_conv = Conv2d(rng, hidden, channels, 1)

    def attention(self, x: Tensor) -> Tensor:
        n, _, h, w = x.shape
        logits = ops.reshape(self.context_conv(x), (n, 1, h * w))
        return ops.softmax(logits, axis=-1)

    def context(self, x: Tensor) -> Tensor:
        """Attention-weighted mean of ``x`` over positions, shape (N, C, 1, 1)."""
        n, c, h, w = x.shape
        attn = self.attention(x)
        flat = ops.reshape(x, (n, c, h * w))
        return ops.reshape(ops.sum(ops.mul(flat, attn), axis=2), (n, c, 1, 1))

    def __call__(self, x: Tensor) -> Tensor:
        t = self.reduce_conv(self.context(x))
        t = self.expand_conv(ops.relu(self.norm(t)))
        return ops.add(x, t)


class Generator(Module):
    """U-Net: 5 encoder unit blocks each followed by a GC block, 4 max pools,
    4 transposed-conv up-samplings with skip concatenation, 4 decoder blocks,
    1x1 output conv and sigmoid."""

    def __init__(self, seed: int, scale=1):
        self.scale = parse_scale(scale)
        self.seed = int(seed)
        f = scaled(GENERATOR_FILTERS, self.scale)
        rng = np.random.default_rng(self.seed)
        self.encoder: list[StandardUnitBlock] = []
        self.gc: list[GCBlock] = []
        in_c = 1
        for c in f[:5]:
            self.encoder.append(StandardUnitBlock(rng, in_c, c))
            self.gc.append(GCBlock(rng, c, gc_ratio_for(c)))
            in_c = c
        self.up: list[ConvTranspose2d] = []
        self.decoder: list[StandardUnitBlock] = []
        skips = f[:4][::-1]
        for c, skip_c in zip(f[5:], skips):
            self.up.append(ConvTranspose2d(rng, in_c, c, 2))
            self.decoder.append(StandardUnitBlock(rng, c + skip_c, c))
            in_c = c
        self.head = Conv2d(rng, in_c, 1, 1)

    def unit_blocks(self) -> list[StandardUnitBlock]:
        return self.encoder + self.decoder

    def inventory(self) -> dict:
        return {
            "unit_block_filters": [b.filters for b in self.unit_blocks()],
            "gc_blocks": len(self.gc),
            "gc_positions": ["encoder"] * len(self.gc),
            "max_pools": len(self.encoder) - 1,
            "transposed_convs": len(self.up),
        }

    def __call__(self, noisy: Tensor) -> Tensor:
        if noisy.ndim != 4 or noisy.shape[1] != 1:
            raise DimensionError(f"generator expects N x 1 x H x W input, got {noisy.shape}")
        h, w = noisy.shape[2:]
        if h % 16 or w % 16:
            raise DimensionError(f"generator input H={h}, W={w} must be divisible by 16")
        x = noisy
        skips = []
        for i, (blk, gc) in enumerate(zip(self.encoder, self.gc)):
            x = gc(blk(x))
            if i < 4:
                skips.append(x)
                x = ops.maxpool2d(x)
        for up, blk, skip in zip(self.up, self.decoder, reversed(skips)):
            x = blk(ops.concat([up(x), skip], axis=1))
        return ops.sigmoid(self.head(x))


# ---------------------------------------------------------------- discriminator


class Discriminator(Module):
    """Eight 3x3 conv -> LReLU -> batch-norm layers, global average pool,
    FC(1024) -> LReLU -> FC(1) -> sigmoid."""

    def __init__(self, seed: int, scale=1):
        self.scale = parse_scale(scale)
        self.seed = int(seed)
        f = scaled(DISCRIMINATOR_FILTERS, self.scale)
        rng = np.random.default_rng(self.seed)
        self.convs: list[Conv2d] = []
        self.norms: list[BatchNorm2d] = []
        in_c = 1
        for c, s in zip(f, DISCRIMINATOR_STRIDES):
            self.convs.append(Conv2d(rng, in_c, c, 3, s, "same"))
            self.norms.append(BatchNorm2d(c))
            in_c = c
        self.fc1 = Linear(rng, in_c, FC_HIDDEN)
        self.fc2 = Linear(rng, FC_HIDDEN, 1)

    def inventory(self) -> dict:
        return {
            "conv_filters": [c.out_channels for c in self.convs],
            "conv_strides": [c.stride for c in self.convs],
            "fc_outputs": [self.fc1.weight.shape[0], self.fc2.weight.shape[0]],
        }

    def __call__(self, image: Tensor, training: bool = True) -> Tensor:
        if image.ndim != 4 or image.shape[1] != 1:
            raise DimensionError(f"discriminator expects N x 1 x H x W input, got {image.shape}")
        h, w = image.shape[2:]
        if h % 16 or w % 16:
            raise DimensionError(f"discriminator input H={h}, W={w} must be divisible by 16")
        if training and image.shape[0] < 2:
            raise StateError("discriminator training mode needs batch >= 2 for batch statistics")
        x = image
        for conv, bn in zip(self.convs, self.norms):
            x = bn(ops.leaky_relu(conv(x), LRELU_SLOPE), training)
        x = ops.leaky_relu(self.fc1(ops.global_avg_pool(x)), LRELU_SLOPE)
        return ops.sigmoid(self.fc2(x))


def build_generator(seed: int, base_channels_scale=1) -> Generator:
    return Generator(seed, base_channels_scale)


def build_discriminator(seed: int, scale=1) -> Discriminator:
    return Discriminator(seed, scale)


def generator_forward(g: Generator, noisy: Tensor) -> Tensor:
    return g(noisy)


def discriminator_forward(d: Discriminator, image: Tensor, training: bool = True) -> Tensor:
    return d(image, training)


def gc_block_forward(blk: GCBlock, x: Tensor) -> Tensor:
    return blk(x)


def count_parameters(m: Module) -> int:
    return int(sum(p.size for p in m.parameters()))


def as_image_batch(arr: np.ndarray, requires_grad: bool = False) -> Tensor:
    """(H, W) or (N, H, W) or (N, 1, H, W) numpy -> N x 1 x H x W Tensor."""
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 2:
        a = a[None, None]
    elif a.ndim == 3:
        a = a[:, None]
    return Tensor(a, requires_grad=requires_grad)


def infer(g: Generator, images: np.ndarray, batch: Optional[int] = None) -> np.ndarray:
    """Run the generator without recording a tape; returns (N, H, W)."""
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    step = batch or len(x)
    outs = [g(as_image_batch(x[i : i + step])).data[:, 0] for i in range(0, len(x), step)]
    return np.concatenate(outs, axis=0)
