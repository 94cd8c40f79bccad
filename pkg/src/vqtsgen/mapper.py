"""U-Net refiner that maps synthetic series toward the data distribution.

The network halves the temporal length and doubles the channel width per
level on the way down, runs residual blocks plus self-attention at the
bottom, and mirrors the schedule upward with skip connections. Activations
are snake (x + sin^2(ax)/a) with a learnable positive alpha per channel,
which suits oscillatory signals. A global residual makes the map
identity-like at initialization.

Training pairs are built fresh every step: a real series x and its
re-decoded stochastic quantization x' at the tuned temperature; the model
minimizes the L1 distance from f(x') back to x. Refinement at inference is
the deterministic forward pass on generated samples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, NumericError
from .generator import Stage1Model, TrainLog
from .quantize import svq_sample_from_distances
from .seeding import stream


@dataclass
class MapperSpec:
    length: int
    levels: int = 2
    base_channels: int = 32
    heads: int = 1


def snake_alpha(log_alpha: Tensor) -> Tensor:
    # exponential parameterization keeps alpha strictly positive
    return ad.exp(log_alpha)


class SnakeResBlock(ad.Module):
    def __init__(self, rng, c_in: int, c_out: int, dtype):
        self.norm = ad.LayerNorm(c_in, dtype=dtype)
        self.log_alpha1 = ad.parameter(np.zeros((1, 1, c_in)), dtype=dtype)
        self.conv1 = ad.ConvCL(rng, c_in, c_out, 3, padding=1, dtype=dtype)
        self.log_alpha2 = ad.parameter(np.zeros((1, 1, c_out)), dtype=dtype)
        self.conv2 = ad.ConvCL(rng, c_out, c_out, 3, padding=1, dtype=dtype)
        self.skip = ad.ConvCL(rng, c_in, c_out, 1, dtype=dtype) if c_in != c_out else None

    def __call__(self, x: Tensor) -> Tensor:
        h = self.conv1(ad.snake(self.norm(x), snake_alpha(self.log_alpha1)))
        h = self.conv2(ad.snake(h, snake_alpha(self.log_alpha2)))
        return ad.add(self.skip(x) if self.skip is not None else x, h)


class MiddleAttention(ad.Module):
    def __init__(self, rng, channels: int, heads: int, dtype):
        self.norm = ad.LayerNorm(channels, dtype=dtype)
        self.attn = ad.SelfAttention(rng, channels, heads, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(x, self.attn(self.norm(x)))


class UNetModel(ad.Module):
    def __init__(self, spec: MapperSpec, rng: np.random.Generator,
                 dtype=ad.DEFAULT_DTYPE):
        if spec.levels < 1:
            raise ConfigurationError("unet needs at least one level")
        self.spec = spec
        c = spec.base_channels
        self.stem = ad.ConvCL(rng, 1, c, 3, padding=1, dtype=dtype)
        self.down_res: list[ad.Module] = []
        self.downs: list[ad.Module] = []
        for _ in range(spec.levels):
            self.down_res.append(SnakeResBlock(rng, c, c, dtype))
            self.downs.append(ad.ConvCL(rng, c, 2 * c, 4, stride=2, padding=1, dtype=dtype))
            c *= 2
        self.mid1 = SnakeResBlock(rng, c, c, dtype)
        self.mid_attn = MiddleAttention(rng, c, spec.heads, dtype)
        self.mid2 = SnakeResBlock(rng, c, c, dtype)
        self.up_convs: list[ad.Module] = []
        self.up_res: list[ad.Module] = []
        for _ in range(spec.levels):
            self.up_convs.append(ad.ConvCL(rng, c, c // 2, 3, padding=1, dtype=dtype))
            c //= 2
            self.up_res.append(SnakeResBlock(rng, 2 * c, c, dtype))
        self.out = ad.ConvCL(rng, c, 1, 3, padding=1, dtype=dtype)
        # identity map at init: the refinement starts from "change nothing"
        self.out.w.data[:] = 0.0

    @property
    def divisor(self) -> int:
        return 2 ** self.spec.levels

    def forward(self, x: Tensor, record_shapes: bool = False):
        """Strict forward pass on [B, L, 1]; L must divide by 2^levels."""
        B, L, C = x.data.shape
        if L % self.divisor:
            raise ConfigurationError(
                f"input length {L} not divisible by {self.divisor} (levels={self.spec.levels})")
        shapes: list[tuple[int, int]] = []
        h = self.stem(x)
        skips: list[Tensor] = []
        for res, down in zip(self.down_res, self.downs):
            h = res(h)
            shapes.append((h.data.shape[2], h.data.shape[1]))
            skips.append(h)
            h = down(h)
        h = self.mid2(self.mid_attn(self.mid1(h)))
        shapes.append((h.data.shape[2], h.data.shape[1]))
        for up, res, skip in zip(self.up_convs, self.up_res, reversed(skips)):
            h = up(ad.upsample2(h, axis=1))
            h = res(ad.concat([h, skip], axis=2))
            shapes.append((h.data.shape[2], h.data.shape[1]))
        y = ad.add(x, self.out(h))
        return (y, shapes) if record_shapes else y

    def apply(self, x: Tensor) -> Tensor:
        """Forward with edge padding/cropping when the length is indivisible."""
        L = x.data.shape[1]
        rem = L % self.divisor
        if rem == 0:
            return self.forward(x)
        padded = ad.pad_right_edge(x, self.divisor - rem, axis=1)
        return ad.crop_to(self.forward(padded), L, axis=1)


def refine(unet: UNetModel, values: np.ndarray, batch: int = 256) -> np.ndarray:
    """Deterministic refinement pass over a batch of series [n, L] -> [n, L]."""
    values = np.asarray(values, dtype=np.float32)
    if values.ndim == 1:
        values = values[None, :]
    if values.shape[0] == 0:
        return values.copy()
    if values.shape[1] != unet.spec.length:
        raise ValueError(
            f"series length {values.shape[1]} != mapper training length {unet.spec.length}")
    outs = []
    with ad.no_grad():
        for lo in range(0, len(values), batch):
            x = Tensor(values[lo:lo + batch, :, None])
            outs.append(unet.apply(x).data[:, :, 0])
    return np.concatenate(outs, axis=0)


def train_stage3(unet: UNetModel, stage1: Stage1Model, train_values: np.ndarray,
                 tau_star: float, steps: int, batch_size: int,
                 schedule: ad.LrSchedule, seed: int, weight_decay: float = 0.01,
                 log_every: int = 50, optimizer: ad.AdamW | None = None,
                 start_step: int = 0, progress=None) -> TrainLog:
    """L1 training on (stochastic variant, original) pairs, re-sampled per step."""
    if tau_star <= 0:
        raise ValueError("tau_star must be > 0")
    values = np.asarray(train_values, dtype=np.float32)
    if values.shape[1] != unet.spec.length:
        raise ConfigurationError("mapper length does not match the training data")
    rng = stream(seed, "stage3.batches")
    for _ in range(start_step):
        rng.integers(0, len(values), size=batch_size)
        rng.random((batch_size * stage1.spec.tokens_per_series, 1))
    opt = optimizer or ad.AdamW(unet.parameters(), weight_decay=weight_decay)
    # encoder latents never change during stage 3: compute distances once
    dist_table = stage1.distance_table(values)
    log = TrainLog([], [])
    for step in range(start_step, steps):
        idx = rng.integers(0, len(values), size=batch_size)
        variant_tokens = svq_sample_from_distances(dist_table[idx], tau_star, rng)
        x_variant = stage1.decode_tokens(variant_tokens)
        pred = unet.apply(Tensor(x_variant[:, :, None]))
        loss = ad.l1_loss(pred, Tensor(values[idx][:, :, None]))
        loss_val = float(loss.data)
        if not np.isfinite(loss_val):
            raise NumericError(f"stage-3 loss became non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step(ad.lr_at(schedule, step))
        if step % log_every == 0 or step == steps - 1:
            log.steps.append(step)
            log.losses.append(loss_val)
            if progress:
                progress(step, loss_val)
    return log
