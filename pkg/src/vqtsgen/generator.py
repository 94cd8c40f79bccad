"""Tokenizing encoder/decoder and its training stage.

The encoder halves the temporal length and doubles the channel width at
every level, projects to the code dimension, and the decoder mirrors the
stack with nearest-neighbor upsampling. Together with the codebook this
turns a series of length L into N = L / 2^levels discrete tokens and back.

Feature maps run channels-last ([B, L, C]) internally; raw series enter and
leave as plain [n, L] arrays, and the quantizer sees rows-layout latents
[B, N, d].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, NumericError
from .quantize import Codebook, quantize_straight_through, svq_sample_from_distances
from .seeding import stream


@dataclass
class TokenizerSpec:
    length: int
    levels: int = 2
    base_channels: int = 32
    res_blocks: int = 2
    code_dim: int = 8
    codebook_size: int = 1024
    commitment: float = 0.25
    ema_decay: float = 0.99

    @property
    def downsample_factor(self) -> int:
        return 2 ** self.levels

    @property
    def tokens_per_series(self) -> int:
        if self.length % self.downsample_factor:
            raise ConfigurationError(
                f"length {self.length} not divisible by {self.downsample_factor}")
        return self.length // self.downsample_factor


class ResBlockCL(ad.Module):
    """Pre-norm residual block on channels-last maps."""

    def __init__(self, rng, channels: int, dtype):
        self.norm = ad.LayerNorm(channels, dtype=dtype)
        self.conv1 = ad.ConvCL(rng, channels, channels, 3, padding=1, dtype=dtype)
        self.conv2 = ad.ConvCL(rng, channels, channels, 3, padding=1, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.conv1(ad.relu(self.norm(x)))
        h = self.conv2(ad.relu(h))
        return ad.add(x, h)


class ConvEncoder(ad.Module):
    def __init__(self, spec: TokenizerSpec, rng, dtype=ad.DEFAULT_DTYPE):
        c = spec.base_channels
        self.stem = ad.ConvCL(rng, 1, c, 3, padding=1, dtype=dtype)
        self.stages: list[list[ad.Module]] = []
        self.downs: list[ad.Module] = []
        for _ in range(spec.levels):
            self.stages.append([ResBlockCL(rng, c, dtype) for _ in range(spec.res_blocks)])
            self.downs.append(ad.ConvCL(rng, c, 2 * c, 4, stride=2, padding=1, dtype=dtype))
            c *= 2
        self.mid = ResBlockCL(rng, c, dtype)
        self.proj = ad.ConvCL(rng, c, spec.code_dim, 1, dtype=dtype)

    def _collect(self, prefix, out):  # lists of lists need explicit walking
        ad.Module._collect(self, prefix, out)
        for i, blocks in enumerate(self.stages):
            for j, blk in enumerate(blocks):
                blk._collect(f"{prefix}stages.{i}.{j}.", out)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.stem(x)
        for blocks, down in zip(self.stages, self.downs):
            for blk in blocks:
                h = blk(h)
            h = down(h)
        h = self.mid(h)
        return self.proj(h)


class ConvDecoder(ad.Module):
    def __init__(self, spec: TokenizerSpec, rng, dtype=ad.DEFAULT_DTYPE):
        c_top = spec.base_channels * (2 ** spec.levels)
        self.proj = ad.ConvCL(rng, spec.code_dim, c_top, 1, dtype=dtype)
        self.mid = ResBlockCL(rng, c_top, dtype)
        self.ups: list[ad.Module] = []
        self.stages: list[list[ad.Module]] = []
        c = c_top
        for _ in range(spec.levels):
            self.ups.append(ad.ConvCL(rng, c, c // 2, 3, padding=1, dtype=dtype))
            c //= 2
            self.stages.append([ResBlockCL(rng, c, dtype) for _ in range(spec.res_blocks)])
        self.out_norm = ad.LayerNorm(c, dtype=dtype)
        self.out = ad.ConvCL(rng, c, 1, 3, padding=1, dtype=dtype)

    def _collect(self, prefix, out):
        ad.Module._collect(self, prefix, out)
        for i, blocks in enumerate(self.stages):
            for j, blk in enumerate(blocks):
                blk._collect(f"{prefix}stages.{i}.{j}.", out)

    def __call__(self, zq: Tensor) -> Tensor:
        h = self.mid(self.proj(zq))
        for up, blocks in zip(self.ups, self.stages):
            h = up(ad.upsample2(h, axis=1))
            for blk in blocks:
                h = blk(h)
        return self.out(ad.relu(self.out_norm(h)))


class Stage1Model:
    """Encoder, decoder, and codebook trained jointly as the tokenizer."""

    def __init__(self, spec: TokenizerSpec, rng: np.random.Generator,
                 dtype=ad.DEFAULT_DTYPE):
        spec.tokens_per_series  # validates divisibility
        self.spec = spec
        self.encoder = ConvEncoder(spec, rng, dtype=dtype)
        self.decoder = ConvDecoder(spec, rng, dtype=dtype)
        self.codebook = Codebook(spec.codebook_size, spec.code_dim, rng, dtype=dtype)

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        self.encoder._collect("encoder.", out)
        self.decoder._collect("decoder.", out)
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {k: t.data for k, t in self.parameters().items()}
        for k, arr in self.codebook.state_arrays().items():
            out[f"codebook.{k}"] = arr
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        model_arrays = {k: v for k, v in arrays.items() if not k.startswith("codebook.")}
        book_arrays = {k[len("codebook."):]: v for k, v in arrays.items()
                       if k.startswith("codebook.")}
        missing = sorted(set(params) - set(model_arrays))
        if missing:
            raise ConfigurationError(f"stage-1 checkpoint missing parameters: {missing[:4]}")
        for name, t in params.items():
            src = model_arrays[name]
            if tuple(src.shape) != tuple(t.data.shape):
                raise ConfigurationError(
                    f"stage-1 checkpoint shape mismatch for {name}: {src.shape} vs {t.data.shape}")
            t.data = np.ascontiguousarray(src, dtype=t.data.dtype)
        self.codebook.load_state(book_arrays)

    # -- inference paths -------------------------------------------------------

    def _check_length(self, values: np.ndarray) -> np.ndarray:
        values = np.atleast_2d(np.asarray(values, dtype=np.float32))
        if values.shape[1] != self.spec.length:
            raise ValueError(
                f"series length {values.shape[1]} != trained length {self.spec.length}")
        return values

    def encode_latents(self, values: np.ndarray, batch: int = 256) -> np.ndarray:
        """E(x) for raw series [n, L] -> rows-layout latents [n, N, d]."""
        values = self._check_length(values)
        chunks = []
        with ad.no_grad():
            for lo in range(0, len(values), batch):
                x = Tensor(values[lo:lo + batch, :, None])
                chunks.append(self.encoder(x).data)
        return np.concatenate(chunks, axis=0)

    def encode_tokens(self, values: np.ndarray, batch: int = 256) -> np.ndarray:
        _, tokens = self.codebook.quantize_rows(self.encode_latents(values, batch=batch))
        return tokens

    def decode_tokens(self, tokens: np.ndarray, batch: int = 256) -> np.ndarray:
        """D(s) for token rows [n, N] -> series [n, L] (no graph recorded)."""
        tokens = np.atleast_2d(np.asarray(tokens))
        if tokens.shape[1] != self.spec.tokens_per_series:
            raise ValueError(
                f"token count {tokens.shape[1]} != expected {self.spec.tokens_per_series}")
        outs = []
        with ad.no_grad():
            for lo in range(0, len(tokens), batch):
                zq = Tensor(self.codebook.lookup_rows(tokens[lo:lo + batch]).astype(np.float32))
                outs.append(self.decoder(zq).data[:, :, 0])
        return np.concatenate(outs, axis=0)

    def distance_table(self, values: np.ndarray) -> np.ndarray:
        """Per-series, per-position distance to every code: [n, N, K] float32."""
        return self.codebook.distances_rows(self.encode_latents(values)).astype(np.float32)

    def reconstruct(self, values: np.ndarray) -> np.ndarray:
        """x -> D(Q(E(x))): the deterministic round trip."""
        return self.decode_tokens(self.encode_tokens(values))

    def stochastic_variant(self, values: np.ndarray, tau: float,
                           rng: np.random.Generator,
                           return_tokens: bool = False):
        """x -> D(Q'(E(x), tau)): re-decoded stochastic quantization of real data."""
        tokens = svq_sample_from_distances(self.distance_table(values), tau, rng)
        decoded = self.decode_tokens(tokens)
        return (decoded, tokens) if return_tokens else decoded


@dataclass
class TrainLog:
    steps: list[int]
    losses: list[float]

    def final(self) -> float:
        return self.losses[-1]


def train_stage1(model: Stage1Model, train_values: np.ndarray, steps: int,
                 batch_size: int, schedule: ad.LrSchedule, seed: int,
                 weight_decay: float = 0.01, log_every: int = 50,
                 optimizer: ad.AdamW | None = None, start_step: int = 0,
                 progress=None) -> TrainLog:
    """Joint reconstruction training of encoder, decoder, and codebook."""
    values = model._check_length(train_values)
    if len(values) == 0:
        raise ValueError("training set is empty")
    rng_batch = stream(seed, "stage1.batches")
    rng_dead = stream(seed, "stage1.deadcodes")
    # replay batch draws consumed before a resume so the stream continues
    for _ in range(start_step):
        rng_batch.integers(0, len(values), size=batch_size)
    opt = optimizer or ad.AdamW(model.parameters(), weight_decay=weight_decay)
    spec = model.spec
    log = TrainLog([], [])
    for step in range(start_step, steps):
        idx = rng_batch.integers(0, len(values), size=batch_size)
        x = Tensor(values[idx][:, :, None])
        ze = model.encoder(x)
        zq_st, tokens, commit = quantize_straight_through(
            ze, model.codebook, commitment=spec.commitment)
        recon = model.decoder(zq_st)
        loss = ad.add(ad.mse_loss(recon, x), commit)
        loss_val = float(loss.data)
        if not np.isfinite(loss_val):
            raise NumericError(
                f"stage-1 loss became non-finite at step {step} "
                f"(lr={ad.lr_at(schedule, step):.2e})")
        opt.zero_grad()
        loss.backward()
        opt.step(ad.lr_at(schedule, step))
        model.codebook.ema_update_rows(ze.data, tokens, decay=spec.ema_decay, rng=rng_dead)
        if step % log_every == 0 or step == steps - 1:
            log.steps.append(step)
            log.losses.append(loss_val)
            if progress:
                progress(step, loss_val)
    return log


def reconstruction_mse(model: Stage1Model, values: np.ndarray) -> float:
    recon = model.reconstruct(values)
    return float(np.mean((recon - np.asarray(values, dtype=np.float32)) ** 2))
