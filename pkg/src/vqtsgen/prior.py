"""Bidirectional masked-token prior over code sequences, plus iterative sampling.

Training randomly masks token positions and predicts the originals; sampling
starts from an all-masked sequence and, across T iterations, keeps the most
confident newly drawn tokens while the mask fraction follows a cosine
schedule down to zero. An optional class embedding is prepended to the
sequence; a reserved null class supports unconditional use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, NumericError
from .seeding import stream


def cosine_mask_ratio(progress: float) -> float:
    """Mask fraction gamma(r) = cos(pi*r/2): 1 at r=0, 0 at r=1, nonincreasing."""
    return math.cos(math.pi * min(max(progress, 0.0), 1.0) / 2.0)


def mask_tokens(tokens: np.ndarray, ratio: float, mask_id: int,
                rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Replace round(ratio*N) positions per row with the mask id.

    Positions are drawn uniformly without replacement; returns the masked
    copy and the boolean mask of replaced positions.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("mask ratio must be in [0, 1]")
    tokens = np.atleast_2d(np.asarray(tokens))
    B, N = tokens.shape
    count = int(round(ratio * N))
    order = np.argsort(rng.random((B, N)), axis=1)
    mask = np.zeros((B, N), dtype=bool)
    rows = np.repeat(np.arange(B), count)
    mask[rows, order[:, :count].reshape(-1)] = True
    masked = np.where(mask, mask_id, tokens)
    return masked, mask


@dataclass
class PriorSpec:
    num_codes: int
    seq_len: int
    num_classes: int = 1
    dim: int = 64
    layers: int = 2
    heads: int = 4
    mlp_ratio: int = 4


class TransformerBlock(ad.Module):
    def __init__(self, rng, dim: int, heads: int, mlp_ratio: int, dtype):
        self.norm1 = ad.LayerNorm(dim, dtype=dtype)
        self.attn = ad.SelfAttention(rng, dim, heads, dtype=dtype)
        self.norm2 = ad.LayerNorm(dim, dtype=dtype)
        self.fc1 = ad.Linear(rng, dim, mlp_ratio * dim, dtype=dtype)
        self.fc2 = ad.Linear(rng, mlp_ratio * dim, dim, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        x = ad.add(x, self.attn(self.norm1(x)))
        return ad.add(x, self.fc2(ad.gelu(self.fc1(self.norm2(x)))))


class MaskedTokenPrior(ad.Module):
    """Transformer over [class, s_1..s_N] predicting code logits per position."""

    def __init__(self, spec: PriorSpec, rng: np.random.Generator,
                 dtype=ad.DEFAULT_DTYPE):
        if spec.dim % spec.heads:
            raise ConfigurationError("prior dim must be divisible by heads")
        self.spec = spec
        self.mask_id = spec.num_codes
        self.null_class = spec.num_classes
        scale = 0.02
        self.tok_emb = ad.parameter(
            rng.normal(0, scale, size=(spec.num_codes + 1, spec.dim)), dtype=dtype)
        self.cls_emb = ad.parameter(
            rng.normal(0, scale, size=(spec.num_classes + 1, spec.dim)), dtype=dtype)
        self.pos_emb = ad.parameter(
            rng.normal(0, scale, size=(spec.seq_len + 1, spec.dim)), dtype=dtype)
        self.blocks = [TransformerBlock(rng, spec.dim, spec.heads, spec.mlp_ratio, dtype)
                       for _ in range(spec.layers)]
        self.final_norm = ad.LayerNorm(spec.dim, dtype=dtype)
        self.head_hidden = ad.Linear(rng, spec.dim, spec.dim, dtype=dtype)
        self.head_out = ad.Linear(rng, spec.dim, spec.num_codes, dtype=dtype)

    def _class_ids(self, labels, batch: int) -> np.ndarray:
        if labels is None:
            return np.full(batch, self.null_class, dtype=np.int64)
        ids = np.asarray(labels, dtype=np.int64).reshape(-1)
        if ids.shape[0] == 1 and batch > 1:
            ids = np.repeat(ids, batch)
        if np.any(ids < 0) or np.any(ids > self.null_class):
            raise ValueError("class label out of range")
        return ids

    def sequence_logits(self, tokens: np.ndarray, labels=None) -> Tensor:
        """Logits for the class slot plus every token position: [B, N+1, K]."""
        tokens = np.atleast_2d(np.asarray(tokens))
        if tokens.max() > self.mask_id or tokens.min() < 0:
            raise ConfigurationError("token id outside vocabulary; corrupt checkpoint?")
        B, N = tokens.shape
        if N != self.spec.seq_len:
            raise ValueError(f"sequence length {N} != trained length {self.spec.seq_len}")
        cls = ad.embedding(self.cls_emb, self._class_ids(labels, B)[:, None])
        tok = ad.embedding(self.tok_emb, tokens)
        h = ad.add(ad.concat([cls, tok], axis=1), self.pos_emb)
        for blk in self.blocks:
            h = blk(h)
        h = self.final_norm(h)
        return self.head_out(ad.gelu(self.head_hidden(h)))

    def token_logits(self, tokens: np.ndarray, labels=None) -> np.ndarray:
        """Inference-only logits at the N token positions."""
        with ad.no_grad():
            return self.sequence_logits(tokens, labels).data[:, 1:, :]


def train_stage2(prior: MaskedTokenPrior, tokens: np.ndarray, labels: np.ndarray | None,
                 steps: int, batch_size: int, schedule: ad.LrSchedule, seed: int,
                 uncond_prob: float = 0.1, weight_decay: float = 0.01,
                 log_every: int = 50, optimizer: ad.AdamW | None = None,
                 start_step: int = 0, progress=None) -> "TrainLogS2":
    """Masked-token cross-entropy training; loss covers masked positions only."""
    tokens = np.atleast_2d(np.asarray(tokens))
    n, N = tokens.shape
    if n == 0:
        raise ValueError("no token sequences to train on")
    K = prior.spec.num_codes
    rng = stream(seed, "stage2.batches")
    for _ in range(start_step):
        _replay_stage2_draws(rng, n, batch_size, N)
    opt = optimizer or ad.AdamW(prior.parameters(), weight_decay=weight_decay)
    log = TrainLogS2([], [], [])
    for step in range(start_step, steps):
        idx, ratio, masked, mask, uncond = _draw_stage2_batch(
            rng, tokens, n, batch_size, N, prior.mask_id, uncond_prob)
        step_labels = None if (labels is None or uncond) else labels[idx]
        logits = prior.sequence_logits(masked, step_labels)
        flat_logits = ad.reshape(logits, (batch_size * (N + 1), K))
        targets = np.concatenate(
            [np.zeros((batch_size, 1), dtype=np.int64), tokens[idx]], axis=1).reshape(-1)
        weights = np.concatenate(
            [np.zeros((batch_size, 1), dtype=bool), mask], axis=1).reshape(-1).astype(np.float32)
        loss = ad.cross_entropy(flat_logits, targets, weights)
        loss_val = float(loss.data)
        if not np.isfinite(loss_val):
            raise NumericError(f"stage-2 loss became non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step(ad.lr_at(schedule, step))
        if step % log_every == 0 or step == steps - 1:
            pred = logits.data[:, 1:, :].argmax(axis=-1)
            acc = float((pred[mask] == tokens[idx][mask]).mean())
            log.steps.append(step)
            log.losses.append(loss_val)
            log.accuracies.append(acc)
            if progress:
                progress(step, loss_val)
    return log


def _draw_stage2_batch(rng, tokens, n, batch_size, N, mask_id, uncond_prob):
    idx = rng.integers(0, n, size=batch_size)
    ratio = max(cosine_mask_ratio(rng.random()), 1.0 / N)
    masked, mask = mask_tokens(tokens[idx], ratio, mask_id, rng)
    uncond = rng.random() < uncond_prob
    return idx, ratio, masked, mask, uncond


def _replay_stage2_draws(rng, n, batch_size, N):
    rng.integers(0, n, size=batch_size)
    rng.random()
    rng.random((batch_size, N))
    rng.random()


@dataclass
class TrainLogS2:
    steps: list[int]
    losses: list[float]
    accuracies: list[float]

    def final(self) -> float:
        return self.losses[-1]


def masked_accuracy(prior: MaskedTokenPrior, tokens: np.ndarray,
                    labels: np.ndarray | None, ratio: float, seed: int) -> float:
    """Fraction of masked positions recovered exactly at a fixed mask ratio."""
    tokens = np.atleast_2d(np.asarray(tokens))
    rng = stream(seed, "stage2.eval")
    masked, mask = mask_tokens(tokens, ratio, prior.mask_id, rng)
    hits = 0
    total = 0
    for lo in range(0, len(tokens), 128):
        sl = slice(lo, lo + 128)
        step_labels = None if labels is None else labels[sl]
        logits = prior.token_logits(masked[sl], step_labels)
        pred = logits.argmax(axis=-1)
        hits += int((pred[mask[sl]] == tokens[sl][mask[sl]]).sum())
        total += int(mask[sl].sum())
    return hits / max(total, 1)


def sample_tokens(logits_fn, batch: int, seq_len: int, num_codes: int,
                  iterations: int, rng: np.random.Generator, mask_id: int,
                  labels=None, gumbel_scale: float = 1.0,
                  record_trajectory: bool = False):
    """Iterative bidirectional decoding from all-masked to fully sampled rows.

    logits_fn(tokens [B, N], labels) must return logits [B, N, K]. At
    iteration t the ceil((1 - gamma(t/T)) * N) highest-confidence positions
    stay fixed; confidence is the sampled token's probability plus Gumbel
    noise whose scale anneals linearly to zero.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    tokens = np.full((batch, seq_len), mask_id, dtype=np.int64)
    fixed = np.zeros((batch, seq_len), dtype=bool)
    trajectory: list[int] = []
    for t in range(1, iterations + 1):
        logits = np.asarray(logits_fn(tokens, labels), dtype=np.float64)
        shifted = logits - logits.max(axis=-1, keepdims=True)
        probs = np.exp(shifted)
        probs /= probs.sum(axis=-1, keepdims=True)
        flat = probs.reshape(-1, num_codes)
        cdf = np.cumsum(flat, axis=1)
        u = rng.random((flat.shape[0], 1))
        sampled = np.minimum((u > cdf).sum(axis=1), num_codes - 1).reshape(batch, seq_len)
        conf = np.take_along_axis(probs, sampled[..., None], axis=-1)[..., 0]
        noise_scale = gumbel_scale * (1.0 - t / iterations)
        conf = conf + noise_scale * rng.gumbel(size=conf.shape)
        conf[fixed] = np.inf
        target = min(seq_len, math.ceil((1.0 - cosine_mask_ratio(t / iterations)) * seq_len))
        target = max(target, int(fixed.sum(axis=1).max()))
        keep_cols = np.argpartition(-conf, max(target - 1, 0), axis=1)[:, :target]
        new_fixed = np.zeros_like(fixed)
        np.put_along_axis(new_fixed, keep_cols, True, axis=1)
        tokens = np.where(new_fixed, np.where(fixed, tokens, sampled), mask_id)
        fixed = new_fixed
        trajectory.append(int(fixed.sum(axis=1)[0]))
    if record_trajectory:
        return tokens, trajectory
    return tokens


def generate(stage1, prior: MaskedTokenPrior, n: int, rng: np.random.Generator,
             class_label: int | None = None, iterations: int = 10,
             gumbel_scale: float = 1.0, batch: int = 128) -> np.ndarray:
    """Sample n token sequences from the prior and decode them to series."""
    if prior.spec.num_codes != stage1.spec.codebook_size \
            or prior.spec.seq_len != stage1.spec.tokens_per_series:
        raise ConfigurationError("stage-1 and stage-2 checkpoints are incompatible")
    if n == 0:
        return np.zeros((0, stage1.spec.length), dtype=np.float32)
    outs = []
    remaining = n
    while remaining > 0:
        b = min(batch, remaining)
        tok = sample_tokens(
            prior.token_logits, b, prior.spec.seq_len, prior.spec.num_codes,
            iterations, rng, prior.mask_id,
            labels=None if class_label is None else np.full(b, class_label),
            gumbel_scale=gumbel_scale)
        outs.append(stage1.decode_tokens(tok))
        remaining -= b
    return np.concatenate(outs, axis=0)
