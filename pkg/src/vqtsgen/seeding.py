"""Deterministic RNG streams: one root seed, named child streams per consumer."""

from __future__ import annotations

import zlib

import numpy as np


def stream(root_seed: int, label: str) -> np.random.Generator:
    """Return an independent generator derived from (root_seed, label).

    The same pair always yields the same stream, and distinct labels give
    statistically independent streams, so consumers never share state.
    """
    tag = zlib.crc32(label.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(root_seed), tag]))


def substream(rng: np.random.Generator, index: int) -> np.random.Generator:
    """Spawn the index-th child of an existing stream (used per-thread/per-item)."""
    seeds = rng.bit_generator.seed_seq.spawn(index + 1)
    return np.random.default_rng(seeds[index])
